"""Simulated CKKS-style homomorphic vector arithmetic.

Ciphertexts carry their (noisy) plaintext privately and can only be opened
through :meth:`SimulatedCKKS.decrypt` with the matching secret key.  Every
encryption adds Gaussian noise (sigma 1e-8, clipped to 1e-7) and every
homomorphic operation adds a much smaller rescaling-style noise (sigma 2**-40,
the magnitude of a 40-bit CKKS scale).  Each ciphertext tracks a sound upper
bound on its accumulated deviation from the exact plaintext result.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import KeyMismatchError, RangeError, ShapeError

ROLES = ("clients-shared", "verifier")
DEFAULT_MAX_ITERATIONS = 29


@dataclass(frozen=True)
class PublicKey:
    key_id: str
    role: str


@dataclass(frozen=True)
class SecretKey:
    key_id: str
    role: str

    def __repr__(self):
        return f"SecretKey(key_id={self.key_id!r}, role={self.role!r})"


@dataclass(frozen=True)
class KeyPair:
    public: PublicKey
    secret: SecretKey

    @property
    def key_id(self) -> str:
        return self.public.key_id

    @property
    def role(self) -> str:
        return self.public.role


class CipherVector:
    """Immutable encrypted vector.  A 1-element vector doubles as a scalar."""

    __slots__ = ("key_id", "__payload", "op_depth", "noise_bound")

    def __init__(self, key_id: str, payload: np.ndarray, op_depth: int, noise_bound: float):
        self.key_id = key_id
        self.__payload = payload
        self.op_depth = op_depth
        self.noise_bound = noise_bound

    @property
    def dim(self) -> int:
        return self.__payload.shape[0]

    @property
    def is_scalar(self) -> bool:
        return self.dim == 1

    def __repr__(self):
        return (f"CipherVector(key_id={self.key_id!r}, dim={self.dim}, "
                f"op_depth={self.op_depth}, noise_bound={self.noise_bound:.3g})")

    def __reduce__(self):
        raise TypeError("ciphertexts are not serialisable")


CipherScalar = CipherVector


def _payload(c: CipherVector) -> np.ndarray:
    return c._CipherVector__payload  # module-private accessor for the backend


@dataclass(frozen=True)
class DecryptRecord:
    key_id: str
    role: str
    party: str


class SimulatedCKKS:
    """Backend holding the noise RNG, key registry and decryption audit log."""

    def __init__(self, seed: int = 0, enc_sigma: float = 1e-8, enc_clip: float = 1e-7,
                 op_sigma: float = 2.0 ** -40, op_clip_sigmas: float = 6.0):
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4E5]))
        self.enc_sigma = enc_sigma
        self.enc_clip = enc_clip
        self.op_sigma = op_sigma
        self.op_clip = op_clip_sigmas * op_sigma
        self._ids = itertools.count()
        self._seed = seed
        self.decrypt_log: list[DecryptRecord] = []

    # keys -------------------------------------------------------------

    def keygen(self, role: str = "clients-shared") -> KeyPair:
        if role not in ROLES:
            raise ValueError(f"unknown key role {role!r}")
        token = self._rng.integers(0, 2 ** 63, dtype=np.int64)
        key_id = f"k{self._seed}-{next(self._ids)}-{int(token):016x}"
        return KeyPair(PublicKey(key_id, role), SecretKey(key_id, role))

    # encryption -------------------------------------------------------

    def _noise(self, n: int, sigma: float, clip: float) -> np.ndarray:
        if sigma == 0:
            return np.zeros(n)
        return np.clip(self._rng.normal(0.0, sigma, n), -clip, clip)

    def encrypt(self, pk: PublicKey | KeyPair, v) -> CipherVector:
        if isinstance(pk, KeyPair):
            pk = pk.public
        if isinstance(pk, SecretKey):
            raise TypeError("encrypt takes a public key")
        v = np.atleast_1d(np.asarray(v, dtype=np.float64)).ravel()
        if not np.all(np.isfinite(v)):
            raise ValueError("cannot encrypt non-finite values")
        payload = v + self._noise(v.size, self.enc_sigma, self.enc_clip)
        return CipherVector(pk.key_id, payload, 0, self.enc_clip if self.enc_sigma else 0.0)

    def decrypt(self, sk: SecretKey | KeyPair, c: CipherVector, party: str = "unknown") -> np.ndarray:
        if isinstance(sk, KeyPair):
            sk = sk.secret
        if not isinstance(sk, SecretKey):
            raise TypeError("decrypt takes a secret key")
        if sk.key_id != c.key_id:
            raise KeyMismatchError(f"ciphertext under {c.key_id} cannot be opened with {sk.key_id}")
        self.decrypt_log.append(DecryptRecord(sk.key_id, sk.role, party))
        return _payload(c).copy()

    # homomorphic operations ----------------------------------------------

    def _same_key(self, *cs: CipherVector) -> str:
        keys = {c.key_id for c in cs}
        if len(keys) != 1:
            raise KeyMismatchError(f"operands under different keys: {sorted(keys)}")
        return keys.pop()

    def _finish(self, key_id: str, value: np.ndarray, depth: int, bound: float) -> CipherVector:
        value = value + self._noise(value.size, self.op_sigma, self.op_clip)
        return CipherVector(key_id, value, depth, bound + self.op_clip)

    @staticmethod
    def _broadcast_dims(a: CipherVector, b_dim: int) -> None:
        if a.dim != b_dim and a.dim != 1 and b_dim != 1:
            raise ShapeError(f"dimension mismatch {a.dim} vs {b_dim}")

    def add(self, a: CipherVector, b: CipherVector) -> CipherVector:
        key = self._same_key(a, b)
        if a.dim != b.dim:
            raise ShapeError(f"dimension mismatch {a.dim} vs {b.dim}")
        return self._finish(key, _payload(a) + _payload(b), max(a.op_depth, b.op_depth),
                            a.noise_bound + b.noise_bound)

    def sub(self, a: CipherVector, b: CipherVector) -> CipherVector:
        key = self._same_key(a, b)
        if a.dim != b.dim:
            raise ShapeError(f"dimension mismatch {a.dim} vs {b.dim}")
        return self._finish(key, _payload(a) - _payload(b), max(a.op_depth, b.op_depth),
                            a.noise_bound + b.noise_bound)

    def add_plain(self, a: CipherVector, v) -> CipherVector:
        v = np.atleast_1d(np.asarray(v, dtype=np.float64))
        self._broadcast_dims(a, v.size)
        return self._finish(a.key_id, _payload(a) + v, a.op_depth, a.noise_bound)

    def scalar_mul(self, a: CipherVector, s: float) -> CipherVector:
        s = float(s)
        return self._finish(a.key_id, _payload(a) * s, a.op_depth + 1, abs(s) * a.noise_bound)

    def hadamard(self, a: CipherVector, v) -> CipherVector:
        """Element-wise product with a plaintext vector."""
        v = np.asarray(v, dtype=np.float64).ravel()
        if v.size != a.dim:
            raise ShapeError(f"dimension mismatch {a.dim} vs {v.size}")
        return self._finish(a.key_id, _payload(a) * v, a.op_depth + 1,
                            float(np.max(np.abs(v))) * a.noise_bound)

    def mult(self, a: CipherVector, b: CipherVector) -> CipherVector:
        """Element-wise ciphertext product; a 1-element operand broadcasts."""
        key = self._same_key(a, b)
        self._broadcast_dims(a, b.dim)
        pa, pb = _payload(a), _payload(b)
        bound = (float(np.max(np.abs(pa))) * b.noise_bound + float(np.max(np.abs(pb))) * a.noise_bound
                 + a.noise_bound * b.noise_bound)
        return self._finish(key, pa * pb, max(a.op_depth, b.op_depth) + 1, bound)

    def inner(self, a: CipherVector, b: CipherVector) -> CipherVector:
        key = self._same_key(a, b)
        if a.dim != b.dim:
            raise ShapeError(f"dimension mismatch {a.dim} vs {b.dim}")
        pa, pb = _payload(a), _payload(b)
        bound = (float(np.sum(np.abs(pa))) * b.noise_bound + float(np.sum(np.abs(pb))) * a.noise_bound
                 + a.dim * a.noise_bound * b.noise_bound)
        return self._finish(key, np.array([pa @ pb]), max(a.op_depth, b.op_depth) + 1, bound)

    def sum(self, cs: Sequence[CipherVector]) -> CipherVector:
        if not cs:
            raise ValueError("sum of no ciphertexts")
        acc = cs[0]
        for c in cs[1:]:
            acc = self.add(acc, c)
        return acc


def shift_unit_interval(he: SimulatedCKKS, c: CipherVector) -> CipherVector:
    """Map a value in [-1, 1] to (s + 1) / 2 in [0, 1]; order is preserved."""
    return he.scalar_mul(he.add_plain(c, 1.0), 0.5)


def cipher_max(he: SimulatedCKKS, a: CipherScalar, b: CipherScalar,
               d: int = DEFAULT_MAX_ITERATIONS) -> CipherScalar:
    """Encrypted max(a, b) for plaintexts in (0, 1).

    max = (a+b)/2 + |a-b|/2, where |a-b|/2 = sqrt(((a-b)/2)^2) is computed by
    ``d`` steps of the division-free square-root iteration
    a' = a(1 - b/2), b' = b^2 (b - 3) / 4 started from (x, x - 1).
    """
    if d < 1:
        raise ValueError("iteration count d must be >= 1")
    q1 = he.scalar_mul(he.add(a, b), 0.5)
    q2 = he.scalar_mul(he.sub(a, b), 0.5)
    an = he.mult(q2, q2)
    bn = he.add_plain(an, -1.0)
    for _ in range(d):
        an_next = he.mult(an, he.add_plain(he.scalar_mul(bn, -0.5), 1.0))
        bn = he.scalar_mul(he.mult(he.mult(bn, bn), he.add_plain(bn, -3.0)), 0.25)
        an = an_next
    return he.add(q1, an)


def plain_max_iteration(a: float, b: float, d: int = DEFAULT_MAX_ITERATIONS) -> float:
    """The same polynomial as :func:`cipher_max` evaluated on plaintext floats."""
    q1, q2 = (a + b) / 2, (a - b) / 2
    an = q2 * q2
    bn = an - 1.0
    for _ in range(d):
        an, bn = an * (1 - bn / 2), bn * bn * (bn - 3) / 4
    return q1 + an


def check_unit_interval(*values: float) -> None:
    for v in values:
        if not 0.0 < v < 1.0:
            raise RangeError(f"cipher_max input {v} outside (0, 1)")
