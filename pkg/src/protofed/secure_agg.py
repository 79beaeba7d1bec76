"""Two-server Byzantine-robust secure aggregation of encrypted prototypes.

The Aggregator only ever holds public keys and operates on ciphertexts; the
Verifier holds the verifier secret key and only sees masked values.  Every
message crossing between parties is appended to a :class:`Transcript`.

Round flow for one class k (surviving clients S):

1. normalization check   A -> V  Enc(<c, c>)        V -> A  surviving set
2. trusted prototype     C' = mean_S Enc(c);  A -> V  Enc(<C', C'>),  V -> A  ||C'||^2
3. credibility           sim = <c, C'> / ||C'||  (encrypted)
4. masked comparison     h = max((sim+1)/2, (chi+1)/2);  A -> V  Enc(p*h), Enc(V*c)
5. weights               V: j = 0 where Round(p*h, 6) is the class minimum, else p*h;
                         V -> A  Enc_x(j), Enc_x(V*c), Sum
6. aggregate             A: C = (1/Sum) * sum_m Enc_x(j) * (Enc_x(V*c) / V)

With chi = -1 step 4 sends p*1 for every client and step 5 zeroes nothing, so
the result is the plain mean of the surviving prototypes.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping

import numpy as np

from .errors import DegenerateVectorError, ProtocolAbort, ProtocolError
from .he import CipherVector, PublicKey, SecretKey, SimulatedCKKS, cipher_max, shift_unit_interval

log = logging.getLogger(__name__)

AGGREGATOR = "aggregator"
VERIFIER = "verifier"

POLICIES = ("literal", "only_if_below_threshold")
# chi = -1 switches filtering off: normalization check plus a plain average
AVERAGE = "average"
NORM_TOLERANCE = 1e-5
MASK_LOW, MASK_HIGH = 0.5, 2.0

# what the Verifier is allowed to receive, grouped by payload category
VERIFIER_INBOUND = {
    "norm_check_inner": "inner_product",
    "trusted_norm_inner": "inner_product",
    "masked_weight": "masked_h",
    "masked_prototype": "masked_vector",
}
# plaintext values the Aggregator may learn
AGGREGATOR_PLAINTEXT = {"surviving_set", "trusted_norm_sq", "weight_sum"}

Submissions = Mapping[int, Mapping[int, CipherVector]]


def client_party(m: int) -> str:
    return f"client:{m}"


def round6(x: float) -> Decimal:
    """Round to the 6th decimal place, half away from zero, via the decimal string."""
    return Decimal(repr(float(x))).quantize(Decimal("0.000001"), rounding=ROUND_HALF_UP)


# --------------------------------------------------------------------------
# transcript


@dataclass(frozen=True)
class Message:
    round: int
    sender: str
    receiver: str
    kind: str
    payload_type: str  # "ciphertext" or "plaintext"
    class_id: int | None = None
    client: int | None = None
    key_id: str | None = None
    dim: int | None = None
    value: object = None  # plaintext payloads only

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Transcript:
    messages: list[Message] = field(default_factory=list)

    def send(self, round, sender, receiver, kind, payload, class_id=None, client=None):
        if isinstance(payload, CipherVector):
            msg = Message(round, sender, receiver, kind, "ciphertext", class_id, client,
                          payload.key_id, payload.dim)
        else:
            msg = Message(round, sender, receiver, kind, "plaintext", class_id, client, value=payload)
        self.messages.append(msg)
        return payload

    def received_by(self, party: str) -> list[Message]:
        return [m for m in self.messages if m.receiver == party]

    def for_round(self, t: int) -> list[Message]:
        return [m for m in self.messages if m.round == t]

    def to_jsonl(self) -> str:
        return "".join(m.to_json() + "\n" for m in self.messages)

    @staticmethod
    def from_jsonl(text: str) -> "Transcript":
        return Transcript([Message(**json.loads(line)) for line in text.splitlines() if line.strip()])


# --------------------------------------------------------------------------
# parties


@dataclass
class AggregatorState:
    he: SimulatedCKKS
    verifier_pk: PublicKey
    clients_pk: PublicKey
    rng: np.random.Generator  # masks only
    received: dict[int, dict[int, CipherVector]] = field(default_factory=dict)
    active_set: set[int] = field(default_factory=set)
    p_masks: dict[int, float] = field(default_factory=dict)
    v_masks: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    last_global: dict[int, CipherVector] = field(default_factory=dict)

    def draw_p(self, k: int) -> float:
        p = float(self.rng.uniform(MASK_LOW, MASK_HIGH))
        if not p > 0:
            raise ProtocolError("mask p must be positive")
        self.p_masks[k] = p
        return p

    def draw_v(self, m: int, k: int, dim: int) -> np.ndarray:
        v = self.rng.uniform(MASK_LOW, MASK_HIGH, dim) * self.rng.choice([-1.0, 1.0], dim)
        if np.any(v == 0):
            raise ProtocolError("mask vector has a zero coordinate")
        self.v_masks[(m, k)] = v
        return v


@dataclass
class WeightDecision:
    round: int
    class_id: int
    client: int
    weight: float  # share j / Sum of the class total; 0 when filtered
    filtered: bool


@dataclass
class VerifierState:
    he: SimulatedCKKS
    verifier_sk: SecretKey
    clients_pk: PublicKey
    decisions: list[WeightDecision] = field(default_factory=list)

    def _open(self, c: CipherVector) -> np.ndarray:
        return self.he.decrypt(self.verifier_sk, c, party=VERIFIER)

    def check_norms(self, inners: Mapping[tuple[int, int], CipherVector], tol: float) -> set[int]:
        bad = set()
        for (m, _k), c in inners.items():
            if abs(float(self._open(c)[0]) - 1.0) > tol:
                bad.add(m)
        return bad

    def open_norm_sq(self, c: CipherVector) -> float:
        return float(self._open(c)[0])

    def weigh(self, t: int, k: int, masked_h: Mapping[int, CipherVector],
              masked_protos: Mapping[int, CipherVector], policy: str,
              sentinel: CipherVector | None = None):
        """Rounded weights from masked scores; re-encrypts under the clients' key."""
        ph = {m: float(self._open(c)[0]) for m, c in masked_h.items()}
        rounded = {m: round6(v) for m, v in ph.items()}
        if policy == AVERAGE:
            zero = set()
        elif policy == "literal":
            floor = min(rounded.values())
            zero = {m for m, r in rounded.items() if r == floor}
        else:
            # the sentinel is p * chi'; anything at or below it is under threshold
            floor = round6(float(self._open(sentinel)[0]))
            zero = {m for m, r in rounded.items() if r <= floor}
        weights = {m: (0.0 if m in zero else ph[m]) for m in ph}
        total = float(sum(weights.values()))
        enc_w = {m: self.he.encrypt(self.clients_pk, [w]) for m, w in weights.items()}
        enc_v = {m: self.he.encrypt(self.clients_pk, self._open(c)) for m, c in masked_protos.items()}
        for m in sorted(weights):
            share = weights[m] / total if total > 0 else 0.0
            self.decisions.append(WeightDecision(t, k, m, share, m in zero))
        return enc_w, enc_v, total


# --------------------------------------------------------------------------
# protocol steps


def verify_normalization(agg: AggregatorState, ver: VerifierState, submissions: Submissions,
                         t: int = 0, transcript: Transcript | None = None,
                         tol: float = NORM_TOLERANCE) -> set[int]:
    """Drop every client with any prototype whose squared norm is not 1 within ``tol``."""
    transcript = transcript if transcript is not None else Transcript()
    he = agg.he
    inners = {}
    for m in sorted(submissions):
        for k in sorted(submissions[m]):
            c = submissions[m][k]
            inners[(m, k)] = transcript.send(t, AGGREGATOR, VERIFIER, "norm_check_inner",
                                             he.inner(c, c), k, m)
    bad = ver.check_norms(inners, tol)
    surviving = set(submissions) - bad
    transcript.send(t, VERIFIER, AGGREGATOR, "surviving_set", sorted(surviving))
    if bad:
        log.info("round %d: normalization check removed clients %s", t, sorted(bad))
    if not surviving:
        raise ProtocolAbort(f"round {t}: no client passed normalization verification")
    agg.active_set = surviving
    return surviving


def trusted_prototype(agg: AggregatorState, ver: VerifierState, submissions: Submissions, k: int,
                      t: int = 0, transcript: Transcript | None = None) -> tuple[CipherVector, float] | None:
    """Encrypted mean of surviving class-k prototypes and its plaintext norm.

    Returns ``None`` when no surviving client submitted class ``k``.
    """
    transcript = transcript if transcript is not None else Transcript()
    he = agg.he
    owners = [m for m in sorted(agg.active_set or submissions) if k in submissions.get(m, {})]
    if not owners:
        return None
    mean = he.scalar_mul(he.sum([submissions[m][k] for m in owners]), 1.0 / len(owners))
    sq = transcript.send(t, AGGREGATOR, VERIFIER, "trusted_norm_inner", he.inner(mean, mean), k)
    norm_sq = transcript.send(t, VERIFIER, AGGREGATOR, "trusted_norm_sq", ver.open_norm_sq(sq), k)
    return mean, float(np.sqrt(max(norm_sq, 0.0)))


def credibility(agg: AggregatorState, c: CipherVector, trusted: CipherVector, trusted_norm: float) -> CipherVector:
    """Encrypted cosine between a unit prototype and the trusted prototype."""
    if trusted_norm < 1e-12:
        raise DegenerateVectorError("trusted prototype has (near) zero norm")
    return agg.he.scalar_mul(agg.he.inner(c, trusted), 1.0 / trusted_norm)


@dataclass
class WeightExchange:
    class_id: int
    enc_weights: dict[int, CipherVector]
    enc_masked: dict[int, CipherVector]
    total: float


def masked_weight_exchange(agg: AggregatorState, ver: VerifierState, k: int,
                           sims: Mapping[int, CipherVector], submissions: Submissions, chi: float,
                           d: int = 29, policy: str = "literal", t: int = 0,
                           transcript: Transcript | None = None) -> WeightExchange:
    if not -1.0 <= chi < 1.0:
        raise ValueError("chi must lie in [-1, 1)")
    if policy not in POLICIES:
        raise ValueError(f"unknown zero_min_policy {policy!r}")
    transcript = transcript if transcript is not None else Transcript()
    he = agg.he
    averaging = chi <= -1.0
    chi_enc = he.encrypt(agg.verifier_pk, [(chi + 1.0) / 2.0])
    p = agg.draw_p(k)
    masked_h, masked_v = {}, {}
    for m in sorted(sims):
        if averaging:
            h = he.encrypt(agg.verifier_pk, [1.0])
        else:
            h = cipher_max(he, shift_unit_interval(he, sims[m]), chi_enc, d)
        masked_h[m] = transcript.send(t, AGGREGATOR, VERIFIER, "masked_weight", he.scalar_mul(h, p), k, m)
        c = submissions[m][k]
        v = agg.draw_v(m, k, c.dim)
        masked_v[m] = transcript.send(t, AGGREGATOR, VERIFIER, "masked_prototype", he.hadamard(c, v), k, m)
    sentinel = None
    if averaging:
        policy = AVERAGE
    elif policy == "only_if_below_threshold":
        sentinel = transcript.send(t, AGGREGATOR, VERIFIER, "masked_weight", he.scalar_mul(chi_enc, p), k)
    enc_w, enc_v, total = ver.weigh(t, k, masked_h, masked_v, policy, sentinel)
    for m in sorted(enc_w):
        transcript.send(t, VERIFIER, AGGREGATOR, "enc_weight", enc_w[m], k, m)
        transcript.send(t, VERIFIER, AGGREGATOR, "enc_masked_prototype", enc_v[m], k, m)
    transcript.send(t, VERIFIER, AGGREGATOR, "weight_sum", total, k)
    return WeightExchange(k, enc_w, enc_v, total)


def aggregate(agg: AggregatorState, exchange: WeightExchange) -> CipherVector | None:
    """Unmask and form the weighted mean under the clients' key; ``None`` if Sum is 0."""
    he, k = agg.he, exchange.class_id
    if exchange.total <= 0:
        log.warning("class %d: every submission filtered; keeping previous global prototype", k)
        return None
    terms = []
    for m, masked in sorted(exchange.enc_masked.items()):
        if m not in exchange.enc_weights:
            raise ProtocolError(f"no weight for client {m}, class {k}")
        unmasked = he.hadamard(masked, 1.0 / agg.v_masks[(m, k)])
        terms.append(he.mult(exchange.enc_weights[m], unmasked))
    return he.scalar_mul(he.sum(terms), 1.0 / exchange.total)


@dataclass
class RoundResult:
    round: int
    surviving: set[int]
    global_enc: dict[int, CipherVector]  # under the clients' key; includes retained classes
    aggregated: set[int]
    sums: dict[int, float]
    trusted_norms: dict[int, float]


def secure_aggregate(agg: AggregatorState, ver: VerifierState, submissions: Submissions, t: int,
                     chi: float = 0.0, d: int = 29, policy: str = "literal",
                     transcript: Transcript | None = None, tol: float = NORM_TOLERANCE) -> RoundResult:
    """Run the whole two-server protocol for one round."""
    transcript = transcript if transcript is not None else Transcript()
    agg.received = {m: dict(v) for m, v in submissions.items()}
    agg.p_masks.clear()
    agg.v_masks.clear()
    surviving = verify_normalization(agg, ver, submissions, t, transcript, tol)
    classes = sorted({k for m in surviving for k in submissions[m]})
    sums, norms, aggregated = {}, {}, set()
    for k in classes:
        trusted = trusted_prototype(agg, ver, submissions, k, t, transcript)
        if trusted is None:
            continue
        mean, norm = trusted
        norms[k] = norm
        try:
            sims = {m: credibility(agg, submissions[m][k], mean, norm)
                    for m in sorted(surviving) if k in submissions[m]}
        except DegenerateVectorError:
            log.warning("round %d class %d: degenerate trusted prototype, class skipped", t, k)
            continue
        exchange = masked_weight_exchange(agg, ver, k, sims, submissions, chi, d, policy, t, transcript)
        sums[k] = exchange.total
        out = aggregate(agg, exchange)
        if out is not None:
            agg.last_global[k] = out
            aggregated.add(k)
    return RoundResult(t, surviving, dict(agg.last_global), aggregated, sums, norms)


# --------------------------------------------------------------------------
# plaintext counterparts


def reference_aggregate(submissions: Mapping[int, Mapping[int, np.ndarray]], chi: float = 0.0,
                        policy: str = "literal", previous: Mapping[int, np.ndarray] | None = None,
                        tol: float = NORM_TOLERANCE) -> tuple[dict[int, np.ndarray], set[int], dict]:
    """Plaintext version of the protocol's arithmetic, with an exact max.

    Returns (global prototypes, surviving clients, {(client, class): weight share}).
    """
    surviving = {m for m, protos in submissions.items()
                 if all(abs(float(v @ v) - 1.0) <= tol for v in protos.values())}
    if not surviving:
        raise ProtocolAbort("no client passed normalization verification")
    out = {int(k): np.asarray(v) for k, v in (previous or {}).items()}
    shares = {}
    chi_s = (chi + 1.0) / 2.0
    for k in sorted({k for m in surviving for k in submissions[m]}):
        owners = [m for m in sorted(surviving) if k in submissions[m]]
        vecs = np.stack([submissions[m][k] for m in owners])
        trusted = vecs.mean(axis=0)
        tn = np.linalg.norm(trusted)
        if tn < 1e-12:
            continue
        h = np.maximum((vecs @ trusted / tn + 1.0) / 2.0, chi_s)
        r = [round6(x) for x in h]
        if chi <= -1.0:
            h, zero = np.ones(len(owners)), [False] * len(owners)
        elif policy == "literal":
            zero = [x == min(r) for x in r]
        else:
            zero = [x <= round6(chi_s) for x in r]
        j = np.where(zero, 0.0, h)
        total = j.sum()
        for m, w in zip(owners, j):
            shares[(m, k)] = w / total if total > 0 else 0.0
        if total > 0:
            out[k] = (j[:, None] * vecs).sum(axis=0) / total
    return out, surviving, shares


def mean_aggregate(submissions: Mapping[int, Mapping[int, np.ndarray]]) -> dict[int, np.ndarray]:
    """Unweighted per-class average over every submitting client."""
    by_class: dict[int, list[np.ndarray]] = {}
    for m in sorted(submissions):
        for k, v in submissions[m].items():
            by_class.setdefault(int(k), []).append(np.asarray(v, dtype=np.float64))
    return {k: np.mean(vs, axis=0) for k, vs in sorted(by_class.items())}
