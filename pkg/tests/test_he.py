import pickle

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protofed import he as he_mod
from protofed.errors import KeyMismatchError, RangeError, ShapeError
from protofed.he import CipherVector, SimulatedCKKS, cipher_max, plain_max_iteration

from helpers import unit


@pytest.fixture
def backend():
    h = SimulatedCKKS(seed=3)
    return h, h.keygen("verifier")


def test_keygen_distinct_ids():
    h = SimulatedCKKS(0)
    assert h.keygen().key_id != h.keygen().key_id
    ids = {h.keygen().key_id for _ in range(1000)}
    assert len(ids) == 1000


def test_keygen_rejects_unknown_role():
    with pytest.raises(ValueError):
        SimulatedCKKS(0).keygen("aggregator")


def test_wrong_key_decrypt_fails(backend):
    h, k = backend
    other = h.keygen("verifier")
    c = h.encrypt(k.public, [1.0])
    with pytest.raises(KeyMismatchError):
        h.decrypt(other.secret, c)


def test_public_key_cannot_decrypt(backend):
    h, k = backend
    with pytest.raises(TypeError):
        h.decrypt(k.public, h.encrypt(k.public, [1.0]))
    with pytest.raises(TypeError):
        h.encrypt(k.secret, [1.0])


def test_round_trip_within_noise(backend):
    h, k = backend
    out = h.decrypt(k, h.encrypt(k, [0.5, -0.25]))
    assert np.all(np.abs(out - [0.5, -0.25]) <= 1e-7)
    assert np.all(np.abs(h.decrypt(k, h.encrypt(k, np.zeros(8)))) <= 1e-7)


def test_chained_adds_within_budget(backend):
    h, k = backend
    rng = np.random.default_rng(0)
    vs = rng.normal(size=(6, 64))
    acc = h.encrypt(k, vs[0])
    for v in vs[1:]:
        acc = h.add(acc, h.encrypt(k, v))
    assert np.max(np.abs(h.decrypt(k, acc) - vs.sum(axis=0))) <= 6e-7
    assert acc.noise_bound <= 6e-7 + 1e-9


def test_basic_ops(backend):
    h, k = backend
    a, b = h.encrypt(k, [1.0, 2.0]), h.encrypt(k, [3.0, 4.0])
    assert np.allclose(h.decrypt(k, h.add(a, b)), [4, 6], atol=1e-6)
    assert np.allclose(h.decrypt(k, h.sub(a, b)), [-2, -2], atol=1e-6)
    assert np.allclose(h.decrypt(k, h.mult(a, b)), [3, 8], atol=1e-6)
    assert np.allclose(h.decrypt(k, h.inner(a, b)), [11], atol=1e-6)
    assert np.allclose(h.decrypt(k, h.scalar_mul(a, -2)), [-2, -4], atol=1e-6)
    assert np.allclose(h.decrypt(k, h.add_plain(a, 0.5)), [1.5, 2.5], atol=1e-6)
    assert np.allclose(h.decrypt(k, h.hadamard(a, [2.0, -1.0])), [2, -2], atol=1e-6)
    assert np.allclose(h.decrypt(k, h.sum([a, b, a])), [5, 8], atol=1e-6)


def test_scalar_broadcast_mult(backend):
    h, k = backend
    s, v = h.encrypt(k, [2.0]), h.encrypt(k, [1.0, -3.0, 0.5])
    assert np.allclose(h.decrypt(k, h.mult(s, v)), [2, -6, 1], atol=1e-6)


def test_shape_and_key_errors(backend):
    h, k = backend
    a, b = h.encrypt(k, [1.0, 2.0]), h.encrypt(k, [1.0, 2.0, 3.0])
    for op in (h.add, h.sub, h.inner, h.mult):
        with pytest.raises(ShapeError):
            op(a, b)
    with pytest.raises(ShapeError):
        h.hadamard(a, [1.0])
    other = h.encrypt(h.keygen(), [1.0, 2.0])
    for op in (h.add, h.sub, h.inner, h.mult):
        with pytest.raises(KeyMismatchError):
            op(a, other)
    with pytest.raises(ValueError):
        h.sum([])
    with pytest.raises(ValueError):
        h.encrypt(k, [np.nan])


def test_inner_of_unit_is_one(backend):
    h, k = backend
    u = unit(np.random.default_rng(1), 16)
    c = h.encrypt(k, u)
    assert abs(h.decrypt(k, h.inner(c, c))[0] - 1) < 1e-5


def test_mask_unmask_round_trip(backend):
    h, k = backend
    rng = np.random.default_rng(2)
    x = rng.normal(size=16)
    v = rng.uniform(0.5, 2, 16) * rng.choice([-1, 1], 16)
    back = h.hadamard(h.hadamard(h.encrypt(k, x), v), 1 / v)
    assert np.max(np.abs(h.decrypt(k, back) - x)) < 1e-6


vectors = st.integers(1, 12).flatmap(
    lambda n: st.tuples(*[st.lists(st.floats(-10, 10), min_size=n, max_size=n)] * 2))


@settings(max_examples=100)
@given(vectors, st.floats(-5, 5), st.integers(0, 10_000))
def test_homomorphism_and_sound_noise_bound(xy, s, seed):
    x, y = (np.array(v) for v in xy)
    h = SimulatedCKKS(seed)
    k = h.keygen()
    cx, cy = h.encrypt(k, x), h.encrypt(k, y)
    cases = [
        (h.add(cx, cy), x + y),
        (h.sub(cx, cy), x - y),
        (h.mult(cx, cy), x * y),
        (h.inner(cx, cy), np.array([x @ y])),
        (h.scalar_mul(cx, s), s * x),
        (h.add_plain(cx, y), x + y),
        (h.hadamard(cx, y), x * y),
        (h.mult(h.add(cx, cy), h.scalar_mul(cy, s)), (x + y) * (s * y)),
    ]
    for c, oracle in cases:
        err = np.max(np.abs(h.decrypt(k, c) - oracle))
        assert err <= c.noise_bound


@settings(max_examples=50)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.integers(0, 1000))
def test_cipher_max_noise_bound_sound(a, b, seed):
    h = SimulatedCKKS(seed)
    k = h.keygen()
    c = cipher_max(h, h.encrypt(k, [a]), h.encrypt(k, [b]))
    # the bound covers noise relative to the same polynomial in exact arithmetic
    assert abs(h.decrypt(k, c)[0] - plain_max_iteration(a, b)) <= c.noise_bound


def test_cipher_max_examples(backend):
    h, k = backend
    half = h.encrypt(k, [0.5])
    assert abs(h.decrypt(k, cipher_max(h, half, h.encrypt(k, [0.5])))[0] - 0.5) < 1e-6
    out = h.decrypt(k, cipher_max(h, h.encrypt(k, [0.75]), half, 29))[0]
    assert abs(out - 0.75) < 2 ** -16


def test_cipher_max_thousand_pairs():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0.01, 0.99, 1000), rng.uniform(0.01, 0.99, 1000)
    h = SimulatedCKKS(0)
    k = h.keygen()
    out = h.decrypt(k, cipher_max(h, h.encrypt(k, a), h.encrypt(k, b)))
    assert np.max(np.abs(out - np.maximum(a, b))) < 2 ** -16


@settings(max_examples=50)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_cipher_max_symmetric_and_idempotent(a, b):
    h = SimulatedCKKS(5)
    k = h.keygen()
    ca, cb = h.encrypt(k, [a]), h.encrypt(k, [b])
    ab, ba = cipher_max(h, ca, cb), cipher_max(h, cb, ca)
    assert abs(h.decrypt(k, ab)[0] - h.decrypt(k, ba)[0]) <= ab.noise_bound + ba.noise_bound
    same = cipher_max(h, ca, ca)
    assert abs(h.decrypt(k, same)[0] - h.decrypt(k, ca)[0]) <= same.noise_bound


def test_plain_iteration_converges_to_max():
    a, b = 0.75, 0.5
    errs = [abs(plain_max_iteration(a, b, d) - 0.75) for d in (1, 5, 10, 29)]
    assert errs == sorted(errs, reverse=True)
    assert errs[-1] < 1e-12


def test_cipher_max_rejects_bad_depth(backend):
    h, k = backend
    c = h.encrypt(k, [0.5])
    with pytest.raises(ValueError):
        cipher_max(h, c, c, 0)


def test_unit_interval_check():
    he_mod.check_unit_interval(0.2, 0.9)
    with pytest.raises(RangeError):
        he_mod.check_unit_interval(0.2, 1.0)


def test_shift_unit_interval(backend):
    h, k = backend
    out = h.decrypt(k, he_mod.shift_unit_interval(h, h.encrypt(k, [-1.0, 0.0, 1.0])))
    assert np.allclose(out, [0.0, 0.5, 1.0], atol=1e-7)


def test_decrypt_log_records_party(backend):
    h, k = backend
    h.decrypt(k, h.encrypt(k, [1.0]), party="verifier")
    rec = h.decrypt_log[-1]
    assert (rec.key_id, rec.role, rec.party) == (k.key_id, "verifier", "verifier")


def test_api_surface_hides_payload(backend):
    """Ciphertexts expose no plaintext through public attributes, repr or pickling."""
    h, k = backend
    c = h.encrypt(k, [0.123456789])
    public = {name for name in dir(c) if not name.startswith("_")}
    assert public == {"key_id", "op_depth", "noise_bound", "dim", "is_scalar"}
    for name in public:
        assert not isinstance(getattr(c, name), np.ndarray)
    assert "0.1234" not in repr(c)
    with pytest.raises(TypeError):
        pickle.dumps(c)
    assert not hasattr(c, "__dict__")
    backend_public = {name for name in dir(h) if not name.startswith("_")}
    assert not backend_public & {"payload", "peek", "plaintext", "raw"}
    exported = {name for name in dir(he_mod) if not name.startswith("_")}
    assert "payload" not in exported
    assert isinstance(c, CipherVector)
