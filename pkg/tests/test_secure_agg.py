from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protofed import secure_agg as sa
from protofed.errors import ProtocolAbort
from protofed.he import SimulatedCKKS

from helpers import unit


class Parties:
    """A backend, both key pairs and the two servers."""

    def __init__(self, seed=0, mask_seed=0):
        self.he = SimulatedCKKS(seed)
        self.vk = self.he.keygen("verifier")
        self.ck = self.he.keygen("clients-shared")
        self.agg = sa.AggregatorState(self.he, self.vk.public, self.ck.public, np.random.default_rng(mask_seed))
        self.ver = sa.VerifierState(self.he, self.vk.secret, self.ck.public)

    def encrypt_subs(self, subs):
        return {m: {k: self.he.encrypt(self.vk.public, v) for k, v in protos.items()} for m, protos in subs.items()}

    def open_v(self, c):
        return self.he.decrypt(self.vk, c, party="verifier")

    def open_x(self, c):
        return self.he.decrypt(self.ck, c, party="client:0")


def random_subs(rng, n_clients, classes, dim=8):
    return {m: {k: unit(rng, dim) for k in classes if rng.random() < 0.8 or m == 0}
            for m in range(n_clients)}


def test_round6_half_up():
    assert sa.round6(0.1234565) == Decimal("0.123457")
    assert sa.round6(0.1234564) == Decimal("0.123456")
    assert sa.round6(1.0) == Decimal("1.000000")


def test_all_unit_survive():
    P = Parties()
    rng = np.random.default_rng(0)
    subs = P.encrypt_subs({m: {0: unit(rng, 8)} for m in range(5)})
    assert sa.verify_normalization(P.agg, P.ver, subs) == set(range(5))


def test_amplified_client_removed():
    P = Parties()
    rng = np.random.default_rng(0)
    plain = {m: {0: unit(rng, 8), 1: unit(rng, 8)} for m in range(4)}
    plain[2][1] = 5 * plain[2][1]
    tr = sa.Transcript()
    assert sa.verify_normalization(P.agg, P.ver, P.encrypt_subs(plain), 1, tr) == {0, 1, 3}
    assert tr.messages[-1].kind == "surviving_set" and tr.messages[-1].value == [0, 1, 3]


def test_noisy_unit_vectors_survive():
    P = Parties()
    rng = np.random.default_rng(4)
    plain = {m: {0: unit(rng, 16) + rng.normal(0, 1e-7, 16)} for m in range(20)}
    assert sa.verify_normalization(P.agg, P.ver, P.encrypt_subs(plain)) == set(range(20))


def test_no_survivor_aborts():
    P = Parties()
    with pytest.raises(ProtocolAbort):
        sa.verify_normalization(P.agg, P.ver, P.encrypt_subs({0: {0: np.full(4, 2.0)}}))


def test_trusted_single_client():
    P = Parties()
    u = unit(np.random.default_rng(1), 8)
    subs = P.encrypt_subs({0: {3: u}})
    P.agg.active_set = {0}
    mean, norm = sa.trusted_prototype(P.agg, P.ver, subs, 3)
    assert np.allclose(P.open_v(mean), u, atol=1e-6)
    assert norm == pytest.approx(1.0, abs=1e-6)


def test_trusted_two_orthogonal():
    P = Parties()
    subs = P.encrypt_subs({0: {0: np.array([1.0, 0.0])}, 1: {0: np.array([0.0, 1.0])}})
    P.agg.active_set = {0, 1}
    mean, norm = sa.trusted_prototype(P.agg, P.ver, subs, 0)
    assert np.allclose(P.open_v(mean), [0.5, 0.5], atol=1e-6)
    assert norm == pytest.approx(np.sqrt(0.5), abs=1e-6)


def test_trusted_twenty_clients_and_missing_class():
    P = Parties()
    rng = np.random.default_rng(9)
    plain = {m: {0: unit(rng, 16)} for m in range(20)}
    subs = P.encrypt_subs(plain)
    P.agg.active_set = set(range(20))
    mean, _ = sa.trusted_prototype(P.agg, P.ver, subs, 0)
    oracle = np.mean([plain[m][0] for m in range(20)], axis=0)
    assert np.max(np.abs(P.open_v(mean) - oracle)) <= mean.noise_bound
    assert sa.trusted_prototype(P.agg, P.ver, subs, 7) is None


def test_trusted_ignores_removed_clients():
    P = Parties()
    subs = P.encrypt_subs({0: {0: np.array([1.0, 0.0])}, 1: {0: np.array([0.0, 1.0])}})
    P.agg.active_set = {1}
    mean, _ = sa.trusted_prototype(P.agg, P.ver, subs, 0)
    assert np.allclose(P.open_v(mean), [0.0, 1.0], atol=1e-6)


def test_credibility_cases():
    P = Parties()
    rng = np.random.default_rng(21)
    t = np.array([3.0, 4.0])
    ct = P.he.encrypt(P.vk.public, t)
    par = sa.credibility(P.agg, P.he.encrypt(P.vk.public, [0.6, 0.8]), ct, 5.0)
    orth = sa.credibility(P.agg, P.he.encrypt(P.vk.public, [0.8, -0.6]), ct, 5.0)
    assert P.open_v(par)[0] == pytest.approx(1.0, abs=1e-6)
    assert P.open_v(orth)[0] == pytest.approx(0.0, abs=1e-6)
    c, trusted = unit(rng, 16), rng.normal(size=16)
    got = P.open_v(sa.credibility(P.agg, P.he.encrypt(P.vk.public, c), P.he.encrypt(P.vk.public, trusted),
                                  float(np.linalg.norm(trusted))))[0]
    assert got == pytest.approx(c @ trusted / np.linalg.norm(trusted), abs=1e-5)


def exchange(P, sims, chi=0.0, policy="literal", dim=4, k=0):
    rng = np.random.default_rng(1)
    enc_sims = {m: P.he.encrypt(P.vk.public, [s]) for m, s in sims.items()}
    subs = P.encrypt_subs({m: {k: unit(rng, dim)} for m in sims})
    n0 = len(P.ver.decisions)
    ex = sa.masked_weight_exchange(P.agg, P.ver, k, enc_sims, subs, chi, 29, policy)
    return ex, {d.client: d for d in P.ver.decisions[n0:]}


def test_weights_below_threshold_example():
    P = Parties()
    ex, dec = exchange(P, {0: 0.9, 1: 0.8, 2: -0.5})
    p = P.agg.p_masks[0]
    weights = {m: P.open_x(c)[0] for m, c in ex.enc_weights.items()}
    assert weights[0] == pytest.approx(p * 0.95, abs=1e-5)
    assert weights[1] == pytest.approx(p * 0.90, abs=1e-5)
    # exactly zero at the Verifier; the returned ciphertext carries fresh encryption noise
    assert dec[2].weight == 0.0
    assert abs(weights[2]) <= P.he.enc_clip
    assert ex.total == pytest.approx(p * 1.85, abs=1e-5)
    assert [dec[m].filtered for m in range(3)] == [False, False, True]
    assert dec[0].weight == pytest.approx(0.95 / 1.85, abs=1e-5)


def test_all_equal_literal_zeroes_everyone():
    P = Parties()
    ex, dec = exchange(P, {0: 0.7, 1: 0.7, 2: 0.7})
    assert ex.total == 0.0
    assert all(d.filtered for d in dec.values())
    assert sa.aggregate(P.agg, ex) is None


def test_all_above_threshold_literal_drops_lowest_only():
    P = Parties()
    ex, dec = exchange(P, {0: 0.9, 1: 0.5, 2: 0.7, 3: 0.95})
    assert {m for m, d in dec.items() if d.filtered} == {1}


def test_threshold_policy_keeps_all_above():
    P = Parties()
    ex, dec = exchange(P, {0: 0.9, 1: 0.5, 2: 0.7}, policy="only_if_below_threshold")
    assert not any(d.filtered for d in dec.values())
    ex, dec = exchange(P, {0: 0.9, 1: -0.5, 2: 0.1, 3: -0.2}, policy="only_if_below_threshold", k=1)
    assert {m for m, d in dec.items() if d.filtered} == {1, 3}


def test_exchange_argument_checks():
    P = Parties()
    with pytest.raises(ValueError):
        exchange(P, {0: 0.5}, chi=1.0)
    with pytest.raises(ValueError):
        exchange(P, {0: 0.5}, policy="median")


def weighted_exchange(P, weights, vectors, k=0):
    """An exchange with chosen plaintext weights, masked the way the Verifier returns them."""
    enc_w, enc_v = {}, {}
    for m, (w, v) in enumerate(zip(weights, vectors)):
        mask = P.agg.draw_v(m, k, len(v))
        enc_w[m] = P.he.encrypt(P.ck.public, [w])
        enc_v[m] = P.he.encrypt(P.ck.public, mask * np.asarray(v))
    return sa.WeightExchange(k, enc_w, enc_v, float(sum(weights)))


def test_aggregate_single_client():
    P = Parties()
    u = unit(np.random.default_rng(0), 6)
    out = sa.aggregate(P.agg, weighted_exchange(P, [0.8], [u]))
    assert np.allclose(P.open_x(out), u, atol=1e-6)


def test_aggregate_weighted_mean():
    P = Parties()
    out = sa.aggregate(P.agg, weighted_exchange(P, [0.6, 0.2], [[1.0, 0.0], [0.0, 1.0]]))
    assert np.allclose(P.open_x(out), [0.75, 0.25], atol=1e-6)


def run_protocol(plain, seed=17, mask_seed=0, chi=0.0, policy="literal", previous=None):
    P = Parties(seed, mask_seed)
    if previous:
        P.agg.last_global = {k: P.he.encrypt(P.ck.public, v) for k, v in previous.items()}
    tr = sa.Transcript()
    res = sa.secure_aggregate(P.agg, P.ver, P.encrypt_subs(plain), 1, chi, 29, policy, tr)
    return P, res, tr, {k: P.open_x(c) for k, c in res.global_enc.items()}


def test_full_round_matches_reference():
    rng = np.random.default_rng(17)
    plain = random_subs(rng, 20, range(5), 16)
    _, res, _, got = run_protocol(plain)
    ref, surviving, _ = sa.reference_aggregate(plain)
    assert res.surviving == surviving
    assert set(got) == set(ref)
    for k in ref:
        assert np.max(np.abs(got[k] - ref[k])) < 1e-4


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.sampled_from(["literal", "only_if_below_threshold"]),
       st.sampled_from([-1.0, 0.0, 0.5]))
def test_reference_equivalence_property(seed, policy, chi):
    rng = np.random.default_rng(seed)
    plain = random_subs(rng, 8, range(3), 6)
    # a couple of attackers pointing the other way so the threshold matters
    for m in (6, 7):
        plain[m] = {k: -v for k, v in plain[m].items()}
    _, _, _, got = run_protocol(plain, seed, policy=policy, chi=chi)
    ref, _, _ = sa.reference_aggregate(plain, chi, policy)
    assert set(got) == set(ref)
    for k in ref:
        assert np.max(np.abs(got[k] - ref[k])) < 1e-4


@settings(max_examples=10)
@given(st.integers(0, 10_000), st.integers(1, 10_000))
def test_mask_invariance(seed, other):
    rng = np.random.default_rng(seed)
    plain = random_subs(rng, 10, range(3), 8)
    _, _, _, a = run_protocol(plain, seed, mask_seed=seed)
    _, _, _, b = run_protocol(plain, seed, mask_seed=seed + other)
    for k in a:
        assert np.max(np.abs(a[k] - b[k])) < 1e-5


def test_zero_sum_keeps_previous_prototype():
    same = np.array([0.6, 0.8])
    previous = {0: np.array([1.0, 0.0])}
    plain = {0: {0: same}, 1: {0: same}}
    _, res, _, got = run_protocol(plain, previous=previous)
    assert res.sums[0] == 0.0 and 0 not in res.aggregated
    assert np.allclose(got[0], [1.0, 0.0], atol=1e-6)
    ref, _, _ = sa.reference_aggregate(plain, previous=previous)
    assert np.allclose(ref[0], [1.0, 0.0])


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.sampled_from([-0.2, 0.0, 0.3]))
def test_below_threshold_always_zeroed(seed, chi):
    rng = np.random.default_rng(seed)
    plain = random_subs(rng, 8, range(2), 5)
    for policy in ("literal", "only_if_below_threshold"):
        _, _, shares = sa.reference_aggregate(plain, chi, policy)
        for k in range(2):
            owners = [m for m in plain if k in plain[m]]
            vecs = np.stack([plain[m][k] for m in owners])
            trusted = vecs.mean(axis=0)
            if np.linalg.norm(trusted) < 1e-9:
                continue
            sims = vecs @ trusted / np.linalg.norm(trusted)
            for m, s in zip(owners, sims):
                if s < chi - 1e-5:
                    assert shares[(m, k)] == 0.0


@pytest.mark.parametrize("policy", ["literal", "only_if_below_threshold"])
def test_chi_minus_one_is_plain_average(policy):
    rng = np.random.default_rng(8)
    plain = random_subs(rng, 10, range(3), 8)
    plain[9] = {k: -v for k, v in plain[9].items()}
    _, res, _, got = run_protocol(plain, chi=-1.0, policy=policy)
    mean = sa.mean_aggregate(plain)
    ref, _, shares = sa.reference_aggregate(plain, -1.0, policy)
    for k in mean:
        assert np.max(np.abs(got[k] - mean[k])) < 1e-4
        assert np.allclose(ref[k], mean[k], atol=1e-12)
    assert all(w > 0 for w in shares.values())


def test_mean_deviation_example():
    subs = {m: {0: np.array([0.0, 1.0]) if m < 2 else np.array([1.0, 0.0])} for m in range(10)}
    c = sa.mean_aggregate(subs)[0]
    assert np.linalg.norm(c - [1.0, 0.0]) == pytest.approx(0.2 * np.sqrt(2), abs=1e-12)


@settings(max_examples=100)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(2, 32))
def test_mean_deviation_identity(seed, n_mal, dim):
    rng = np.random.default_rng(seed)
    u_ben, u_mal = unit(rng, dim), unit(rng, dim)
    subs = {m: {0: u_mal if m < n_mal else u_ben} for m in range(10)}
    c = sa.mean_aggregate(subs)[0]
    kappa = n_mal / 10
    dev = np.linalg.norm(c - u_ben)
    assert dev == pytest.approx(kappa * np.linalg.norm(u_mal - u_ben), abs=1e-9)
    assert dev <= 2 * kappa + 1e-12


def test_transcript_contents_and_round_trip():
    rng = np.random.default_rng(3)
    plain = random_subs(rng, 6, range(3), 8)
    P, _, tr, _ = run_protocol(plain, policy="only_if_below_threshold")
    for msg in tr.received_by(sa.VERIFIER):
        assert msg.kind in sa.VERIFIER_INBOUND
        assert msg.payload_type == "ciphertext" and msg.key_id == P.vk.key_id
    for msg in tr.received_by(sa.AGGREGATOR):
        if msg.payload_type == "plaintext":
            assert msg.kind in sa.AGGREGATOR_PLAINTEXT
        else:
            assert msg.key_id == P.ck.key_id
    assert {r.party for r in P.he.decrypt_log if r.role == "verifier"} <= {"verifier"}
    assert sa.AGGREGATOR not in {r.party for r in P.he.decrypt_log}
    again = sa.Transcript.from_jsonl(tr.to_jsonl())
    assert again.messages == tr.messages
    assert len(tr.to_jsonl().splitlines()) == len(tr.messages)
    assert tr.for_round(1) == tr.messages and tr.for_round(2) == []
