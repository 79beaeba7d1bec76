"""Federation setup, Non-IID partitioning and the round loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import datagen, nn, prototypes as pt, secure_agg as sa, threat
from .config import ExperimentConfig
from .he import KeyPair, SimulatedCKKS
from .metrics import ClassRecord, ClientRecord, FilterRecord, MetricsLog, PrototypeDump
from .prototypes import GlobalPrototypeSet, LocalDataset

log = logging.getLogger(__name__)

MODES = ("ppfpl", "plaintext_reference", "mean_no_filter")


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(e) for e in entropy]))


# stream tags, so that independent consumers never share a generator
_PARTITION, _INIT, _MALICIOUS, _POISON, _CLIENT, _MASKS, _CHECK = range(1, 8)


@dataclass
class PartitionPlan:
    class_sets: list[list[int]]
    shards: dict[tuple[int, int], np.ndarray]  # (client, class) -> indices into the pool

    def client_indices(self, m: int) -> np.ndarray:
        parts = [self.shards[(m, k)] for k in self.class_sets[m]]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def partition_noniid(labels: np.ndarray, n_clients: int, avg: float, std: float,
                     rng: np.random.Generator, n_classes: int | None = None,
                     max_retries: int = 100) -> PartitionPlan:
    """Class-space heterogeneity: client m owns round(N(avg, std)) classes (clamped to
    [1, |I|]) chosen uniformly; each class's samples are split into equal
    contiguous shards among its owners."""
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    if not 1 <= avg <= n_classes:
        raise ValueError(f"avg must lie in [1, {n_classes}]")
    for _ in range(max_retries):
        counts = np.clip(np.rint(rng.normal(avg, std, n_clients)), 1, n_classes).astype(int)
        sets = [sorted(int(k) for k in rng.choice(n_classes, size=c, replace=False)) for c in counts]
        if len({k for s in sets for k in s}) == n_classes:
            break
    else:
        log.warning("partition left some classes without an owner after %d draws", max_retries)
    shards = {}
    for k in range(n_classes):
        owners = [m for m, s in enumerate(sets) if k in s]
        if not owners:
            continue
        pool = rng.permutation(np.flatnonzero(labels == k))
        for m, part in zip(owners, np.array_split(pool, len(owners))):
            shards[(m, k)] = part
    return PartitionPlan(sets, shards)


@dataclass
class Client:
    id: int
    train: LocalDataset
    test: LocalDataset
    params: nn.ModelParams
    malicious: bool = False
    poisoned: dict[str, LocalDataset] = field(default_factory=dict)
    global_set: GlobalPrototypeSet | None = None
    keys: KeyPair | None = None  # the clients-shared pair

    def data_for_round(self, t: int, kind: str) -> LocalDataset:
        if not self.malicious or kind in ("none", "amplify"):
            return self.train
        if kind == "dynamic":
            kind = threat.dynamic_behavior(t)
        return self.poisoned[kind]


@dataclass
class Federation:
    config: ExperimentConfig
    mode: str
    clients: list[Client]
    he: SimulatedCKKS
    aggregator: sa.AggregatorState
    verifier: sa.VerifierState
    keys: dict[str, KeyPair]
    malicious: set[int]
    plan: PartitionPlan
    metrics: MetricsLog = field(default_factory=MetricsLog)
    check_reference: bool = False
    check_masks: bool = False
    round: int = 0

    @property
    def n_classes(self) -> int:
        return self.config.dataset.n_classes


def load_pool(cfg: ExperimentConfig) -> LocalDataset:
    ds = cfg.dataset
    if ds.kind == "blobs":
        return datagen.gen_blobs(datagen.BlobSpec(ds.n_classes, ds.dim, ds.samples_per_class,
                                                  ds.radius, ds.sigma, cfg.seed))
    return datagen.load_idx(ds.images, ds.labels, ds.max_n)


def _split(idx: np.ndarray, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    n_test = int(np.floor(fraction * idx.size))
    return idx[: idx.size - n_test], idx[idx.size - n_test:]


def setup(cfg: ExperimentConfig, mode: str = "ppfpl", check_reference: bool = False,
          check_masks: bool = False) -> Federation:
    cfg.validate()
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    pool = load_pool(cfg)
    n_classes = cfg.dataset.n_classes
    plan = partition_noniid(pool.labels, cfg.n_clients, cfg.avg, cfg.std,
                            _rng(cfg.seed, _PARTITION), n_classes)
    w_init = nn.init_params(pool.features.shape[1], [cfg.hidden], cfg.proto_dim, n_classes,
                            _rng(cfg.seed, _INIT))
    malicious = (threat.select_malicious(range(cfg.n_clients), cfg.attack.fraction, _rng(cfg.seed, _MALICIOUS))
                 if cfg.attack.kind != "none" else set())

    he = SimulatedCKKS(cfg.he_seed)
    keys = {"clients": he.keygen("clients-shared"), "verifier": he.keygen("verifier")}

    clients = []
    for m in range(cfg.n_clients):
        train_idx, test_idx = [], []
        for k in plan.class_sets[m]:
            tr, te = _split(plan.shards.get((m, k), np.empty(0, dtype=np.int64)), cfg.test_fraction)
            train_idx.append(tr)
            test_idx.append(te)
        train = pool.subset(np.concatenate(train_idx)) if train_idx else pool.subset([])
        test = pool.subset(np.concatenate(test_idx)) if test_idx else pool.subset([])
        client = Client(m, train, test, w_init, m in malicious, keys=keys["clients"])
        if client.malicious:
            prng = _rng(cfg.seed, _POISON, m)
            if cfg.attack.kind in ("feature", "dynamic"):
                client.poisoned["feature"] = threat.poison_features(train, prng)
            if cfg.attack.kind in ("label", "dynamic"):
                client.poisoned["label"] = threat.poison_labels(train, range(n_classes), prng)
        clients.append(client)

    agg = sa.AggregatorState(he, keys["verifier"].public, keys["clients"].public, _rng(cfg.seed, _MASKS))
    ver = sa.VerifierState(he, keys["verifier"].secret, keys["clients"].public)
    return Federation(cfg, mode, clients, he, agg, ver, keys, malicious, plan,
                      check_reference=check_reference, check_masks=check_masks)


def _accuracy(params: nn.ModelParams, data: LocalDataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(nn.predict(params, data.features) == data.labels))


def _local_step(fed: Federation, client: Client, t: int):
    cfg = fed.config
    data = client.data_for_round(t, cfg.attack.kind)
    gs = client.global_set
    lam = cfg.lam if gs else 0.0
    client.params = pt.local_train(client.params, data, gs, cfg.eta, lam, cfg.local_iters,
                                   cfg.batch_size, _rng(cfg.seed, _CLIENT, client.id, t), fed.n_classes)
    loss = pt.total_loss(client.params, data, gs, lam, fed.n_classes) if len(data) else float("nan")
    if fed.mode == "mean_no_filter":
        protos = pt.compute_prototypes(client.params, data, round=t, owner=client.id)
    else:
        protos = pt.submit_prototypes(client.params, data, t, client.id)
    if client.malicious and cfg.attack.kind == "amplify":
        protos = threat.amplify_prototypes(protos, cfg.attack.amplify_factor)
    fed.metrics.records.append(ClientRecord(t, client.id, client.malicious,
                                            _accuracy(client.params, client.test), loss))
    for p in protos:
        fed.metrics.prototypes.append(PrototypeDump(t, client.id, p.class_id, client.malicious, p.vector))
    return {p.class_id: p.vector for p in protos}


def _mask_check(fed: Federation, enc_subs, t: int, previous) -> dict[int, np.ndarray]:
    """Re-run the protocol on the same ciphertexts with fresh masks, on a throwaway backend."""
    cfg = fed.config
    he = SimulatedCKKS(cfg.he_seed + 7919 * t)
    agg = sa.AggregatorState(he, fed.aggregator.verifier_pk, fed.aggregator.clients_pk,
                             _rng(cfg.seed, _CHECK, t), last_global=dict(previous))
    ver = sa.VerifierState(he, fed.verifier.verifier_sk, fed.verifier.clients_pk)
    res = sa.secure_aggregate(agg, ver, enc_subs, t, cfg.chi, cfg.d, cfg.zero_min_policy,
                              sa.Transcript(), cfg.norm_tolerance)
    sk = fed.keys["clients"].secret
    return {k: he.decrypt(sk, res.global_enc[k], party="audit") for k in res.aggregated}


def _secure_step(fed: Federation, subs: dict[int, dict[int, np.ndarray]], t: int) -> dict[int, np.ndarray]:
    cfg, he, tr = fed.config, fed.he, fed.metrics.transcript
    pk_v = fed.keys["verifier"].public
    enc = {}
    for m in sorted(subs):
        enc[m] = {}
        for k in sorted(subs[m]):
            enc[m][k] = tr.send(t, sa.client_party(m), sa.AGGREGATOR, "submission",
                                he.encrypt(pk_v, subs[m][k]), k, m)
    previous_enc = dict(fed.aggregator.last_global)
    n_decisions = len(fed.verifier.decisions)
    res = sa.secure_aggregate(fed.aggregator, fed.verifier, enc, t, cfg.chi, cfg.d,
                              cfg.zero_min_policy, tr, cfg.norm_tolerance)

    views = {}
    for client in fed.clients:
        view = {}
        for k in sorted(res.global_enc):
            c = tr.send(t, sa.AGGREGATOR, sa.client_party(client.id), "global_prototype",
                        res.global_enc[k], k, client.id)
            view[k] = he.decrypt(client.keys.secret, c, party=sa.client_party(client.id))
        views[client.id] = view

    decisions = fed.verifier.decisions[n_decisions:]
    for dcs in decisions:
        fed.metrics.filters.append(FilterRecord(t, dcs.class_id, dcs.client, dcs.weight, dcs.filtered))
    for k in sorted(res.sums):
        filtered = tuple(dcs.client for dcs in decisions if dcs.class_id == k and dcs.filtered)
        fed.metrics.classes.append(ClassRecord(t, k, filtered, res.sums[k], res.trusted_norms[k]))
    fed.metrics.removed[t] = sorted(set(subs) - res.surviving)

    plain = views[fed.clients[0].id] if fed.clients else {}
    prev_plain = dict(fed.clients[0].global_set.by_class) if fed.clients and fed.clients[0].global_set else {}
    if fed.check_reference:
        ref, _, _ = sa.reference_aggregate(subs, cfg.chi, cfg.zero_min_policy, prev_plain, cfg.norm_tolerance)
        fed.metrics.reference_gap[t] = max(
            (float(np.max(np.abs(plain[k] - ref[k]))) for k in plain if k in ref), default=0.0)
    if fed.check_masks:
        again = _mask_check(fed, enc, t, previous_enc)
        fed.metrics.mask_gap[t] = max(
            (float(np.max(np.abs(plain[k] - again[k]))) for k in again), default=0.0)
    return views


def _plain_step(fed: Federation, subs: dict[int, dict[int, np.ndarray]], t: int) -> dict[int, np.ndarray]:
    cfg = fed.config
    previous = dict(fed.clients[0].global_set.by_class) if fed.clients[0].global_set else {}
    if fed.mode == "plaintext_reference":
        out, surviving, shares = sa.reference_aggregate(subs, cfg.chi, cfg.zero_min_policy,
                                                        previous, cfg.norm_tolerance)
        fed.metrics.removed[t] = sorted(set(subs) - surviving)
    else:
        out = {**previous, **sa.mean_aggregate(subs)}
        counts: dict[int, int] = {}
        for m in subs:
            for k in subs[m]:
                counts[k] = counts.get(k, 0) + 1
        shares = {(m, k): 1.0 / counts[k] for m in subs for k in subs[m]}
        fed.metrics.removed[t] = []
    for (m, k), w in sorted(shares.items(), key=lambda x: (x[0][1], x[0][0])):
        fed.metrics.filters.append(FilterRecord(t, k, m, w, w == 0.0))
    return {c.id: out for c in fed.clients}


def run_round(fed: Federation, t: int) -> Federation:
    """Step I (local training + submission) then Step II (aggregation + distribution)."""
    if t > fed.config.rounds:
        raise ValueError(f"round {t} beyond configured T={fed.config.rounds}")
    subs = {}
    for client in fed.clients:
        protos = _local_step(fed, client, t)
        if protos:
            subs[client.id] = protos
    try:
        views = _secure_step(fed, subs, t) if fed.mode == "ppfpl" else _plain_step(fed, subs, t)
    except sa.ProtocolAbort as exc:
        raise sa.ProtocolAbort(f"round {t}: {exc}") from exc
    for client in fed.clients:
        client.global_set = GlobalPrototypeSet(t, {k: np.asarray(v) for k, v in views[client.id].items()})
    fed.round = t
    return fed


def run_federation(cfg: ExperimentConfig, mode: str = "ppfpl", **kwargs) -> Federation:
    fed = setup(cfg, mode, **kwargs)
    for t in range(1, cfg.rounds + 1):
        run_round(fed, t)
    return fed


def run_experiment(cfg: ExperimentConfig, mode: str = "ppfpl", **kwargs) -> MetricsLog:
    return run_federation(cfg, mode, **kwargs).metrics
