"""Baselines, parameter sweeps, the transcript audit and the acceptance checks.

Each ``check_*`` function runs one self-contained experiment and returns a
:class:`CheckResult`; the CLI ``verify`` command and the acceptance tests share
them.
"""
from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import nn, secure_agg as sa
from .config import ExperimentConfig, apply_overrides
from .federation import MODES, Federation, run_federation
from .he import SimulatedCKKS, cipher_max
from .metrics import MetricsLog
from .prototypes import LocalDataset, as_global_set, loss_and_grad, normalize, total_loss

log = logging.getLogger(__name__)

# rounds averaged for "final" accuracy; a single round is too jumpy to compare modes
FINAL_WINDOW = 5
# configuration under which filter precision is measured
PRECISION_OVERRIDES = {"zero_min_policy": "only_if_below_threshold", "chi": 0.85}


def baseline_run(cfg: ExperimentConfig, mode: str = "ppfpl", **kwargs) -> MetricsLog:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return run_federation(cfg, mode, **kwargs).metrics


# --------------------------------------------------------------------------
# sweeps

SWEEP_KEYS = {"att": "attack.fraction", "avg": "avg", "std": "std", "chi": "chi", "lam": "lam"}


def sweep(cfg: ExperimentConfig, grid: Mapping[str, Sequence], modes: Sequence[str] = ("ppfpl",),
          out_dir=None) -> list[dict]:
    """Run every combination in ``grid`` and tabulate final benign accuracy.

    Grid keys are either dotted config keys or the short names in
    :data:`SWEEP_KEYS`.  When ``out_dir`` is given, rows go to sweep.csv.
    """
    keys = [SWEEP_KEYS.get(k, k) for k in grid]
    rows = []
    for values in itertools.product(*grid.values()):
        point = dict(zip(keys, values))
        run_cfg = apply_overrides(cfg, point)
        for mode in modes:
            t0 = time.perf_counter()
            metrics = baseline_run(run_cfg, mode)
            rows.append({**point, "mode": mode, "final_accuracy": metrics.final_accuracy(FINAL_WINDOW),
                         "seconds": round(time.perf_counter() - t0, 2)})
            log.info("sweep %s %s -> %.4f", point, mode, rows[-1]["final_accuracy"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "sweep.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys + ["mode", "final_accuracy", "seconds"])
            w.writeheader()
            w.writerows(rows)
    return rows


# --------------------------------------------------------------------------
# analysis helpers


def filter_precision(metrics: MetricsLog, malicious: Iterable[int], after: int = 3) -> tuple[int, int]:
    """(decisions zeroing only malicious clients, all decisions zeroing someone) after ``after``."""
    malicious = set(malicious)
    zeroed: dict[tuple[int, int], set[int]] = {}
    for f in metrics.filters:
        if f.round > after and f.filtered:
            zeroed.setdefault((f.round, f.class_id), set()).add(f.client)
    good = sum(1 for s in zeroed.values() if s <= malicious)
    return good, len(zeroed)


def loss_decrease_fraction(metrics: MetricsLog) -> tuple[int, int]:
    """(consecutive-round pairs where a client's loss went down, all pairs)."""
    down = total = 0
    for m in sorted({r.client for r in metrics.records}):
        losses = [x for x in metrics.losses(m) if np.isfinite(x)]
        for a, b in zip(losses, losses[1:]):
            total += 1
            down += b < a
    return down, total


def audit_privacy(fed: Federation) -> list[str]:
    """Mechanical check of who saw what; returns the list of violations."""
    problems = []
    verifier_key = fed.keys["verifier"].key_id
    for msg in fed.metrics.transcript.received_by(sa.VERIFIER):
        category = sa.VERIFIER_INBOUND.get(msg.kind)
        if category is None:
            problems.append(f"verifier received unexpected {msg.kind!r}")
            continue
        if msg.payload_type != "ciphertext" or msg.key_id != verifier_key:
            problems.append(f"verifier received {msg.kind!r} not encrypted under its key")
        expected_dim = fed.config.proto_dim if category == "masked_vector" else 1
        if msg.dim != expected_dim:
            problems.append(f"verifier received {msg.kind!r} of dim {msg.dim}, expected {expected_dim}")
    for msg in fed.metrics.transcript.received_by(sa.AGGREGATOR):
        if msg.payload_type == "plaintext" and msg.kind not in sa.AGGREGATOR_PLAINTEXT:
            problems.append(f"aggregator received plaintext {msg.kind!r}")
    for rec in fed.he.decrypt_log:
        if rec.party == sa.AGGREGATOR:
            problems.append("aggregator decrypted a ciphertext")
        elif rec.party == sa.VERIFIER and rec.role != "verifier":
            problems.append("verifier decrypted with a non-verifier key")
        elif rec.party.startswith("client:") and rec.role != "clients-shared":
            problems.append(f"{rec.party} decrypted with the verifier key")
        elif rec.party != sa.VERIFIER and not rec.party.startswith("client:"):
            problems.append(f"decryption by unexpected party {rec.party!r}")
    return problems


# --------------------------------------------------------------------------
# acceptance checks


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.number:2d} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(number: int, name: str, limit: float | None = None):
    def wrap(fn: Callable[..., tuple[bool, str]]):
        def run(*args, **kwargs) -> CheckResult:
            t0 = time.perf_counter()
            ok, detail = fn(*args, **kwargs)
            elapsed = time.perf_counter() - t0
            if limit is not None and elapsed >= limit:
                ok, detail = False, f"{detail}; took {elapsed:.1f}s, limit {limit:.0f}s"
            return CheckResult(number, name, ok, detail, elapsed)
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return wrap


@_timed(1, "cipher-max fidelity", limit=5.0)
def check_cipher_max(n: int = 1000, d: int = 29, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0.01, 0.99, n), rng.uniform(0.01, 0.99, n)
    he = SimulatedCKKS(seed)
    keys = he.keygen("verifier")
    out = he.decrypt(keys, cipher_max(he, he.encrypt(keys, a), he.encrypt(keys, b), d), party="verifier")
    err = float(np.max(np.abs(out - np.maximum(a, b))))
    return err < 2.0 ** -16, f"max error {err:.3g} over {n} pairs (bound {2.0 ** -16:.3g})"


@_timed(2, "protocol oracle equivalence", limit=60.0)
def check_oracle_equivalence(seeds: Sequence[int] = range(10), rounds: int = 5,
                             n_clients: int = 20) -> tuple[bool, str]:
    ref_gap = mask_gap = 0.0
    for s in seeds:
        cfg = apply_overrides(ExperimentConfig(), {"seed": s, "he_seed": 1000 + s, "rounds": rounds,
                                                   "n_clients": n_clients})
        m = run_federation(cfg, "ppfpl", check_reference=True, check_masks=True).metrics
        ref_gap = max(ref_gap, *m.reference_gap.values())
        mask_gap = max(mask_gap, *m.mask_gap.values())
    ok = ref_gap < 1e-4 and mask_gap < 1e-5
    return ok, f"max |enc - plaintext| {ref_gap:.3g} (< 1e-4), max |fresh masks| {mask_gap:.3g} (< 1e-5)"


@_timed(3, "mean-aggregation deviation identity")
def check_mean_deviation(trials: int = 100, dim: int = 16, n_clients: int = 10,
                         seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst_eq = 0.0
    bounded = True
    for _ in range(trials):
        u_ben = normalize(rng.normal(size=dim))
        u_mal = normalize(rng.normal(size=dim))
        for n_mal in range(1, 6):
            kappa = n_mal / n_clients
            subs = {m: {0: u_mal if m < n_mal else u_ben} for m in range(n_clients)}
            c = sa.mean_aggregate(subs)[0]
            lhs = float(np.linalg.norm(c - u_ben))
            rhs = kappa * float(np.linalg.norm(u_mal - u_ben))
            worst_eq = max(worst_eq, abs(lhs - rhs))
            bounded &= lhs <= 2 * kappa + 1e-12
    ok = worst_eq < 1e-9 and bounded
    return ok, f"max |dev - kappa*gap| {worst_eq:.3g} (< 1e-9), bound 2*kappa {'held' if bounded else 'violated'}"


def _finite_difference_error(params: nn.ModelParams, batch: LocalDataset, gs, lam: float,
                             n_classes: int, eps: float = 1e-6) -> float:
    _, grads = loss_and_grad(params, batch, gs, lam, n_classes)
    analytic = grads.flat()
    theta = params.flat()
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        hi, lo = theta.copy(), theta.copy()
        hi[i] += eps
        lo[i] -= eps
        numeric[i] = (total_loss(params.unflatten(hi), batch, gs, lam, n_classes)
                      - total_loss(params.unflatten(lo), batch, gs, lam, n_classes)) / (2 * eps)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-7)
    return float(np.max(np.abs(analytic - numeric) / scale))


@_timed(4, "gradient correctness")
def check_gradients(configs: int = 20, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(configs):
        n_in, hidden, proto, n_classes = (int(rng.integers(2, 6)), int(rng.integers(2, 6)),
                                          int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        params = nn.init_params(n_in, [hidden], proto, n_classes, rng)
        n = int(rng.integers(4, 12))
        batch = LocalDataset(rng.normal(size=(n, n_in)), rng.integers(0, n_classes, n))
        gs = as_global_set({k: rng.normal(size=proto) for k in range(n_classes)})
        worst = max(worst, _finite_difference_error(params, batch, gs, float(rng.uniform(0, 2)), n_classes))
    return worst < 1e-4, f"max relative error {worst:.3g} over {configs} configurations (< 1e-4)"


@_timed(5, "normalization verification")
def check_normalization(trials: int = 100, dim: int = 16, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    he = SimulatedCKKS(seed)
    vkeys, ckeys = he.keygen("verifier"), he.keygen("clients-shared")
    rejected = accepted = 0
    for trial in range(trials):
        agg = sa.AggregatorState(he, vkeys.public, ckeys.public, rng)
        ver = sa.VerifierState(he, vkeys.secret, ckeys.public)
        honest = normalize(rng.normal(size=dim))
        factor = 1.001 + rng.uniform(0.0, 4.0) if trial else 1.001
        subs = {0: {0: he.encrypt(vkeys.public, honest)},
                1: {0: he.encrypt(vkeys.public, factor * normalize(rng.normal(size=dim)))}}
        surviving = sa.verify_normalization(agg, ver, subs, trial)
        accepted += 0 in surviving
        rejected += 1 not in surviving
    ok = accepted == trials and rejected == trials
    return ok, f"amplified rejected {rejected}/{trials}, honest accepted {accepted}/{trials}"


def _attacked(kind: str, fraction: float, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return apply_overrides(base or ExperimentConfig(), {"attack.kind": kind, "attack.fraction": fraction})


@_timed(6, "robustness trend", limit=600.0)
def check_robustness(base: ExperimentConfig | None = None) -> tuple[bool, str]:
    base = base or ExperimentConfig()
    clean = baseline_run(base, "ppfpl").final_accuracy(FINAL_WINDOW)
    ok, parts = True, [f"clean {clean:.4f}"]
    for kind, att in itertools.product(("feature", "label"), (0.2, 0.3)):
        cfg = _attacked(kind, att, base)
        acc = baseline_run(cfg, "ppfpl").final_accuracy(FINAL_WINDOW)
        ref = baseline_run(cfg, "mean_no_filter").final_accuracy(FINAL_WINDOW)
        ok &= acc >= ref and clean - acc <= 0.03
        parts.append(f"{kind}@{att:.0%} {acc:.4f} vs mean {ref:.4f}")
    return ok, ", ".join(parts)


@_timed(7, "filter precision")
def check_filter_precision(base: ExperimentConfig | None = None,
                           overrides: Mapping = PRECISION_OVERRIDES) -> tuple[bool, str]:
    cfg = apply_overrides(_attacked("feature", 0.2, base), dict(overrides))
    fed = run_federation(cfg, "ppfpl")
    good, total = filter_precision(fed.metrics, fed.malicious)
    frac = good / total if total else float("nan")
    settings = ", ".join(f"{k}={v}" for k, v in overrides.items()) or "defaults"
    return total > 0 and frac >= 0.9, f"{good}/{total} decisions zero only malicious clients ({settings})"


@_timed(8, "per-round loss decrease")
def check_loss_trend(base: ExperimentConfig | None = None, lam: float = 0.1) -> tuple[bool, str]:
    cfg = apply_overrides(base or ExperimentConfig(), {"lam": lam})
    down, total = loss_decrease_fraction(baseline_run(cfg, "ppfpl"))
    frac = down / total
    return frac >= 0.9, f"{down}/{total} = {frac:.3f} consecutive pairs decrease (lam={lam}, >= 0.9)"


@_timed(9, "privacy transcript audit")
def check_privacy(base: ExperimentConfig | None = None, rounds: int = 5) -> tuple[bool, str]:
    base = base or ExperimentConfig()
    problems, runs = [], 0
    for over in ({}, {"attack.kind": "amplify", "attack.fraction": 0.2},
                 {"attack.kind": "feature", "attack.fraction": 0.2, **PRECISION_OVERRIDES}):
        fed = run_federation(apply_overrides(base, {"rounds": rounds, **over}), "ppfpl")
        problems += audit_privacy(fed)
        runs += 1
    detail = f"{runs} runs, {len(problems)} violations" + (f": {problems[:3]}" if problems else "")
    return not problems, detail


@_timed(10, "dynamic-attack stability")
def check_dynamic(base: ExperimentConfig | None = None,
                  fractions: Sequence[float] = (0.1, 0.2, 0.3, 0.4)) -> tuple[bool, str]:
    accs, refs = [], []
    for att in fractions:
        cfg = _attacked("dynamic", att, base)
        accs.append(baseline_run(cfg, "ppfpl").final_accuracy(FINAL_WINDOW))
        refs.append(baseline_run(cfg, "mean_no_filter").final_accuracy(FINAL_WINDOW))
    monotone = all(b <= a + 0.01 for a, b in zip(accs, accs[1:]))
    dominant = all(a >= r for a, r in zip(accs, refs))
    table = ", ".join(f"{f:.0%} {a:.4f} vs mean {r:.4f}" for f, a, r in zip(fractions, accs, refs))
    return monotone and dominant, table


CHECKS = (check_cipher_max, check_oracle_equivalence, check_mean_deviation, check_gradients,
          check_normalization, check_robustness, check_filter_precision, check_loss_trend,
          check_privacy, check_dynamic)
QUICK = {1, 3, 4, 5, 9}


def run_checks(select: Iterable[int] | None = None, echo: Callable[[str], None] | None = print) -> list[CheckResult]:
    wanted = set(select) if select is not None else set(range(1, len(CHECKS) + 1))
    results = []
    for number, check in enumerate(CHECKS, start=1):
        if number not in wanted:
            continue
        result = check()
        results.append(result)
        if echo:
            echo(result.line())
    return results


def result_rows(results: Sequence[CheckResult]) -> list[dict]:
    return [dataclasses.asdict(r) for r in results]
