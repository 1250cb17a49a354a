"""Ground truth by retraining, correlation metrics and the error-bound diagnostic.

Retraining reuses the trainer's restricted batch schedule: removed samples drop out
of their batches and every other sample keeps its slot, so the only difference
between the base run and a retrain is the removed data.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import LabeledDataset
from .model import loss_batch, loss_sample, per_sample_grads
from .trainer import TrainConfig, TrainingTrace, train


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class ExactInfluence:
    indices: tuple[int, ...]
    theta_minus: np.ndarray
    I_theta: np.ndarray
    delta_loss: dict[str, float]

    @property
    def index(self) -> int:
        return self.indices[0]

    def to_json(self) -> dict:
        return {
            "indices": list(self.indices),
            "theta_minus": [float(v) for v in self.theta_minus],
            "I_theta": [float(v) for v in self.I_theta],
            "delta_loss": {k: float(v) for k, v in sorted(self.delta_loss.items())},
        }

    @classmethod
    def from_json(cls, d: dict) -> "ExactInfluence":
        return cls(
            tuple(d["indices"]),
            np.asarray(d["theta_minus"], dtype=np.float64),
            np.asarray(d["I_theta"], dtype=np.float64),
            dict(d["delta_loss"]),
        )


def _target_losses(spec, theta, ds, removed: Sequence[int], targets: dict[str, LabeledDataset | None]):
    out = {}
    for name, tset in targets.items():
        if tset is None:
            # "self": mean own loss of the removed samples
            out[name] = float(np.mean([loss_sample(spec, theta, *ds.sample(i)) for i in removed]))
        else:
            out[name] = loss_batch(spec, theta, tset.features, tset.labels)
    return out


def _retrain(ds, cfg, removed, targets, theta_star):
    removed = sorted({int(i) for i in removed})
    if not removed:
        raise OracleError("nothing to remove")
    if any(i < 0 or i >= len(ds) for i in removed):
        raise OracleError("sample index out of range")
    if len(removed) >= len(ds):
        raise OracleError("empty remainder")
    variant = ds.without(removed)
    if cfg.batch_size > len(variant):
        raise OracleError("batch_size exceeds the remaining sample count")
    theta_minus = train(variant, cfg).final
    spec = cfg.model
    after = _target_losses(spec, theta_minus, ds, removed, targets)
    before = _target_losses(spec, theta_star, ds, removed, targets)
    delta = {k: after[k] - before[k] for k in targets}
    return ExactInfluence(tuple(removed), theta_minus, theta_minus - theta_star, delta)


def loo_retrain(
    ds: LabeledDataset,
    cfg: TrainConfig,
    z_index: int,
    targets: dict[str, LabeledDataset | None] | None = None,
    theta_star: np.ndarray | None = None,
) -> ExactInfluence:
    """Retrain on ``D / z``.  ``targets`` maps names to target sets; ``None`` means z itself."""
    theta_star = train(ds, cfg).final if theta_star is None else theta_star
    return _retrain(ds, cfg, [z_index], targets or {}, theta_star)


def group_retrain(
    ds: LabeledDataset,
    cfg: TrainConfig,
    indices: Sequence[int],
    targets: dict[str, LabeledDataset | None] | None = None,
    theta_star: np.ndarray | None = None,
) -> ExactInfluence:
    theta_star = train(ds, cfg).final if theta_star is None else theta_star
    return _retrain(ds, cfg, indices, targets or {}, theta_star)


# --- cached sweeps ------------------------------------------------------------


def _targets_key(targets: dict[str, LabeledDataset | None]) -> dict[str, str | None]:
    return {k: (v.fingerprint() if v is not None else None) for k, v in sorted(targets.items())}


class OracleCache:
    """``<root>/loo_{index}.json`` and ``<root>/group_{hash}.json`` keyed by dataset, config and targets."""

    def __init__(self, root: str | Path, ds: LabeledDataset, cfg: TrainConfig, targets: dict):
        self.root = Path(root)
        self.key = {"dataset": ds.fingerprint(), "config": cfg.hash(), "targets": _targets_key(targets)}

    def _path(self, indices: tuple[int, ...]) -> Path:
        if len(indices) == 1:
            return self.root / f"loo_{indices[0]}.json"
        h = hashlib.sha256(json.dumps(list(indices)).encode()).hexdigest()[:16]
        return self.root / f"group_{h}.json"

    def get(self, indices: tuple[int, ...]) -> ExactInfluence | None:
        f = self._path(indices)
        if not f.exists():
            return None
        d = json.loads(f.read_text())
        if d.get("key") != self.key or tuple(d["result"]["indices"]) != indices:
            return None
        return ExactInfluence.from_json(d["result"])

    def put(self, r: ExactInfluence) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self._path(r.indices).write_text(json.dumps({"key": self.key, "result": r.to_json()}, sort_keys=True))


def _retrain_job(args):
    ds, cfg, group, targets, theta_star = args
    return _retrain(ds, cfg, group, targets, theta_star)


def retrain_many(
    ds: LabeledDataset,
    cfg: TrainConfig,
    groups: Sequence[Sequence[int]],
    targets: dict[str, LabeledDataset | None] | None = None,
    theta_star: np.ndarray | None = None,
    cache_dir: str | Path | None = None,
    workers: int = 1,
) -> tuple[list[ExactInfluence], int]:
    """Exact effects for each group (singletons are leave-one-out).  Returns (results, retrain count)."""
    targets = targets or {}
    theta_star = train(ds, cfg).final if theta_star is None else theta_star
    keys = [tuple(sorted({int(i) for i in g})) for g in groups]
    cache = OracleCache(cache_dir, ds, cfg, targets) if cache_dir is not None else None
    results: dict[tuple[int, ...], ExactInfluence] = {}
    todo = []
    for k in keys:
        hit = cache.get(k) if cache else None
        if hit is not None:
            results[k] = hit
        elif k not in todo:
            todo.append(k)
    jobs = [(ds, cfg, k, targets, theta_star) for k in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as ex:
            fresh = list(ex.map(_retrain_job, jobs))
    else:
        fresh = [_retrain_job(j) for j in jobs]
    for k, r in zip(todo, fresh):
        results[k] = r
        if cache:
            cache.put(r)
    return [results[k] for k in keys], len(todo)


def loo_all(ds, cfg, targets=None, theta_star=None, cache_dir=None, workers=1, indices=None):
    idx = range(len(ds)) if indices is None else indices
    return retrain_many(ds, cfg, [[i] for i in idx], targets, theta_star, cache_dir, workers)


def loo_sample(n: int, k: int, seed: int) -> list[int]:
    if not 1 <= k <= n:
        raise OracleError("loo sample size must satisfy 1 <= k <= N")
    return sorted(int(i) for i in np.random.default_rng(seed).choice(n, size=k, replace=False))


def random_groups(n: int, count: int, size: int, seed: int) -> list[list[int]]:
    rng = np.random.default_rng(seed)
    return [sorted(int(i) for i in rng.choice(n, size=size, replace=False)) for _ in range(count)]


# --- metrics ------------------------------------------------------------------


def _pair(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise OracleError("inputs must be equal-length vectors")
    if x.size < 2:
        raise OracleError("need at least two points")
    return x, y


def pearson(xs, ys) -> float:
    x, y = _pair(xs, ys)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise OracleError("zero variance")
    # one square root keeps pearson(x, x) exactly 1
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def average_ranks(xs) -> np.ndarray:
    x = np.asarray(xs, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    x, y = _pair(xs, ys)
    return pearson(average_ranks(x), average_ranks(y))


def lds_score(groups: Sequence[Sequence[int]], estimator_scores, exact_group_effects) -> float:
    """Spearman correlation between group-summed scores and exact group effects."""
    if len(groups) < 2:
        raise OracleError("need at least two groups")
    s = np.asarray(estimator_scores, dtype=np.float64)
    summed = [float(np.sum(s[list(g)])) for g in groups]
    try:
        return spearman(summed, exact_group_effects)
    except OracleError as e:
        raise OracleError(f"degenerate ranks: {e}") from None


# --- error bound ----------------------------------------------------------------


@dataclass(frozen=True)
class BoundConstants:
    ell: float
    g: float
    C: float
    T: int
    N: int
    label: str = "empirical"

    def __post_init__(self):
        if min(self.ell, self.g, self.C) < 0 or self.T < 0 or self.N < 1:
            raise OracleError("bound constants must be nonnegative")


def estimate_constants(
    trace: TrainingTrace,
    ds: LabeledDataset,
    probes: int = 20,
    seed: int = 0,
    radius: float = 0.1,
    extra_params: Sequence[np.ndarray] = (),
) -> BoundConstants:
    """Empirical constants along the trajectory.

    ``g``: largest per-sample gradient norm at stored checkpoints.
    ``ell``: largest per-sample gradient difference ratio over seeded probe pairs within
    ``radius`` of random checkpoints; a lower estimate of the true Lipschitz constant.
    ``C``: largest distance from the initial parameters over checkpoints, the final
    parameters and ``extra_params`` (e.g. retrained parameters).
    """
    spec = trace.config.model
    steps = trace.steps
    g = 0.0
    for t in steps:
        G = per_sample_grads(spec, trace.checkpoint(t).theta, ds.features, ds.labels)
        g = max(g, float(np.max(np.linalg.norm(G, axis=1))))
    rng = np.random.default_rng(seed)
    ell = 0.0
    for _ in range(probes):
        th = trace.checkpoint(steps[int(rng.integers(len(steps)))]).theta
        u = rng.standard_normal((2, spec.p))
        u *= radius / np.linalg.norm(u, axis=1, keepdims=True)
        a, b = th + u[0], th + u[1]
        dist = float(np.linalg.norm(a - b))
        if dist == 0.0:
            continue
        D = per_sample_grads(spec, a, ds.features, ds.labels) - per_sample_grads(spec, b, ds.features, ds.labels)
        ell = max(ell, float(np.max(np.linalg.norm(D, axis=1))) / dist)
    theta0 = trace.checkpoint(0).theta
    C = max(
        [float(np.linalg.norm(trace.checkpoint(t).theta - theta0)) for t in steps]
        + [float(np.linalg.norm(trace.final - theta0))]
        + [float(np.linalg.norm(np.asarray(p) - theta0)) for p in extra_params]
    )
    return BoundConstants(ell, g, C, trace.T, trace.N)


def error_bound(c: BoundConstants) -> float:
    T = c.T
    return 2 * T * T * c.ell * (T + 1) * c.C + T * T * c.g / c.N
