"""Influence estimators over a training trace.

Estimators
    ``diffin``    checkpoint-sampled sum of difference terms over the trace's timesteps
    ``diffin_f``  the same with the final checkpoint only
    ``tracin``    first-order gradient tracing (per-sample form)
    ``if``        classic influence function at the final parameters

Targets
    ``validation_loss``  change of the mean loss over a held-out set
    ``self_loss``        change of the sample's own loss
    ``training_loss``    change of the mean training loss
    ``parameters``       change of the parameter vector

Sign convention for every loss target: the score estimates
``L(target, theta_without_z) - L(target, theta)``.

Hessians never exist as matrices here.  Every Hessian product goes through
:func:`hvp_fd`, a finite difference of gradients.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import LabeledDataset
from .model import grad_batch, grad_sample
from .optimizer import alpha_coeff, decimal_fraction
from .trainer import TrainingTrace, sample_timesteps

ESTIMATORS = ("diffin", "diffin_f", "tracin", "if")
TARGETS = ("validation_loss", "self_loss", "training_loss", "parameters")
MODES = ("collapsed_k_eq_t", "full_history", "momentum_generalized")


class InfluenceError(ValueError):
    pass


class UnsupportedError(InfluenceError):
    pass


class NumericalError(RuntimeError):
    pass


class SolverError(NumericalError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual norm {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class HvpConfig:
    scheme: str = "central"
    delta: float = 1e-3
    floor: float = 1e-8

    def __post_init__(self):
        if self.scheme not in ("forward", "central"):
            raise InfluenceError(f"unknown hvp scheme {self.scheme!r}")
        if not (self.delta > 0 and self.floor > 0):
            raise InfluenceError("hvp delta and floor must be > 0")


@dataclass(frozen=True)
class DiffInConfig:
    """``mode``: which difference-term formula; ``batch_proxy``: auto | recorded | random.

    ``m=None`` uses the trace's timesteps; ``m=1`` is the final-checkpoint variant.
    Any other ``m`` must match the trace unless the trace stores every step, in which
    case ``m`` steps are drawn with ``proxy_seed``.
    """

    mode: str = "collapsed_k_eq_t"
    batch_proxy: str = "auto"
    proxy_size: int = 64
    proxy_seed: int = 0
    m: int | None = None
    target: str = "validation_loss"
    hvp: HvpConfig = field(default_factory=HvpConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise InfluenceError(f"unknown mode {self.mode!r}")
        if self.batch_proxy not in ("auto", "recorded", "random"):
            raise InfluenceError(f"unknown batch proxy {self.batch_proxy!r}")
        if self.target not in TARGETS:
            raise InfluenceError(f"unknown target {self.target!r}")
        if self.proxy_size < 1:
            raise InfluenceError("proxy_size must be >= 1")


@dataclass(frozen=True)
class InfluenceScore:
    index: int
    estimator: str
    target: str
    value: float | np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.value)):
            raise NumericalError(f"non-finite {self.estimator} score for sample {self.index}")

    @property
    def scalar(self) -> float:
        if isinstance(self.value, np.ndarray):
            return float(np.linalg.norm(self.value))
        return float(self.value)


# --- Hessian-vector products -------------------------------------------------


def hvp_fd(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, v: np.ndarray, cfg: HvpConfig = HvpConfig()):
    if not np.all(np.isfinite(v)):
        raise InfluenceError("hvp direction must be finite")
    vn = float(np.linalg.norm(v))
    if vn == 0.0:
        return np.zeros_like(theta)
    eps = max(cfg.floor, cfg.delta * float(np.linalg.norm(theta)) / (vn + cfg.floor))
    if cfg.scheme == "forward":
        return (grad_fn(theta + eps * v) - grad_fn(theta)) / eps
    return (grad_fn(theta + eps * v) - grad_fn(theta - eps * v)) / (2 * eps)


# --- per-checkpoint quantities ----------------------------------------------


def proxy_batch(trace: TrainingTrace, t: int, cfg: DiffInConfig) -> np.ndarray:
    c = trace.checkpoints.get(t)
    if cfg.batch_proxy in ("auto", "recorded") and c is not None and c.batch.size:
        return c.batch
    if cfg.batch_proxy == "recorded":
        raise InfluenceError(f"no recorded batch at step {t}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.proxy_seed, t]))
    return np.sort(rng.choice(trace.N, size=min(trace.N, cfg.proxy_size), replace=False))


def _sample_grad_fn(spec, ds, i):
    x, y = ds.features[i], ds.labels[i]
    return lambda th: grad_sample(spec, th, x, y)


def _batch_grad_fn(spec, ds, idx):
    x, y = ds.features[idx], ds.labels[idx]
    return lambda th: grad_batch(spec, th, x, y)


def _pair_term(trace, ds, t, z, cfg, rate=None):
    """``H_B(r*G_z) + H_z(r*G_B)`` at step ``t``, scaled outside by ``r`` when ``r`` is a vector."""
    spec = trace.config.model
    theta = trace.checkpoint(t).theta
    B = proxy_batch(trace, t, cfg)
    gB_fn = _batch_grad_fn(spec, ds, B)
    gz_fn = _sample_grad_fn(spec, ds, z)
    Gz, GB = gz_fn(theta), gB_fn(theta)
    if rate is None:
        return hvp_fd(gB_fn, theta, Gz, cfg.hvp) + hvp_fd(gz_fn, theta, GB, cfg.hvp)
    return rate * (hvp_fd(gB_fn, theta, rate * Gz, cfg.hvp) + hvp_fd(gz_fn, theta, rate * GB, cfg.hvp))


def _collapsed_coef(t: int, rate: float, N: int) -> float:
    return float(-t * decimal_fraction(rate) ** 2 / N)


def diff_term_collapsed(trace: TrainingTrace, t: int, z: int, ds: LabeledDataset, cfg: DiffInConfig = DiffInConfig()):
    """``-t * lr_t**2 / N * (H_B G_z + H_z G_B)`` at stored step ``t``.

    Momentum and Adam traces are routed through :func:`diff_term_momentum`.
    """
    if trace.config.optimizer.kind != "sgd":
        return diff_term_momentum(trace, t, z, ds, cfg)
    trace.checkpoint(t)
    if t == 0:
        return np.zeros(trace.config.model.p)
    return _collapsed_coef(t, trace.lr_at(t), trace.N) * _pair_term(trace, ds, t, z, cfg)


def _require_all_steps(trace: TrainingTrace, upto: int):
    missing = [k for k in range(upto + 1) if k not in trace.checkpoints]
    if missing:
        raise InfluenceError(f"full-history estimation needs every step; missing {missing[:5]}")


def diff_term_full(trace: TrainingTrace, t: int, z: int, ds: LabeledDataset, cfg: DiffInConfig = DiffInConfig(), _cache=None):
    """Full sum over ``k <= t`` with ``a_{t,k} = -(lr_t lr_k)**2 / N`` (plain sgd)."""
    if trace.config.optimizer.kind != "sgd":
        raise UnsupportedError("full-history sum is defined for plain sgd; use diff_term_momentum")
    _require_all_steps(trace, t)
    cache = {} if _cache is None else _cache
    out = np.zeros(trace.config.model.p)
    for k in range(t + 1):
        if k not in cache:
            cache[k] = _pair_term(trace, ds, k, z, cfg)
        out = out + alpha_coeff(trace.config.optimizer, k, t, trace.N, trace.lr_at) * cache[k]
    return out


def effective_rate(trace: TrainingTrace, t: int):
    """``N * sum_{k<=t} alpha_k^{t+1}`` with every rate frozen at its step-``t`` value for adam.

    Equals ``lr_t`` when the momentum weight is zero.
    """
    opt = trace.config.optimizer
    b = opt.momentum
    acc = 0.0
    for k in range(t + 1):
        lr = trace.lr_at(t) if opt.kind == "adam" else opt.lr_at(k)
        acc = lr * (1 - b) + lr * b * acc
    return acc


def diff_term_momentum(trace: TrainingTrace, t: int, z: int, ds: LabeledDataset, cfg: DiffInConfig = DiffInConfig(), _cache=None):
    """Difference term for momentum sgd and adam.

    ``collapsed_k_eq_t``: the plain-sgd collapse with ``lr_t`` replaced by the effective
    rate of all momentum contributions into update ``t``.  ``full_history`` and
    ``momentum_generalized``: the literal nested sum over stored steps.
    """
    opt = trace.config.optimizer
    if opt.kind == "sgd":
        raise UnsupportedError("diff_term_momentum needs sgd_momentum or adam")
    trace.checkpoint(t)
    p = trace.config.model.p
    if t == 0:
        return np.zeros(p)
    if cfg.mode == "collapsed_k_eq_t":
        rate = effective_rate(trace, t)
        if np.ndim(rate) == 0:
            return _collapsed_coef(t, rate, trace.N) * _pair_term(trace, ds, t, z, cfg)
        return (-t / trace.N) * _pair_term(trace, ds, t, z, cfg, rate)
    return _nested_sum(trace, t, z, ds, cfg, {} if _cache is None else _cache)


def _nested_sum(trace, t, z, ds, cfg, cache):
    _require_all_steps(trace, t)
    opt, spec, N = trace.config.optimizer, trace.config.model, trace.N
    alpha = cache.setdefault("alpha", {})

    def a(k, q):
        if (k, q) not in alpha:
            alpha[k, q] = alpha_coeff(opt, k, q, N, trace.lr_at)
        return alpha[k, q]

    grads = cache.setdefault("grads", {})

    def gz_gB(e):
        if e not in grads:
            th = trace.checkpoint(e).theta
            B = proxy_batch(trace, e, cfg)
            grads[e] = (_sample_grad_fn(spec, ds, z)(th), _batch_grad_fn(spec, ds, B)(th))
        return grads[e]

    S = cache.setdefault("S", {})

    def inner(q):
        # H^q sum_{e<q} a_e^q grad_z^e + hess_z^q sum_{e<q} a_e^q G^e
        if q not in S:
            u = np.zeros(spec.p)
            w = np.zeros(spec.p)
            for e in range(q):
                gz, gB = gz_gB(e)
                u = u + a(e, q) * gz
                w = w + a(e, q) * gB
            th = trace.checkpoint(q).theta
            B = proxy_batch(trace, q, cfg)
            S[q] = hvp_fd(_batch_grad_fn(spec, ds, B), th, u, cfg.hvp) + hvp_fd(
                _sample_grad_fn(spec, ds, z), th, w, cfg.hvp
            )
        return S[q]

    out = np.zeros(spec.p)
    prefix = np.zeros(spec.p)
    for k in range(t):
        out = out + a(k, t) * prefix
        prefix = prefix + inner(k)
    return out


def diff_term(trace, t, z, ds, cfg: DiffInConfig = DiffInConfig(), _cache=None):
    if trace.config.optimizer.kind != "sgd":
        return diff_term_momentum(trace, t, z, ds, cfg, _cache)
    if cfg.mode == "full_history":
        return diff_term_full(trace, t, z, ds, cfg, _cache)
    return diff_term_collapsed(trace, t, z, ds, cfg)


def resolve_timesteps(trace: TrainingTrace, cfg: DiffInConfig) -> list[int]:
    if cfg.m is None:
        return list(trace.timesteps)
    if cfg.m == 1:
        return [trace.T]
    if cfg.m == len(trace.timesteps):
        return list(trace.timesteps)
    if all(k in trace.checkpoints for k in range(1, trace.T + 1)):
        return sample_timesteps(trace.T, cfg.m, cfg.proxy_seed)
    raise InfluenceError(f"m={cfg.m} does not match the trace's {len(trace.timesteps)} checkpoints")


def _target_grad(trace, t, target_set, cfg):
    th = trace.checkpoint(t).theta
    return grad_batch(trace.config.model, th, target_set.features, target_set.labels)


def influence_on_params(trace: TrainingTrace, z: int, ds: LabeledDataset, cfg: DiffInConfig = DiffInConfig()):
    """``(1/m) * sum over sampled steps of the difference terms``."""
    steps = resolve_timesteps(trace, cfg)
    cache: dict = {}
    out = np.zeros(trace.config.model.p)
    for t in steps:
        out = out + diff_term(trace, t, z, ds, cfg, cache)
    return out / len(steps)


def influence_on_loss(
    trace: TrainingTrace,
    z: int,
    ds: LabeledDataset,
    target_set: LabeledDataset | None,
    cfg: DiffInConfig = DiffInConfig(),
    _target_grads: dict | None = None,
) -> float:
    """``(1/m) * sum_t <grad L(target, theta^t), D^t(z)>``; ``target_set=None`` means ``{z}``."""
    if target_set is not None and len(target_set) == 0:
        raise InfluenceError("empty target set")
    steps = resolve_timesteps(trace, cfg)
    cache: dict = {}
    acc = 0.0
    for t in steps:
        if target_set is None:
            g = _sample_grad_fn(trace.config.model, ds, z)(trace.checkpoint(t).theta)
        elif _target_grads is not None and t in _target_grads:
            g = _target_grads[t]
        else:
            g = _target_grad(trace, t, target_set, cfg)
        acc += float(g @ diff_term(trace, t, z, ds, cfg, cache))
    return acc / len(steps)


def group_influence(
    trace: TrainingTrace,
    group,
    ds: LabeledDataset,
    target_set: LabeledDataset | None,
    cfg: DiffInConfig = DiffInConfig(),
) -> float:
    """First-order group estimate: the sum of per-sample scores in the given order."""
    total = 0.0
    for z in group:
        total += influence_on_loss(trace, int(z), ds, target_set, cfg)
    return total


def self_influence(trace: TrainingTrace, z: int, ds: LabeledDataset, cfg: DiffInConfig = DiffInConfig()) -> float:
    return influence_on_loss(trace, z, ds, ds.subset([z]), cfg)


def tracin_score(
    trace: TrainingTrace,
    z: int,
    ds: LabeledDataset,
    target_set: LabeledDataset | None,
    cfg: DiffInConfig = DiffInConfig(),
    _target_grads: dict | None = None,
) -> float:
    """``sum_t lr_t <grad L(target, theta^t), grad l(z, theta^t)>`` over sampled steps."""
    if target_set is not None and len(target_set) == 0:
        raise InfluenceError("empty target set")
    spec = trace.config.model
    acc = 0.0
    for t in resolve_timesteps(trace, cfg):
        th = trace.checkpoint(t).theta
        gz = _sample_grad_fn(spec, ds, z)(th)
        if target_set is None:
            gv = gz
        elif _target_grads is not None and t in _target_grads:
            gv = _target_grads[t]
        else:
            gv = _target_grad(trace, t, target_set, cfg)
        acc += float(gv @ (trace.lr_at(t) * gz))
    return acc


# --- classic influence function ---------------------------------------------


@dataclass(frozen=True)
class SolverConfig:
    kind: str = "cg"  # cg | lissa
    iters: int = 500
    tol: float = 1e-8
    damping: float | None = None  # None -> 0.01 * tr(H) / p
    probes: int = 20
    seed: int = 0
    scale: float | None = None  # lissa; None -> 2 * power-iteration estimate
    depth: int = 5000

    def __post_init__(self):
        if self.kind not in ("cg", "lissa"):
            raise InfluenceError(f"unknown solver {self.kind!r}")
        if self.damping is not None and self.damping < 0:
            raise InfluenceError("damping must be >= 0")


def hutchinson_trace(hvp: Callable[[np.ndarray], np.ndarray], p: int, probes: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(probes):
        v = rng.choice([-1.0, 1.0], size=p)
        total += float(v @ hvp(v))
    return total / probes


def conjugate_gradient(A: Callable[[np.ndarray], np.ndarray], b: np.ndarray, iters: int, tol: float) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    d = r.copy()
    rr = float(r @ r)
    bn = math.sqrt(float(b @ b))
    if bn == 0.0:
        return x
    for _ in range(iters):
        if math.sqrt(rr) <= tol * bn:
            return x
        Ad = A(d)
        dAd = float(d @ Ad)
        if dAd <= 0:
            raise SolverError("cg met non-positive curvature", math.sqrt(rr))
        step = rr / dAd
        x = x + step * d
        r = r - step * Ad
        rr_new = float(r @ r)
        d = r + (rr_new / rr) * d
        rr = rr_new
    res = float(np.linalg.norm(b - A(x)))
    if res > tol * bn:
        raise SolverError("cg did not converge", res)
    return x


def lissa(A: Callable[[np.ndarray], np.ndarray], b: np.ndarray, scale: float, depth: int, tol: float) -> np.ndarray:
    """Neumann-series solve of ``A x = b`` with ``A / scale`` contractive."""
    x = b / scale
    for _ in range(depth):
        x = b / scale + x - A(x) / scale
    res = float(np.linalg.norm(b - A(x)))
    if not np.isfinite(res) or res > tol * max(float(np.linalg.norm(b)), 1e-300):
        raise SolverError("lissa did not converge", res)
    return x


def _power_max(A, p, seed, iters=50):
    v = np.random.default_rng(seed).standard_normal(p)
    lam = 0.0
    for _ in range(iters):
        w = A(v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


class IFSolver:
    """Damped inverse-Hessian solves of the final training loss.

    With the default damping, a CG run that meets non-positive curvature is retried
    with ten times the damping, up to ``max_escalations`` times.  An explicit
    ``damping`` is never changed.
    """

    max_escalations = 8

    def __init__(self, theta, spec, ds: LabeledDataset, solver: SolverConfig = SolverConfig(), hvp: HvpConfig = HvpConfig()):
        self.theta, self.spec, self.ds, self.cfg = theta, spec, ds, solver
        gfn = _batch_grad_fn(spec, ds, np.arange(len(ds)))
        self.H = lambda v: hvp_fd(gfn, theta, v, hvp)
        lam = solver.damping
        self.adaptive = lam is None
        if lam is None:
            lam = max(1e-12, 0.01 * hutchinson_trace(self.H, spec.p, solver.probes, solver.seed) / spec.p)
        self.damping = lam

    def A(self, v: np.ndarray, damping: float | None = None) -> np.ndarray:
        return self.H(v) + (self.damping if damping is None else damping) * v

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``(H + lam I) x = b``.  Escalation is local to the call, so results do not depend on call order."""
        c = self.cfg
        if c.kind == "lissa":
            scale = c.scale or 2.0 * max(_power_max(self.A, self.spec.p, c.seed), 1e-12)
            return lissa(self.A, b, scale, c.depth, c.tol)
        lam = self.damping
        for attempt in range(self.max_escalations + 1):
            try:
                return conjugate_gradient(lambda v: self.A(v, lam), b, c.iters, c.tol)
            except SolverError as e:
                if not self.adaptive or "curvature" not in str(e) or attempt == self.max_escalations:
                    raise
                lam *= 10.0


def if_score(
    trace: TrainingTrace,
    z: int,
    ds: LabeledDataset,
    target_set: LabeledDataset | None,
    solver: SolverConfig = SolverConfig(),
    hvp: HvpConfig = HvpConfig(),
    _solver: IFSolver | None = None,
):
    """``(1/N) <grad L(target, theta*), (H + lam I)^{-1} grad l(z, theta*)>``.

    Removing ``z`` is up-weighting by ``-1/N``, hence the positive sign.
    ``target_set=None`` means ``{z}``.
    """
    spec = trace.config.model
    s = _solver or IFSolver(trace.final, spec, ds, solver, hvp)
    gz = _sample_grad_fn(spec, ds, z)(trace.final)
    gv = gz if target_set is None else grad_batch(spec, trace.final, target_set.features, target_set.labels)
    if not np.any(gz) or not np.any(gv):
        return 0.0
    return float(gv @ s.solve(gz)) / trace.N


def if_params(trace, z, ds, solver: SolverConfig = SolverConfig(), hvp: HvpConfig = HvpConfig(), _solver=None):
    spec = trace.config.model
    s = _solver or IFSolver(trace.final, spec, ds, solver, hvp)
    gz = _sample_grad_fn(spec, ds, z)(trace.final)
    if not np.any(gz):
        return np.zeros(spec.p)
    return s.solve(gz) / trace.N


# --- batched scoring ---------------------------------------------------------


@dataclass(frozen=True)
class ScoreJob:
    trace: TrainingTrace
    ds: LabeledDataset
    estimator: str
    target: str
    target_set: LabeledDataset | None
    cfg: DiffInConfig
    solver: SolverConfig


def check_combination(estimator: str, target: str) -> None:
    if estimator not in ESTIMATORS:
        raise InfluenceError(f"unknown estimator {estimator!r}")
    if target not in TARGETS:
        raise InfluenceError(f"unknown target {target!r}")
    if estimator == "tracin" and target == "parameters":
        raise UnsupportedError("unsupported target: tracin cannot estimate influence on parameters")


def _target_set(job: ScoreJob):
    if job.target == "validation_loss":
        if job.target_set is None:
            raise InfluenceError("validation_loss target needs a validation set")
        return job.target_set
    if job.target == "training_loss":
        return job.ds
    return None  # self_loss; unused for parameters


class _Scorer:
    def __init__(self, job: ScoreJob):
        self.job = job
        self.tset = _target_set(job)
        self.cfg = job.cfg if job.estimator != "diffin_f" else _with_m(job.cfg, 1)
        self.grads = None
        self.if_solver = None
        self.if_shared = None
        self.ready = False

    def _prepare(self):
        self.ready = True
        job = self.job
        if job.estimator == "if":
            self.if_solver = IFSolver(job.trace.final, job.trace.config.model, job.ds, job.solver, job.cfg.hvp)
            if self.tset is not None and job.target != "parameters":
                gv = grad_batch(job.trace.config.model, job.trace.final, self.tset.features, self.tset.labels)
                # one shared solve for a fixed target set (H is symmetric)
                self.if_shared = self.if_solver.solve(gv) if np.any(gv) else np.zeros_like(gv)
        elif self.tset is not None and job.target != "parameters":
            self.grads = {t: _target_grad(job.trace, t, self.tset, self.cfg) for t in resolve_timesteps(job.trace, self.cfg)}

    def score(self, i: int) -> InfluenceScore:
        if not self.ready:
            self._prepare()
        job = self.job
        tr, ds, cfg = job.trace, job.ds, self.cfg
        est, tgt = job.estimator, job.target
        if est == "if":
            if tgt == "parameters":
                val = if_params(tr, i, ds, _solver=self.if_solver)
            elif self.if_shared is not None:
                gz = _sample_grad_fn(tr.config.model, ds, i)(tr.final)
                val = float(self.if_shared @ gz) / tr.N
            else:
                val = if_score(tr, i, ds, None, _solver=self.if_solver)
        elif est == "tracin":
            val = tracin_score(tr, i, ds, self.tset, cfg, self.grads)
        elif tgt == "parameters":
            val = influence_on_params(tr, i, ds, cfg)
        else:
            val = influence_on_loss(tr, i, ds, self.tset, cfg, self.grads)
        return InfluenceScore(i, est, tgt, val)


def _with_m(cfg: DiffInConfig, m: int) -> DiffInConfig:
    return replace(cfg, m=m)


_WORKER: _Scorer | None = None


def _init_worker(job: ScoreJob):
    global _WORKER
    _WORKER = _Scorer(job)


def _score_chunk(indices: list[int]) -> list[InfluenceScore]:
    return [_WORKER.score(i) for i in indices]


def score_all(
    trace: TrainingTrace,
    ds: LabeledDataset,
    estimator: str = "diffin",
    target: str = "validation_loss",
    target_set: LabeledDataset | None = None,
    cfg: DiffInConfig = DiffInConfig(),
    solver: SolverConfig = SolverConfig(),
    workers: int = 1,
    indices: list[int] | None = None,
) -> list[InfluenceScore]:
    """Score every training sample.  Output is ordered by index and independent of ``workers``."""
    check_combination(estimator, target)
    if len(ds) != trace.N or ds.fingerprint() != trace.fingerprint:
        raise InfluenceError("dataset does not match the trace")
    job = ScoreJob(trace, ds, estimator, target, target_set, cfg, solver)
    idx = list(range(len(ds))) if indices is None else [int(i) for i in indices]
    if workers <= 1 or len(idx) < 2:
        scorer = _Scorer(job)
        out = [scorer.score(i) for i in idx]
    else:
        chunks = [idx[w::workers] for w in range(workers) if idx[w::workers]]
        with ProcessPoolExecutor(len(chunks), initializer=_init_worker, initargs=(job,)) as ex:
            out = [s for part in ex.map(_score_chunk, chunks) for s in part]
    return sorted(out, key=lambda s: s.index)


def scores_to_csv(scores: list[InfluenceScore], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "estimator", "target", "score"])
        for s in scores:
            w.writerow([s.index, s.estimator, s.target, repr(s.scalar)])


def scores_from_csv(path: str | Path) -> list[InfluenceScore]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [InfluenceScore(int(r["sample_index"]), r["estimator"], r["target"], float(r["score"])) for r in rows]


def scores_to_json(scores: list[InfluenceScore], path: str | Path) -> None:
    data = [
        {
            "sample_index": s.index,
            "estimator": s.estimator,
            "target": s.target,
            "score": [float(v) for v in s.value] if isinstance(s.value, np.ndarray) else float(s.value),
        }
        for s in scores
    ]
    Path(path).write_text(json.dumps(data, sort_keys=True))


def save_param_influence(scores: list[InfluenceScore], path: str | Path) -> None:
    """Stack of parameter-valued scores as little-endian float64 rows, with a JSON sidecar."""
    mat = np.stack([np.asarray(s.value, dtype=np.float64) for s in scores])
    Path(path).write_bytes(mat.astype("<f8").tobytes())
    Path(str(path) + ".json").write_text(
        json.dumps({"rows": mat.shape[0], "p": mat.shape[1], "indices": [s.index for s in scores]})
    )


def load_param_influence(path: str | Path) -> dict[int, np.ndarray]:
    meta = json.loads(Path(str(path) + ".json").read_text())
    mat = np.frombuffer(Path(path).read_bytes(), dtype="<f8").reshape(meta["rows"], meta["p"])
    return {int(i): mat[r].copy() for r, i in enumerate(meta["indices"])}
