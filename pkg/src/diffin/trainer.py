"""Deterministic mini-batch training with checkpointed traces.

Indexing: update ``t`` (``t = 0 .. T-1``) uses batch ``B^t`` at ``theta^t`` and
produces ``theta^{t+1}``; ``theta^T`` is the final model.  A checkpoint at step
``t`` holds ``theta^t``, the learning rate of update ``t``, the optimizer state
before that update and ``B^t``.  The checkpoint at ``t = T`` records the batch the
schedule would have drawn next, so every stored step has a batch.

The batch schedule is a pure function of ``(universe, batch_size, T, seed)``:
per-epoch permutations of the universe cut into consecutive chunks.  Training on
a subset of the universe uses the same schedule restricted to surviving ids,
which is the seed policy used for leave-one-out retraining.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import LabeledDataset
from .model import ModelSpec, grad_batch, init_params, load_params, loss_batch, save_params
from .optimizer import (
    OptimizerConfig,
    OptimizerState,
    adam_general_lr,
    init_state,
    step,
)

log = logging.getLogger(__name__)

TRACE_FORMAT = 1


class TrainingError(ValueError):
    pass


class TraceIntegrityError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: "TrainingTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    model: ModelSpec
    optimizer: OptimizerConfig
    batch_size: int
    T: int
    seed: int = 0
    plan: str = "uniform"  # uniform | all | last_only
    m: int = 5
    init_scale: float | None = None
    init_params: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.T < 1:
            raise TrainingError("T must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.plan not in ("uniform", "all", "last_only"):
            raise TrainingError(f"unknown checkpoint plan {self.plan!r}")
        if self.plan == "uniform" and not 1 <= self.m <= self.T:
            raise TrainingError("checkpoint count m must satisfy 1 <= m <= T")
        if self.init_params is not None:
            object.__setattr__(self, "init_params", tuple(float(v) for v in self.init_params))
            if len(self.init_params) != self.model.p:
                raise TrainingError("init_params length does not match the model")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "batch_size": self.batch_size,
            "T": self.T,
            "seed": self.seed,
            "plan": self.plan,
            "m": self.m,
            "init_scale": self.init_scale,
            "init_params": list(self.init_params) if self.init_params is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelSpec.from_dict(d["model"])
        d["optimizer"] = OptimizerConfig.from_dict(d["optimizer"])
        if d.get("init_params") is not None:
            d["init_params"] = tuple(d["init_params"])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class Checkpoint:
    t: int
    theta: np.ndarray
    lr: float | np.ndarray
    batch: np.ndarray  # positions into the training set
    M: np.ndarray | None = None
    V: np.ndarray | None = None

    @property
    def state(self) -> OptimizerState:
        return OptimizerState(self.t, self.M, self.V)


@dataclass
class TrainingTrace:
    config: TrainConfig
    timesteps: list[int]
    checkpoints: dict[int, Checkpoint]
    final: np.ndarray
    losses: list[float]
    fingerprint: str
    N: int
    universe: int
    completed: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.config.T

    @property
    def steps(self) -> list[int]:
        return sorted(self.checkpoints)

    def checkpoint(self, t: int) -> Checkpoint:
        try:
            return self.checkpoints[t]
        except KeyError:
            raise TrainingError(f"step {t} is not a stored checkpoint") from None

    def lr_at(self, t: int):
        """Learning rate of update ``t``: schedule value, or the stored general rate for adam."""
        if self.config.optimizer.kind == "adam":
            return self.checkpoint(t).lr
        return self.config.optimizer.lr_at(t)

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        h.update(self.fingerprint.encode())
        h.update(json.dumps(self.timesteps).encode())
        for t in self.steps:
            c = self.checkpoints[t]
            h.update(str(t).encode())
            h.update(c.theta.astype("<f8").tobytes())
            h.update(c.batch.astype("<i8").tobytes())
        h.update(self.final.astype("<f8").tobytes())
        return h.hexdigest()

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        spec = self.config.model
        for t in self.steps:
            c = self.checkpoints[t]
            save_params(d / f"ckpt_{t}.bin", c.theta, spec)
            if c.M is not None:
                save_params(d / f"mom_{t}.bin", c.M, spec)
            if c.V is not None:
                save_params(d / f"var_{t}.bin", c.V, spec)
            if isinstance(c.lr, np.ndarray):
                save_params(d / f"lr_{t}.bin", c.lr, spec)
        save_params(d / "final.bin", self.final, spec)
        batches = {str(t): [int(i) for i in self.checkpoints[t].batch] for t in self.steps}
        (d / "batches.json").write_text(json.dumps(batches))
        meta = {
            "format": TRACE_FORMAT,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "timesteps": self.timesteps,
            "steps": self.steps,
            "lr": {str(t): (None if isinstance(c.lr, np.ndarray) else c.lr) for t, c in self.checkpoints.items()},
            "losses": self.losses,
            "dataset_fingerprint": self.fingerprint,
            "N": self.N,
            "universe": self.universe,
            "completed": self.completed,
            "trace_hash": self.hash(),
            "meta": self.meta,
        }
        (d / "trace.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path, ds: LabeledDataset | None = None) -> "TrainingTrace":
        d = Path(directory)
        if not (d / "trace.json").exists():
            raise FileNotFoundError(f"no trace.json in {d}")
        meta = json.loads((d / "trace.json").read_text())
        if meta.get("format") != TRACE_FORMAT:
            raise TraceIntegrityError(f"unsupported trace format {meta.get('format')}")
        if ds is not None and ds.fingerprint() != meta["dataset_fingerprint"]:
            raise TraceIntegrityError("dataset fingerprint does not match the trace")
        cfg = TrainConfig.from_dict(meta["config"])
        batches = json.loads((d / "batches.json").read_text())
        ckpts = {}
        for t in meta["steps"]:

            def opt(name, t=t):
                f = d / f"{name}_{t}.bin"
                return load_params(f)[0] if f.exists() else None

            lr = meta["lr"][str(t)]
            ckpts[t] = Checkpoint(
                t,
                load_params(d / f"ckpt_{t}.bin")[0],
                opt("lr") if lr is None else lr,
                np.asarray(batches[str(t)], dtype=np.int64),
                opt("mom"),
                opt("var"),
            )
        trace = cls(
            cfg,
            list(meta["timesteps"]),
            ckpts,
            load_params(d / "final.bin")[0],
            list(meta["losses"]),
            meta["dataset_fingerprint"],
            meta["N"],
            meta["universe"],
            meta["completed"],
            meta.get("meta", {}),
        )
        if trace.hash() != meta["trace_hash"]:
            raise TraceIntegrityError("trace contents do not match the recorded hash")
        return trace


def _seed(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def sample_timesteps(T: int, m: int, seed: int) -> list[int]:
    """``m`` distinct steps from ``1..T`` drawn uniformly, always including ``T``."""
    if not 1 <= m <= T:
        raise TrainingError("need 1 <= m <= T")
    rest = _seed(seed, 2).choice(np.arange(1, T), size=m - 1, replace=False) if m > 1 else []
    return sorted(int(t) for t in [*rest, T])


def make_schedule(universe: int, batch_size: int, T: int, seed: int) -> list[np.ndarray]:
    """Batches (as universe ids) for updates ``0..T``; the extra one is the post-training batch."""
    rng = _seed(seed, 1)
    out: list[np.ndarray] = []
    while len(out) < T + 1:
        perm = rng.permutation(universe)
        for j in range(0, universe, batch_size):
            out.append(perm[j : j + batch_size])
            if len(out) == T + 1:
                break
    return out


def planned_steps(cfg: TrainConfig) -> tuple[list[int], set[int]]:
    """Return (sampled timesteps, all stored checkpoint steps)."""
    if cfg.plan == "all":
        ts = list(range(1, cfg.T + 1))
        return ts, set(range(cfg.T + 1))
    if cfg.plan == "last_only":
        ts = [cfg.T]
    else:
        ts = sample_timesteps(cfg.T, cfg.m, cfg.seed)
    return ts, {0, *ts}


class _Restrictor:
    """Maps universe ids of a batch to positions in a (sub)dataset."""

    def __init__(self, ds: LabeledDataset):
        self.pos = np.full(ds.universe, -1, dtype=np.int64)
        self.pos[ds.ids] = np.arange(len(ds))

    def __call__(self, ids: np.ndarray) -> np.ndarray:
        p = self.pos[ids]
        return p[p >= 0]


def _lr_record(cfg: TrainConfig, ds, theta, state: OptimizerState, batch: np.ndarray):
    opt = cfg.optimizer
    if opt.kind != "adam":
        return opt.lr_at(state.t)
    if batch.size == 0:
        return np.full(theta.shape, opt.lr_at(state.t) / ((1 - opt.beta1) * opt.eps))
    G = grad_batch(cfg.model, theta, ds.features[batch], ds.labels[batch])
    return adam_general_lr(opt, state, G)


def _run(
    ds: LabeledDataset,
    cfg: TrainConfig,
    theta: np.ndarray,
    state: OptimizerState,
    start: int,
    store: set[int],
    log_every: int = 0,
) -> tuple[np.ndarray, dict[int, Checkpoint], list[float], bool]:
    schedule = make_schedule(ds.universe, cfg.batch_size, cfg.T, cfg.seed)
    restrict = _Restrictor(ds)
    spec = cfg.model
    ckpts: dict[int, Checkpoint] = {}
    losses: list[float] = []
    t0 = time.perf_counter()
    for t in range(start, cfg.T):
        batch = restrict(schedule[t])
        if t in store:
            ckpts[t] = Checkpoint(t, theta.copy(), _lr_record(cfg, ds, theta, state, batch), batch, state.M, state.V)
        if batch.size == 0:
            # every sample of this batch was removed: no update, the clock still advances
            losses.append(float("nan"))
            state = OptimizerState(state.t + 1, state.M, state.V)
            continue
        xb, yb = ds.features[batch], ds.labels[batch]
        with np.errstate(over="ignore", invalid="ignore"):
            # non-finite values are caught just below
            loss = loss_batch(spec, theta, xb, yb)
            G = grad_batch(spec, theta, xb, yb)
        if not np.isfinite(loss) or not np.all(np.isfinite(G)):
            return theta, ckpts, losses, False
        new_theta, new_state = step(cfg.optimizer, state, theta, G)
        if not np.all(np.isfinite(new_theta)):
            return theta, ckpts, losses, False
        theta, state = new_theta, new_state
        losses.append(loss)
        if log_every and (t + 1) % log_every == 0:
            log.info(
                json.dumps({"event": "train_step", "step": t + 1, "loss": loss, "elapsed": time.perf_counter() - t0})
            )
    if cfg.T in store:
        batch = restrict(schedule[cfg.T])
        ckpts[cfg.T] = Checkpoint(
            cfg.T, theta.copy(), _lr_record(cfg, ds, theta, state, batch), batch, state.M, state.V
        )
    return theta, ckpts, losses, True


def initial_params(cfg: TrainConfig) -> np.ndarray:
    if cfg.init_params is not None:
        return np.asarray(cfg.init_params, dtype=np.float64)
    return init_params(cfg.model, int(_seed(cfg.seed, 0).integers(2**63)), cfg.init_scale)


def train(ds: LabeledDataset, cfg: TrainConfig, log_every: int = 0) -> TrainingTrace:
    if cfg.batch_size > len(ds):
        raise TrainingError("batch_size exceeds the number of samples")
    if cfg.model.d_in != ds.d_in or (cfg.model.architecture != "quadratic" and cfg.model.num_classes != ds.num_classes):
        raise TrainingError("model spec does not match the dataset")
    timesteps, store = planned_steps(cfg)
    theta0 = initial_params(cfg)
    theta, ckpts, losses, ok = _run(ds, cfg, theta0, init_state(cfg.optimizer, cfg.model.p), 0, store, log_every)
    trace = TrainingTrace(cfg, timesteps, ckpts, theta, losses, ds.fingerprint(), len(ds), ds.universe, ok)
    if not ok:
        trace.timesteps = [t for t in timesteps if t in ckpts]
        raise TrainingDiverged(f"non-finite loss at step {len(losses)}", trace)
    return trace


def replay_from(trace: TrainingTrace, t: int, ds_variant: LabeledDataset) -> np.ndarray:
    """Resume from stored ``theta^t`` on ``ds_variant`` with the trace's schedule restricted to its ids."""
    c = trace.checkpoint(t)
    if ds_variant.universe != trace.universe:
        raise TrainingError("dataset variant comes from a different universe than the trace")
    theta, _, _, ok = _run(ds_variant, trace.config, c.theta.copy(), c.state, t, set())
    if not ok:
        raise TrainingDiverged(f"replay from step {t} diverged", trace)
    return theta
