"""Versioned JSON run configuration and the data/trainer objects it describes."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .dataset import LabeledDataset, NoiseMask, SplitSpec, inject_label_noise, load_csv, make_synthetic, split
from .influence import ESTIMATORS, DiffInConfig, HvpConfig, SolverConfig
from .model import ModelSpec
from .optimizer import OptimizerConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1
SEED_ENV = "DIFFIN_SEED"


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NoiseBlock(_Block):
    rate: float = Field(ge=0.0, le=1.0)
    seed: int


class SplitBlock(_Block):
    train: float = 0.5
    val: float = 0.25
    test: float = 0.25
    seed: int


class DatasetBlock(_Block):
    source: Literal["synthetic", "csv"]
    kind: Optional[Literal["two_gaussians", "two_moons"]] = None
    n: Optional[int] = None
    noise_sd: float = 0.1
    seed: Optional[int] = None
    path: Optional[str] = None
    num_classes: Optional[int] = None
    noise: Optional[NoiseBlock] = None
    split: SplitBlock

    @model_validator(mode="after")
    def _source_fields(self):
        if self.source == "synthetic" and (self.kind is None or self.n is None or self.seed is None):
            raise ValueError("synthetic datasets need kind, n and seed")
        if self.source == "csv" and self.path is None:
            raise ValueError("csv datasets need a path")
        return self


class ModelBlock(_Block):
    architecture: Literal["logistic", "mlp"] = "mlp"
    hidden_sizes: list[int] = [16]
    activation: Literal["tanh", "relu"] = "tanh"
    loss: Literal["cross_entropy", "mse"] = "cross_entropy"


class OptimizerBlock(_Block):
    kind: Literal["sgd", "sgd_momentum", "adam"] = "sgd"
    lr: float = 0.1
    schedule: Literal["constant", "step"] = "constant"
    decay_factor: float = 1.0
    decay_every: int = 1
    beta: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class TrainerBlock(_Block):
    T: int = Field(ge=1)
    batch_size: int = Field(ge=1)
    epochs: Optional[int] = None
    checkpoint_plan: Literal["uniform", "all", "last_only"] = "uniform"
    m: int = 5
    init_scale: Optional[float] = None


class HvpBlock(_Block):
    scheme: Literal["forward", "central"] = "central"
    delta: float = 1e-3
    floor: float = 1e-8


class SolverBlock(_Block):
    kind: Literal["cg", "lissa"] = "cg"
    iters: int = 500
    tol: float = 1e-8
    damping: Optional[float] = None
    probes: int = 20
    seed: int = 0


class InfluenceBlock(_Block):
    estimators: list[str] = ["diffin"]
    mode: Literal["collapsed_k_eq_t", "full_history", "momentum_generalized"] = "collapsed_k_eq_t"
    batch_proxy: Literal["auto", "recorded", "random"] = "auto"
    proxy_size: int = 64
    proxy_seed: int = 0
    m: Optional[int] = None
    hvp: HvpBlock = HvpBlock()
    solver: SolverBlock = SolverBlock()

    @field_validator("estimators")
    @classmethod
    def _known(cls, v):
        bad = [e for e in v if e not in ESTIMATORS]
        if bad:
            raise ValueError(f"unknown estimators {bad}; expected a subset of {list(ESTIMATORS)}")
        return v


class OracleBlock(_Block):
    mode: Literal["loo_all", "loo_sample", "groups"] = "loo_all"
    k: Optional[int] = None
    seed: int = 0
    group_count: int = 20
    group_size: int = 5


class TaskBlock(_Block):
    rates: list[float] = [0.2, 0.3, 0.4]
    ratio: float = 0.3
    oracle: OracleBlock = OracleBlock()


class RunConfig(_Block):
    schema_version: int
    seed: int
    output_dir: str
    dataset: DatasetBlock
    model: ModelBlock = ModelBlock()
    optimizer: OptimizerBlock = OptimizerBlock()
    trainer: TrainerBlock
    influence: InfluenceBlock = InfluenceBlock()
    task: TaskBlock = TaskBlock()

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}; expected {SCHEMA_VERSION}")
        return v

    # --- derived objects ---------------------------------------------------

    def model_spec(self, d_in: int, num_classes: int) -> ModelSpec:
        m = self.model
        hidden = tuple(m.hidden_sizes) if m.architecture == "mlp" else ()
        return ModelSpec(m.architecture, d_in, num_classes, hidden, m.activation, m.loss)

    def train_config(self, ds: LabeledDataset) -> TrainConfig:
        t = self.trainer
        T = t.T
        if t.epochs is not None:
            T = t.epochs * -(-len(ds) // t.batch_size)
        return TrainConfig(
            self.model_spec(ds.d_in, ds.num_classes),
            OptimizerConfig(**self.optimizer.model_dump()),
            t.batch_size,
            T,
            self.seed,
            t.checkpoint_plan,
            min(t.m, T),
            t.init_scale,
        )

    def diffin_config(self, target: str = "validation_loss") -> DiffInConfig:
        i = self.influence
        return DiffInConfig(i.mode, i.batch_proxy, i.proxy_size, i.proxy_seed, i.m, target, HvpConfig(**i.hvp.model_dump()))

    def solver_config(self) -> SolverConfig:
        return SolverConfig(**self.influence.solver.model_dump())

    def hash(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()


def load_config(path: str | Path) -> tuple[RunConfig, bool]:
    """Parse and validate; returns (config, seed_overridden)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    raw = json.loads(path.read_text())
    overridden = False
    env = os.environ.get(SEED_ENV)
    if env is not None:
        raw["seed"] = int(env)
        overridden = True
    cfg = RunConfig.model_validate(raw)
    if cfg.dataset.source == "csv":
        p = Path(cfg.dataset.path)
        if not p.is_absolute():
            p = path.parent / p
        if not p.exists():
            raise FileNotFoundError(f"dataset file not found: {p}")
        cfg.dataset.path = str(p)
    return cfg, overridden


def build_data(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset | None, LabeledDataset | None, NoiseMask | None]:
    """(train, val, test, noise mask).  Label noise touches the training split only."""
    d = cfg.dataset
    if d.source == "synthetic":
        full = make_synthetic(d.kind, d.n, d.noise_sd, d.seed)
    else:
        full = load_csv(d.path, d.num_classes)
    tr, va, te = split(full, SplitSpec(d.split.train, d.split.val, d.split.test, d.split.seed))
    mask = None
    if d.noise is not None and d.noise.rate > 0:
        tr, mask = inject_label_noise(tr, d.noise.rate, d.noise.seed)
    return tr, va, te, mask
