"""Labeled datasets: loading, synthetic generators, splits and label-noise injection.

Every dataset carries ``ids``, the sample indices in the *universe* it was drawn
from.  Subsets keep their parent's ids, which is what lets the trainer replay a
batch schedule restricted to surviving samples (leave-one-out, group removal).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset inputs."""


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    ids: np.ndarray | None = None
    universe: int | None = None

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise DatasetError("features must be a 2-d array")
        if x.shape[0] < 1:
            raise DatasetError("empty dataset")
        if x.shape[1] < 1:
            raise DatasetError("feature dimension must be >= 1")
        if y.shape != (x.shape[0],):
            raise DatasetError("labels must be a vector matching the number of rows")
        if self.num_classes < 2:
            raise DatasetError("num_classes must be >= 2")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise DatasetError("label out of range")
        if not np.all(np.isfinite(x)):
            raise DatasetError("non-finite feature value")
        ids = np.arange(x.shape[0]) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != y.shape or len(np.unique(ids)) != len(ids):
            raise DatasetError("ids must be distinct and one per sample")
        universe = int(ids.max()) + 1 if self.universe is None else int(self.universe)
        if ids.min() < 0 or ids.max() >= universe:
            raise DatasetError("ids must lie in [0, universe)")
        x.setflags(write=False)
        y.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "universe", universe)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def N(self) -> int:
        return len(self)

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> tuple[np.ndarray, int]:
        return self.features[i], int(self.labels[i])

    def subset(self, positions: Sequence[int], name: str | None = None) -> "LabeledDataset":
        """Rows at ``positions``; ids and universe are inherited."""
        pos = np.asarray(positions, dtype=np.int64)
        if pos.size == 0:
            raise DatasetError("empty dataset")
        return LabeledDataset(
            self.features[pos],
            self.labels[pos],
            self.num_classes,
            name or self.name,
            ids=self.ids[pos],
            universe=self.universe,
        )

    def without(self, positions: Sequence[int]) -> "LabeledDataset":
        """Drop rows at ``positions`` (e.g. the leave-one-out set D/z)."""
        drop = np.zeros(len(self), dtype=bool)
        drop[np.asarray(list(positions), dtype=np.int64)] = True
        return self.subset(np.flatnonzero(~drop))

    def reindexed(self, name: str | None = None) -> "LabeledDataset":
        """Same rows as a fresh universe with ids 0..N-1."""
        return LabeledDataset(self.features, self.labels, self.num_classes, name or self.name)

    def with_labels(self, labels: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            self.features, labels, self.num_classes, self.name, ids=self.ids, universe=self.universe
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.features.shape, dtype="<i8").tobytes())
        h.update(self.features.astype("<f8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        h.update(self.ids.astype("<i8").tobytes())
        h.update(f"{self.num_classes}:{self.universe}".encode())
        return h.hexdigest()


@dataclass(frozen=True)
class NoiseMask:
    flipped: np.ndarray  # boolean, one entry per sample
    original_labels: dict[int, int] = field(default_factory=dict)
    rate: float = 0.0

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.flipped)

    def restore(self, ds: LabeledDataset) -> LabeledDataset:
        labels = ds.labels.copy()
        for i, lab in self.original_labels.items():
            labels[i] = lab
        return ds.with_labels(labels)

    def to_json(self) -> dict:
        return {
            "rate": self.rate,
            "flipped": [int(i) for i in self.indices],
            "original_labels": {str(i): int(v) for i, v in sorted(self.original_labels.items())},
        }

    @classmethod
    def from_json(cls, obj: dict, n: int) -> "NoiseMask":
        flipped = np.zeros(n, dtype=bool)
        flipped[np.asarray(obj["flipped"], dtype=np.int64)] = True
        orig = {int(k): int(v) for k, v in obj["original_labels"].items()}
        return cls(flipped, orig, float(obj["rate"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path, n: int) -> "NoiseMask":
        return cls.from_json(json.loads(Path(path).read_text()), n)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 1.0
    val_fraction: float = 0.0
    test_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if min(fr) < 0:
            raise DatasetError("split fractions must be nonnegative")
        if abs(sum(fr) - 1.0) > 1e-12:
            raise DatasetError("split fractions must sum to 1")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def load_csv(path: str | Path, num_classes: int | None = None, name: str | None = None) -> LabeledDataset:
    """Read ``f0,...,f{d-1},label`` rows.  ``num_classes`` defaults to max label + 1."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError("empty dataset")
    header, body = rows[0], [r for r in rows[1:] if r]
    if not body:
        raise DatasetError("empty dataset")
    if header[-1].strip() != "label" or len(header) < 2:
        raise DatasetError("header must be f0,...,f{d-1},label")
    d = len(header) - 1
    feats = np.empty((len(body), d))
    labels = np.empty(len(body), dtype=np.int64)
    for r, row in enumerate(body, start=2):
        if len(row) != d + 1:
            raise DatasetError(f"row {r}: expected {d + 1} columns, got {len(row)}")
        try:
            feats[r - 2] = [float(v) for v in row[:d]]
        except ValueError:
            raise DatasetError(f"row {r}: non-numeric feature") from None
        try:
            labels[r - 2] = int(row[d])
        except ValueError:
            raise DatasetError(f"row {r}: label must be an integer") from None
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.min() < 0 or labels.max() >= max(k, 2):
        raise DatasetError("label out of range")
    return LabeledDataset(feats, labels, max(k, 2), name or path.stem)


def write_csv(ds: LabeledDataset, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(ds.d_in)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def make_synthetic(kind: str, n: int, noise_sd: float, seed: int) -> LabeledDataset:
    """Balanced binary 2-d data.  Class 0 gets the extra point when ``n`` is odd."""
    if n < 2:
        raise DatasetError("n must be >= 2")
    if noise_sd < 0:
        raise DatasetError("noise_sd must be >= 0")
    rng = np.random.default_rng(seed)
    n1 = n // 2
    n0 = n - n1
    if kind == "two_gaussians":
        means = np.array([[-1.0, -1.0], [1.0, 1.0]])
        y = np.repeat([0, 1], [n0, n1])
        x = means[y] + noise_sd * rng.standard_normal((n, 2))
    elif kind == "two_moons":
        a0 = np.linspace(0, np.pi, n0)
        a1 = np.linspace(0, np.pi, n1)
        x = np.vstack(
            [
                np.column_stack([np.cos(a0), np.sin(a0)]),
                np.column_stack([1 - np.cos(a1), 0.5 - np.sin(a1)]),
            ]
        )
        y = np.repeat([0, 1], [n0, n1])
        x = x + noise_sd * rng.standard_normal((n, 2))
    else:
        raise DatasetError(f"unknown synthetic kind {kind!r}")
    order = rng.permutation(n)
    return LabeledDataset(x[order], y[order], 2, kind)


def inject_label_noise(ds: LabeledDataset, rate: float, seed: int) -> tuple[LabeledDataset, NoiseMask]:
    """Flip ``round(rate * N)`` uniformly chosen labels to a uniformly chosen other class."""
    if not 0.0 <= rate <= 1.0:
        raise DatasetError("noise rate must lie in [0, 1]")
    n = len(ds)
    count = round_half_up(rate * n)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=count, replace=False)) if count else np.array([], dtype=np.int64)
    labels = ds.labels.copy()
    original = {}
    for i in idx:
        old = int(labels[i])
        shift = int(rng.integers(1, ds.num_classes))
        labels[i] = (old + shift) % ds.num_classes
        original[int(i)] = old
    flipped = np.zeros(n, dtype=bool)
    flipped[idx] = True
    return ds.with_labels(labels), NoiseMask(flipped, original, rate)


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_val = round_half_up(spec.val_fraction * n)
    n_test = round_half_up(spec.test_fraction * n)
    n_train = n - n_val - n_test
    sizes = (n_train, n_val, n_test)
    fr = (spec.train_fraction, spec.val_fraction, spec.test_fraction)
    for s, f in zip(sizes, fr):
        if (f > 0 and s <= 0) or s < 0:
            raise DatasetError("a requested split would be empty")
    return sizes


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n_train, n_val, _ = split_sizes(n, spec)
    perm = np.random.default_rng(spec.seed).permutation(n)
    return (
        np.sort(perm[:n_train]),
        np.sort(perm[n_train : n_train + n_val]),
        np.sort(perm[n_train + n_val :]),
    )


def split(ds: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset | None, ...]:
    """Disjoint train/val/test partition.  A zero-fraction split is returned as ``None``.

    Each part is re-indexed as its own universe so downstream training treats it as
    a fresh dataset.
    """
    parts = split_indices(len(ds), spec)
    out = []
    for idx, nm in zip(parts, ("train", "val", "test")):
        out.append(ds.subset(idx, f"{ds.name}-{nm}").reindexed() if idx.size else None)
    return tuple(out)
