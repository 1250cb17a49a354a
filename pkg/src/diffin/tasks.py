"""Evaluation pipelines: label-noise cleaning, parameter-edit deletion and coreset selection.

Reports hold fractions internally and serialize on the percent scale.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import LabeledDataset, NoiseMask, round_half_up
from .influence import InfluenceScore
from .model import accuracy
from .trainer import TrainConfig, train


class TaskError(ValueError):
    pass


def _pct(x):
    return None if x is None else 100.0 * x


def _write_csv(path: str | Path, header: list[str], rows: list[list]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _dump(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def rank(scores: Sequence[float], descending: bool) -> list[int]:
    """Indices ordered by score, ties broken by ascending index."""
    s = np.asarray(scores, dtype=np.float64)
    key = -s if descending else s
    return [int(i) for i in np.lexsort((np.arange(s.size), key))]


def _values(scores: Sequence[InfluenceScore], n: int) -> np.ndarray:
    if len(scores) != n:
        raise TaskError(f"expected {n} scores, got {len(scores)}")
    vals = np.empty(n)
    seen = np.zeros(n, dtype=bool)
    for s in scores:
        if not 0 <= s.index < n or seen[s.index]:
            raise TaskError("scores must cover each sample exactly once")
        seen[s.index] = True
        vals[s.index] = s.scalar
    return vals


# --- cleaning -----------------------------------------------------------------


@dataclass(frozen=True)
class CleaningReport:
    estimator: str
    target: str
    rates: tuple[float, ...]
    selected: tuple[int, ...]
    found: tuple[int, ...]
    noise_count: int
    precision: tuple[float, ...]  # found / selected
    precision_all_noise: tuple[float, ...]  # found / all noise

    def to_dict(self) -> dict:
        return {
            "task": "clean",
            "estimator": self.estimator,
            "target": self.target,
            "noise_count": self.noise_count,
            "scale": "percent",
            "table_normalization": "precision_all_noise",
            "rows": [
                {
                    "rate": _pct(r),
                    "selected": k,
                    "found": f,
                    "precision": _pct(p),
                    "precision_all_noise": _pct(q),
                }
                for r, k, f, p, q in zip(self.rates, self.selected, self.found, self.precision, self.precision_all_noise)
            ],
        }

    def write(self, out_dir: str | Path, stem: str = "clean") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        (out / f"{stem}.json").write_text(_dump(d))
        keys = ["rate", "selected", "found", "precision", "precision_all_noise"]
        _write_csv(out / f"{stem}.csv", keys, [[repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys] for r in d["rows"]])


def clean(
    scores: Sequence[InfluenceScore],
    mask: NoiseMask,
    rates: Sequence[float] = (0.2, 0.3, 0.4),
    descending: bool | None = None,
) -> CleaningReport:
    """Flag the top ``round(r * N)`` suspects for each rate.

    Self-influence ranks descending.  Every other target ranks ascending: the most
    negative score is the sample whose removal lowers the target loss most.
    """
    n = mask.flipped.size
    vals = _values(scores, n)
    target = scores[0].target if scores else "self_loss"
    estimator = scores[0].estimator if scores else ""
    if descending is None:
        descending = target == "self_loss"
    order = rank(vals, descending)
    n_noise = int(mask.flipped.sum())
    sel, found, prec, prec_all = [], [], [], []
    for r in rates:
        if not 0 < r <= 1:
            raise TaskError("selection rate must lie in (0, 1]")
        k = round_half_up(r * n)
        f = int(mask.flipped[order[:k]].sum())
        sel.append(k)
        found.append(f)
        prec.append(f / k if k else 0.0)
        prec_all.append(f / n_noise if n_noise else 0.0)
    return CleaningReport(estimator, target, tuple(rates), tuple(sel), tuple(found), n_noise, tuple(prec), tuple(prec_all))


# --- deletion -----------------------------------------------------------------


@dataclass(frozen=True)
class DeletionReport:
    accuracy_noisy: float
    accuracy_edited: float
    accuracy_oracle: float | None
    removed: int

    @property
    def recovery_ratio(self) -> float | None:
        if self.accuracy_oracle is None or self.accuracy_oracle == self.accuracy_noisy:
            return None
        return (self.accuracy_edited - self.accuracy_noisy) / (self.accuracy_oracle - self.accuracy_noisy)

    def to_dict(self) -> dict:
        return {
            "task": "delete",
            "scale": "percent",
            "removed": self.removed,
            "accuracy_noisy": _pct(self.accuracy_noisy),
            "accuracy_edited": _pct(self.accuracy_edited),
            "accuracy_oracle": _pct(self.accuracy_oracle),
            "recovery_ratio": self.recovery_ratio,
        }

    def write(self, out_dir: str | Path, stem: str = "delete") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        (out / f"{stem}.json").write_text(_dump(d))
        keys = ["removed", "accuracy_noisy", "accuracy_edited", "accuracy_oracle", "recovery_ratio"]
        _write_csv(out / f"{stem}.csv", keys, [[repr(d[k]) if isinstance(d[k], float) else d[k] for k in keys]])


def edit_params(theta_star: np.ndarray, influence_params: dict[int, np.ndarray], Z: Sequence[int]) -> np.ndarray:
    """``theta* + sum_{z in Z} I_theta(z)``, summed in ascending index order."""
    out = np.array(theta_star, dtype=np.float64, copy=True)
    for z in sorted({int(i) for i in Z}):
        if z not in influence_params:
            raise TaskError(f"missing parameter influence for sample {z}")
        out = out + influence_params[z]
    return out


def delete(
    theta_star: np.ndarray,
    influence_params: dict[int, np.ndarray],
    Z: Sequence[int],
    spec=None,
    eval_set: LabeledDataset | None = None,
    theta_oracle: np.ndarray | None = None,
) -> tuple[np.ndarray, DeletionReport | None]:
    edited = edit_params(theta_star, influence_params, Z)
    if spec is None or eval_set is None:
        return edited, None

    def acc(th):
        return accuracy(spec, th, eval_set.features, eval_set.labels)

    report = DeletionReport(
        acc(theta_star), acc(edited), acc(theta_oracle) if theta_oracle is not None else None, len(set(Z))
    )
    return edited, report


# --- coreset ------------------------------------------------------------------


@dataclass(frozen=True)
class CoresetReport:
    ratio: float
    retained: tuple[int, ...]
    accuracy: float
    selector: str

    def to_dict(self) -> dict:
        return {
            "task": "coreset",
            "scale": "percent",
            "selector": self.selector,
            "ratio": _pct(self.ratio),
            "size": len(self.retained),
            "accuracy": _pct(self.accuracy),
            "retained": list(self.retained),
        }

    def write(self, out_dir: str | Path, stem: str = "coreset") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        (out / f"{stem}.json").write_text(_dump(d))
        keys = ["selector", "ratio", "size", "accuracy"]
        _write_csv(out / f"{stem}.csv", keys, [[repr(d[k]) if isinstance(d[k], float) else d[k] for k in keys]])


def coreset_size(n: int, ratio: float) -> int:
    if not 0 < ratio <= 1:
        raise TaskError("coreset ratio must lie in (0, 1]")
    k = round_half_up(ratio * n)
    if k < 1:
        raise TaskError("coreset would be empty")
    return k


def select_coreset(scores: Sequence[InfluenceScore], ratio: float, n: int) -> list[int]:
    """Top ``round(ratio * N)`` by influence on the training loss, ties by ascending index."""
    vals = _values(scores, n)
    return sorted(rank(vals, descending=True)[: coreset_size(n, ratio)])


def random_coreset(n: int, ratio: float, seed: int) -> list[int]:
    k = coreset_size(n, ratio)
    return sorted(int(i) for i in np.random.default_rng(seed).choice(n, size=k, replace=False))


def retrain_on(ds: LabeledDataset, keep: Sequence[int], cfg: TrainConfig) -> np.ndarray:
    """Train from scratch on ``keep``.  A strict subset gets its own data order seeded from its indices."""
    keep = sorted({int(i) for i in keep})
    if not keep:
        raise TaskError("coreset is empty")
    if len(keep) == len(ds):
        return train(ds, cfg).final
    h = hashlib.sha256(json.dumps([cfg.seed, keep]).encode()).digest()
    sub = ds.subset(keep).reindexed()
    sub_cfg = replace(cfg, seed=int.from_bytes(h[:4], "little"), batch_size=min(cfg.batch_size, len(keep)))
    return train(sub, sub_cfg).final


def coreset(
    scores_train_loss: Sequence[InfluenceScore] | None,
    ratio: float,
    ds: LabeledDataset,
    cfg: TrainConfig,
    test_set: LabeledDataset,
    keep: Sequence[int] | None = None,
    selector: str | None = None,
) -> CoresetReport:
    """Select (or take ``keep``), retrain and report clean-test accuracy."""
    if keep is None:
        if scores_train_loss is None:
            raise TaskError("need scores or an explicit index set")
        keep = select_coreset(scores_train_loss, ratio, len(ds))
        selector = selector or scores_train_loss[0].estimator
    theta = retrain_on(ds, keep, cfg)
    acc = accuracy(cfg.model, theta, test_set.features, test_set.labels)
    return CoresetReport(ratio, tuple(sorted(keep)), acc, selector or "explicit")
