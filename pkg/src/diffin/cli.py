"""Command-line entry point: ``diffin train|score|oracle|report``.

Exit codes: 0 success, 2 input error, 3 unsupported combination, 4 missing
prerequisite artifact, 5 numerical failure.  Logs go to stderr as one JSON
object per line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .config import RunConfig, build_data, load_config
from .dataset import DatasetError, NoiseMask
from .influence import (
    InfluenceError,
    NumericalError,
    UnsupportedError,
    check_combination,
    load_param_influence,
    save_param_influence,
    score_all,
    scores_from_csv,
    scores_to_csv,
    scores_to_json,
)
from .model import ModelError, accuracy
from .optimizer import OptimizerError
from .oracle import OracleError, lds_score, loo_all, loo_sample, pearson, random_groups, retrain_many, spearman
from .tasks import TaskError, clean, coreset, delete, random_coreset
from .trainer import TraceIntegrityError, TrainingDiverged, TrainingError, TrainingTrace, train

log = logging.getLogger("diffin")

EXIT_OK, EXIT_INPUT, EXIT_UNSUPPORTED, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4, 5


class MissingArtifact(RuntimeError):
    pass


def event(name: str, **fields) -> None:
    log.info(json.dumps({"event": name, "time": time.time(), **fields}, sort_keys=True, default=str))


class _Ctx:
    def __init__(self, args):
        self.args = args
        self.cfg, overridden = load_config(args.config)
        if overridden:
            event("seed_override", seed=self.cfg.seed, note="non-reproducible unless this log is kept")
        self.out = Path(args.out or self.cfg.output_dir)
        if not self.out.is_absolute():
            self.out = Path(args.config).parent / self.out
        self.train_ds, self.val, self.test, self.mask = build_data(self.cfg)
        self.tcfg = self.cfg.train_config(self.train_ds)

    @property
    def trace_dir(self) -> Path:
        return Path(self.args.trace) if getattr(self.args, "trace", None) else self.out / "trace"

    def trace(self) -> TrainingTrace:
        if not (self.trace_dir / "trace.json").exists():
            raise MissingArtifact(f"no trace at {self.trace_dir}; run `diffin train` first")
        return TrainingTrace.load(self.trace_dir, self.train_ds)

    def scores_path(self, estimator: str, target: str) -> Path:
        return self.out / "scores" / f"{estimator}_{target}.csv"

    def load_scores(self, estimator: str, target: str):
        p = self.scores_path(estimator, target)
        if not p.exists():
            raise MissingArtifact(f"missing scores {p}; run `diffin score --estimator {estimator} --target {target}`")
        return scores_from_csv(p)

    def targets(self):
        t = {"self": None}
        if self.val is not None:
            t["validation"] = self.val
        return t

    @property
    def workers(self) -> int:
        return self.args.workers or os.cpu_count() or 1


def cmd_train(ctx: _Ctx) -> int:
    out = ctx.trace_dir
    try:
        trace = train(ctx.train_ds, ctx.tcfg, log_every=max(1, ctx.tcfg.T // 10))
    except TrainingDiverged as e:
        e.trace.save(out)
        event("train_diverged", message=str(e), trace=str(out))
        return EXIT_NUMERIC
    trace.save(out)
    if ctx.mask is not None:
        ctx.mask.save(ctx.out / "noise_mask.json")
    event("train_done", trace=str(out), trace_hash=trace.hash(), T=trace.T, steps=trace.steps, final_loss=trace.losses[-1])
    return EXIT_OK


def cmd_score(ctx: _Ctx) -> int:
    a = ctx.args
    check_combination(a.estimator, a.target)
    trace = ctx.trace()
    t0 = time.perf_counter()
    scores = score_all(
        trace,
        ctx.train_ds,
        a.estimator,
        a.target,
        ctx.val,
        ctx.cfg.diffin_config(a.target),
        ctx.cfg.solver_config(),
        ctx.workers,
    )
    path = ctx.scores_path(a.estimator, a.target)
    path.parent.mkdir(parents=True, exist_ok=True)
    scores_to_csv(scores, path)
    scores_to_json(scores, path.with_suffix(".json"))
    if a.target == "parameters":
        save_param_influence(scores, path.with_suffix(".bin"))
    event("score_done", estimator=a.estimator, target=a.target, rows=len(scores), path=str(path), elapsed=time.perf_counter() - t0)
    return EXIT_OK


def cmd_oracle(ctx: _Ctx) -> int:
    a, oc = ctx.args, ctx.cfg.task.oracle
    trace = ctx.trace()
    mode = a.mode or oc.mode
    n = len(ctx.train_ds)
    cache = ctx.out / "oracle"
    if mode == "groups":
        groups = random_groups(n, oc.group_count, oc.group_size, oc.seed)
        _, fresh = retrain_many(ctx.train_ds, ctx.tcfg, groups, ctx.targets(), trace.final, cache, ctx.workers)
        (cache / "groups.json").write_text(json.dumps(groups))
        event("oracle_done", mode=mode, groups=len(groups), retrained=fresh)
        return EXIT_OK
    idx = None
    if mode == "loo_sample":
        k = a.k if a.k is not None else oc.k
        if k is None:
            raise OracleError("loo_sample needs k")
        idx = loo_sample(n, k, oc.seed)
    results, fresh = loo_all(ctx.train_ds, ctx.tcfg, ctx.targets(), trace.final, cache, ctx.workers, idx)
    (cache / "index.json").write_text(json.dumps([r.index for r in results]))
    event("oracle_done", mode=mode, entries=len(results), retrained=fresh, cached=len(results) - fresh)
    return EXIT_OK


def _report_correlation(ctx: _Ctx, est: str) -> dict:
    trace = ctx.trace()
    idx_file = ctx.out / "oracle" / "index.json"
    if not idx_file.exists():
        raise MissingArtifact("no oracle results; run `diffin oracle` first")
    idx = json.loads(idx_file.read_text())
    exact, fresh = loo_all(ctx.train_ds, ctx.tcfg, ctx.targets(), trace.final, ctx.out / "oracle", 1, idx)
    if fresh:
        event("oracle_refresh", retrained=fresh)
    est_scores = [s.scalar for s in ctx.load_scores(est, "validation_loss")]
    xs = [est_scores[i] for i in idx]
    ys = [r.delta_loss["validation"] for r in exact]
    rep = {"task": "correlation", "estimator": est, "samples": len(idx), "pearson": pearson(xs, ys), "spearman": spearman(xs, ys)}
    gfile = ctx.out / "oracle" / "groups.json"
    if gfile.exists():
        groups = json.loads(gfile.read_text())
        gres, _ = retrain_many(ctx.train_ds, ctx.tcfg, groups, ctx.targets(), trace.final, ctx.out / "oracle", 1)
        rep["lds"] = lds_score(groups, est_scores, [r.delta_loss["validation"] for r in gres])
    return rep


def cmd_report(ctx: _Ctx) -> int:
    a = ctx.args
    task, est = a.task, a.estimator
    out = ctx.out / "reports"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{task}_{est}"
    if task == "clean":
        if ctx.mask is None or not (ctx.out / "noise_mask.json").exists():
            raise MissingArtifact("cleaning needs a noise mask; configure dataset.noise and run `diffin train`")
        mask = NoiseMask.load(ctx.out / "noise_mask.json", len(ctx.train_ds))
        target = a.target or "self_loss"
        clean(ctx.load_scores(est, target), mask, ctx.cfg.task.rates).write(out, f"{stem}_{target}")
    elif task == "delete":
        if ctx.mask is None:
            raise MissingArtifact("deletion needs a noise mask to define the removed set")
        trace = ctx.trace()
        p = ctx.scores_path(est, "parameters").with_suffix(".bin")
        if not p.exists():
            raise MissingArtifact(f"missing parameter influence {p}; score with --target parameters")
        Z = [int(i) for i in ctx.mask.indices]
        (oracle,), _ = retrain_many(ctx.train_ds, ctx.tcfg, [Z], {}, trace.final, ctx.out / "oracle", 1)
        eval_set = ctx.test if ctx.test is not None else ctx.val
        _, rep = delete(trace.final, load_param_influence(p), Z, ctx.tcfg.model, eval_set, oracle.theta_minus)
        rep.write(out, stem)
    elif task == "coreset":
        eval_set = ctx.test if ctx.test is not None else ctx.val
        ratio = a.ratio if a.ratio is not None else ctx.cfg.task.ratio
        if est == "random":
            keep = random_coreset(len(ctx.train_ds), ratio, ctx.cfg.seed)
            rep = coreset(None, ratio, ctx.train_ds, ctx.tcfg, eval_set, keep, "random")
        else:
            rep = coreset(ctx.load_scores(est, "training_loss"), ratio, ctx.train_ds, ctx.tcfg, eval_set)
        rep.write(out, stem)
    elif task == "correlation":
        rep = _report_correlation(ctx, est)
        (out / f"{stem}.json").write_text(json.dumps(rep, indent=2, sort_keys=True))
        keys = sorted(k for k in rep if k not in ("task", "estimator"))
        (out / f"{stem}.csv").write_text(",".join(keys) + "\n" + ",".join(repr(rep[k]) for k in keys) + "\n")
    event("report_done", task=task, estimator=est, dir=str(out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffin", description="Training-data influence toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--trace", help="trace directory (default <out>/trace)")
        sp.add_argument("--workers", type=int, default=None, help="worker processes (default: all cores)")
        return sp

    common(sub.add_parser("train", help="train and write a trace"))
    s = common(sub.add_parser("score", help="score every training sample"))
    s.add_argument("--estimator", default="diffin", choices=["diffin", "diffin_f", "tracin", "if"])
    s.add_argument("--target", default="validation_loss", choices=["validation_loss", "self_loss", "training_loss", "parameters"])
    o = common(sub.add_parser("oracle", help="exact leave-one-out / group retraining"))
    o.add_argument("--mode", choices=["loo_all", "loo_sample", "groups"])
    o.add_argument("--k", type=int)
    r = common(sub.add_parser("report", help="task reports"))
    r.add_argument("--task", required=True, choices=["clean", "delete", "coreset", "correlation"])
    r.add_argument("--estimator", default="diffin", choices=["diffin", "diffin_f", "tracin", "if", "random"])
    r.add_argument("--target", choices=["validation_loss", "self_loss"])
    r.add_argument("--ratio", type=float)
    return p


COMMANDS = {"train": cmd_train, "score": cmd_score, "oracle": cmd_oracle, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr, force=True)
    args = build_parser().parse_args(argv)
    try:
        if args.workers is not None and args.workers < 1:
            raise ValueError("--workers must be >= 1")
        return COMMANDS[args.command](_Ctx(args))
    except UnsupportedError as e:
        code, msg = EXIT_UNSUPPORTED, str(e)
    except MissingArtifact as e:
        code, msg = EXIT_MISSING, str(e)
    except (TrainingDiverged, NumericalError, FloatingPointError) as e:
        code, msg = EXIT_NUMERIC, str(e)
    except ValidationError as e:
        code, msg = EXIT_INPUT, f"invalid config: {e.errors()[0]['loc']}: {e.errors()[0]['msg']}"
    except (
        FileNotFoundError,
        json.JSONDecodeError,
        DatasetError,
        ModelError,
        OptimizerError,
        TrainingError,
        TraceIntegrityError,
        InfluenceError,
        OracleError,
        TaskError,
        ValueError,
    ) as e:
        code, msg = EXIT_INPUT, str(e)
    event("error", exit_code=code, message=msg)
    print(f"diffin: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
