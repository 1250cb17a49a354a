"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Standard instance: two_moons with N=200 training samples (seed 0), a clean
validation set of 400 (seed 1) and a clean test set of 400 (seed 2); MLP(16, tanh),
SGD with lr 0.3, batch 20, T=400 and m=5 uniformly sampled checkpoints.
"""

import json
import time

import numpy as np
import pytest

from diffin.cli import main
from diffin.dataset import inject_label_noise, make_synthetic
from diffin.influence import (
    DiffInConfig,
    HvpConfig,
    diff_term,
    diff_term_momentum,
    hvp_fd,
    load_param_influence,
    save_param_influence,
    score_all,
)
from diffin.model import ModelSpec, accuracy, check_gradient, grad_batch
from diffin.optimizer import OptimizerConfig, OptimizerState, adam_general_lr, alpha_coeff, step
from diffin.oracle import (
    error_bound,
    estimate_constants,
    group_retrain,
    lds_score,
    loo_all,
    pearson,
    random_groups,
    retrain_many,
    spearman,
)
from diffin.tasks import clean, coreset, delete, random_coreset
from diffin.trainer import TrainConfig, train

from .conftest import quad_cfg, quad_ds
from .oracles import logistic_hessian

SPEC = ModelSpec("mlp", 2, 2, (16,), "tanh")


def standard_config(seed=0):
    return TrainConfig(SPEC, OptimizerConfig("sgd", lr=0.3), 20, 400, seed, "uniform", 5)


@pytest.fixture
def verdict(capsys):
    def report(n, name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}: criterion {n} [{name}] {detail}")
        assert ok, f"criterion {n} ({name}) not met: {detail}"

    return report


@pytest.fixture(scope="module")
def data():
    return (
        make_synthetic("two_moons", 200, 0.1, 0),
        make_synthetic("two_moons", 400, 0.1, 1),
        make_synthetic("two_moons", 400, 0.1, 2),
    )


@pytest.fixture(scope="module")
def standard(data):
    tr_ds, va, _ = data
    cfg = standard_config()
    trace = train(tr_ds, cfg)
    t0 = time.perf_counter()
    exact, _ = loo_all(tr_ds, cfg, {"validation": va}, trace.final)
    loo_seconds = time.perf_counter() - t0
    scores = {est: score_all(trace, tr_ds, est, "validation_loss", va) for est in ("diffin", "if")}
    return {"cfg": cfg, "trace": trace, "exact": exact, "scores": scores, "loo_seconds": loo_seconds}


@pytest.fixture(scope="module")
def noisy_runs(data):
    tr_ds, va, _ = data
    runs = []
    for s in range(5):
        noisy, mask = inject_label_noise(tr_ds, 0.2, s)
        trace = train(noisy, standard_config(s))
        runs.append((noisy, mask, trace))
    return runs


def test_criterion_01_gradient_correctness(verdict):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst, checked, skipped = 0.0, 0, 0
    for spec in (ModelSpec("logistic", 2), SPEC, ModelSpec("mlp", 2, 2, (16,), "relu")):
        assert spec.p <= 1000
        for _ in range(100):
            theta = rng.standard_normal(spec.p)
            r = check_gradient(spec, theta, rng.standard_normal(2), int(rng.integers(2)))
            if r.nondifferentiable:
                skipped += 1
                continue
            worst = max(worst, r.max_rel_err)
            checked += 1
    elapsed = time.perf_counter() - t0
    verdict(
        1,
        "gradient correctness",
        worst <= 1e-6 and elapsed < 10.0,
        f"max_rel_err={worst:.2e} over {checked} pairs ({skipped} at relu kinks), {elapsed:.2f}s",
    )


def test_criterion_02_hvp_correctness(verdict):
    rng = np.random.default_rng(1)
    d, n = 20, 200
    X = rng.standard_normal((n, d))
    y = rng.integers(0, 2, n)
    spec = ModelSpec("logistic", d)
    theta = 0.3 * rng.standard_normal(d + 1)
    H = logistic_hessian(theta, X)
    g = lambda th: grad_batch(spec, th, X, y)  # noqa: E731
    worst = 0.0
    for _ in range(50):
        v = rng.standard_normal(d + 1)
        ref = H @ v
        worst = max(worst, float(np.linalg.norm(hvp_fd(g, theta, v, HvpConfig()) - ref) / np.linalg.norm(ref)))
    zero = hvp_fd(g, theta, np.zeros(d + 1))
    verdict(2, "hvp correctness", worst <= 1e-3 and not np.any(zero), f"max relative error {worst:.2e}; hvp(0) exactly 0")


def test_criterion_03_optimizer_identities(verdict, data):
    tr_ds = data[0]
    sgd = train(tr_ds, TrainConfig(SPEC, OptimizerConfig("sgd", lr=0.3), 20, 500, 0, "all"))
    mom = train(tr_ds, TrainConfig(SPEC, OptimizerConfig("sgd_momentum", lr=0.3, beta=0.0), 20, 500, 0, "all"))
    bitwise = all(np.array_equal(sgd.checkpoint(t).theta, mom.checkpoint(t).theta) for t in range(501))
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        b1, b2 = float(rng.uniform(0, 0.99)), float(rng.uniform(0, 0.999))
        cfg = OptimizerConfig("adam", lr=float(rng.uniform(1e-4, 1.0)), beta1=b1, beta2=b2)
        p = 8
        st = OptimizerState(int(rng.integers(0, 100)), rng.standard_normal(p), rng.uniform(0, 3, p))
        theta, G = rng.standard_normal(p), rng.standard_normal(p)
        direct, _ = step(cfg, st, theta, G)
        reform = theta - adam_general_lr(cfg, st, G) * ((1 - b1) * G + b1 * st.M)
        worst = max(worst, float(np.max(np.abs(direct - reform))))
    verdict(
        3,
        "optimizer identities",
        bitwise and worst <= 1e-12,
        f"momentum(beta=0) == sgd bitwise over 500 steps: {bitwise}; adam reformulation max diff {worst:.1e}",
    )


def test_criterion_04_estimator_reduction(verdict):
    rng = np.random.default_rng(3)
    ds = quad_ds(rng.normal(0, 1, 12))
    sgd = train(ds, quad_cfg(T=10, lr=0.1, batch_size=3, init=(1.5,)))
    mom = train(ds, quad_cfg(T=10, lr=0.1, batch_size=3, init=(1.5,), kind="sgd_momentum", beta=0.0))
    worst = max(
        float(np.max(np.abs(diff_term_momentum(mom, t, z, ds) - diff_term(sgd, t, z, ds))))
        for t in range(11)
        for z in range(12)
    )
    a = alpha_coeff(OptimizerConfig("sgd", lr=0.1), 3, 5, 100)
    verdict(4, "estimator reduction", worst <= 1e-12 and a == -1e-6, f"max |momentum - sgd| = {worst:.1e}; a_tk = {a!r}")


def test_criterion_05_loo_correlation(verdict, standard):
    y = [e.delta_loss["validation"] for e in standard["exact"]]
    d = pearson([s.scalar for s in standard["scores"]["diffin"]], y)
    f = pearson([s.scalar for s in standard["scores"]["if"]], y)
    verdict(
        5,
        "LOO correlation",
        d >= 0.5 and d > f,
        f"pearson diffin={d:.3f} if={f:.3f} (needs diffin >= 0.5 and > if); "
        f"{len(y)} retrains in {standard['loo_seconds']:.1f}s",
    )


def test_criterion_06_lds(verdict, data, standard):
    tr_ds, va, _ = data
    groups = random_groups(tr_ds.N, 20, 5, 0)
    res, _ = retrain_many(tr_ds, standard["cfg"], groups, {"validation": va}, standard["trace"].final)
    effects = [r.delta_loss["validation"] for r in res]
    d = lds_score(groups, [s.scalar for s in standard["scores"]["diffin"]], effects)
    f = lds_score(groups, [s.scalar for s in standard["scores"]["if"]], effects)
    verdict(6, "LDS", d > f and d >= 0.2, f"LDS diffin={d:.3f} if={f:.3f} (needs diffin > if and >= 0.2)")


def test_criterion_07_data_cleaning(verdict, data, noisy_runs):
    va = data[1]
    self_prec, val_prec = [], []
    for noisy, mask, trace in noisy_runs:
        s = score_all(trace, noisy, "diffin", "self_loss")
        v = score_all(trace, noisy, "diffin", "validation_loss", va)
        self_prec.append(clean(s, mask, (0.2,)).to_dict()["rows"][0]["precision"])
        val_prec.append(clean(v, mask, (0.2,)).to_dict()["rows"][0]["precision"])
    wins = sum(a >= b for a, b in zip(self_prec, val_prec))
    mean_self = float(np.mean(self_prec))
    verdict(
        7,
        "data cleaning",
        mean_self >= 50.0 and wins >= 4,
        f"self precision@20% per seed {self_prec} (mean {mean_self:.1f}, needs >= 50); "
        f"validation {val_prec}; self >= validation in {wins}/5 seeds (needs 4)",
    )


def test_criterion_08_data_deletion(verdict, data, noisy_runs, tmp_path):
    test_set = data[2]
    noisy, mask, trace = noisy_runs[0]
    params = score_all(trace, noisy, "diffin", "parameters")
    save_param_influence(params, tmp_path / "p.bin")
    infl = load_param_influence(tmp_path / "p.bin")
    Z = mask.indices.tolist()
    oracle = group_retrain(noisy, trace.config, Z, theta_star=trace.final)
    _, rep = delete(trace.final, infl, Z, SPEC, test_set, oracle.theta_minus)
    same, _ = delete(trace.final, infl, [])
    ratio = rep.recovery_ratio
    ok = ratio is not None and ratio >= 0.5 and np.array_equal(same, trace.final)
    verdict(
        8,
        "data deletion",
        ok,
        f"accuracy noisy={rep.accuracy_noisy:.4f} edited={rep.accuracy_edited:.4f} oracle={rep.accuracy_oracle:.4f} "
        f"recovery={ratio if ratio is None else round(ratio, 3)} (needs >= 0.5); delete(empty) identity holds",
    )


def test_criterion_09_coreset(verdict, data):
    tr_ds, _, test_set = data
    ours, rand = [], []
    for s in range(5):
        cfg = standard_config(s)
        trace = train(tr_ds, cfg)
        scores = score_all(trace, tr_ds, "diffin", "training_loss")
        ours.append(coreset(scores, 0.3, tr_ds, cfg, test_set).accuracy)
        keep = random_coreset(tr_ds.N, 0.3, s)
        rand.append(coreset(None, 0.3, tr_ds, cfg, test_set, keep, "random").accuracy)
    a, b = float(np.mean(ours)), float(np.mean(rand))
    verdict(9, "coreset", a >= b, f"mean accuracy at ratio 0.3: diffin={a:.4f} random={b:.4f} over 5 seeds")


def test_criterion_10_error_bound(verdict, data, standard):
    tr_ds = data[0]
    trace = standard["trace"]
    params = score_all(trace, tr_ds, "diffin", "parameters")
    c = estimate_constants(trace, tr_ds, probes=20, seed=0, extra_params=[e.theta_minus for e in standard["exact"]])
    bound = error_bound(c)
    errs = [float(np.linalg.norm(p.value - e.I_theta)) for p, e in zip(params, standard["exact"])]
    worst = max(errs)
    verdict(
        10,
        "error bound",
        all(e <= bound for e in errs),
        f"max |I - I_exact| = {worst:.3e}, bound = {bound:.3e} ({c.label}: ell={c.ell:.3f} g={c.g:.3f} C={c.C:.3f}), "
        f"slack {bound - worst:.3e}",
    )


def _pipeline_config(tmp_path):
    cfg = {
        "schema_version": 1,
        "seed": 0,
        "output_dir": "out",
        "dataset": {
            "source": "synthetic",
            "kind": "two_moons",
            "n": 160,
            "noise_sd": 0.1,
            "seed": 0,
            "noise": {"rate": 0.2, "seed": 1},
            "split": {"train": 0.5, "val": 0.25, "test": 0.25, "seed": 0},
        },
        "model": {"architecture": "mlp", "hidden_sizes": [16], "activation": "tanh"},
        "optimizer": {"kind": "sgd", "lr": 0.3},
        "trainer": {"T": 120, "batch_size": 10, "m": 5},
        "task": {"oracle": {"mode": "loo_sample", "k": 20, "group_count": 6, "group_size": 5}},
    }
    p = tmp_path / "run.json"
    p.write_text(json.dumps(cfg))
    return p


def _pipeline(cfg, workers):
    steps = [
        ["train"],
        ["score", "--estimator", "diffin", "--target", "validation_loss"],
        ["score", "--estimator", "diffin", "--target", "self_loss"],
        ["score", "--estimator", "diffin", "--target", "training_loss"],
        ["score", "--estimator", "if", "--target", "validation_loss"],
        ["oracle"],
        ["oracle", "--mode", "groups"],
        ["report", "--task", "correlation"],
        ["report", "--task", "clean", "--target", "self_loss"],
        ["report", "--task", "coreset"],
    ]
    codes = [main(s + ["--config", str(cfg), "--workers", str(workers)]) for s in steps]
    out = cfg.parent / "out"
    files = sorted(p for p in list((out / "scores").iterdir()) + list((out / "reports").iterdir()) if p.is_file())
    return codes, {p.relative_to(out).as_posix(): p.read_bytes() for p in files}


def test_criterion_11_determinism(verdict, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    codes_a, files_a = _pipeline(_pipeline_config(tmp_path / "a"), 1)
    codes_b, files_b = _pipeline(_pipeline_config(tmp_path / "b"), 3)
    same = files_a == files_b and set(codes_a + codes_b) == {0}
    verdict(
        11,
        "determinism",
        same and any(k.endswith("scores.csv") or k.endswith(".csv") for k in files_a),
        f"{len(files_a)} score/report files byte-identical between --workers 1 and 3: {files_a == files_b}; exit codes {set(codes_a + codes_b)}",
    )
