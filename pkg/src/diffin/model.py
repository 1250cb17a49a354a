"""Small differentiable classifiers over a flat float64 parameter vector.

Parameter layout (``LAYOUT_VERSION`` 1): for each layer in input-to-output order,
the weight matrix of shape ``(out, in)`` in row-major order followed by its bias
vector.  With ``num_classes == 2`` the output layer has a single logit (sigmoid
cross-entropy); otherwise it has ``num_classes`` logits (softmax cross-entropy).

The ``quadratic`` architecture is a test stub: ``loss = 0.5 * curvature * ||theta - x||^2``
with ``p == d_in`` and the label ignored.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

LAYOUT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    architecture: str  # logistic | mlp | quadratic
    d_in: int
    num_classes: int = 2
    hidden_sizes: tuple[int, ...] = ()
    activation: str = "tanh"  # relu | tanh
    loss: str = "cross_entropy"  # cross_entropy | mse
    curvature: float = 1.0  # quadratic stub only

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.architecture not in ("logistic", "mlp", "quadratic"):
            raise ModelError(f"unknown architecture {self.architecture!r}")
        if self.d_in < 1 or self.num_classes < 2:
            raise ModelError("d_in must be >= 1 and num_classes >= 2")
        if self.architecture == "mlp" and (not self.hidden_sizes or min(self.hidden_sizes) < 1):
            raise ModelError("mlp needs hidden sizes >= 1")
        if self.architecture != "mlp" and self.hidden_sizes:
            raise ModelError("hidden_sizes only apply to mlp")
        if self.activation not in ("relu", "tanh"):
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.loss not in ("cross_entropy", "mse"):
            raise ModelError(f"unknown loss {self.loss!r}")

    @property
    def out_dim(self) -> int:
        return 1 if self.num_classes == 2 else self.num_classes

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        if self.architecture == "quadratic":
            return []
        sizes = [self.d_in, *self.hidden_sizes, self.out_dim]
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]

    @property
    def p(self) -> int:
        if self.architecture == "quadratic":
            return self.d_in
        return sum(o * i + o for o, i in self.layer_shapes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "hidden_sizes": tuple(d.get("hidden_sizes", ()))})


def init_params(spec: ModelSpec, seed: int, scale: float | None = None) -> np.ndarray:
    """Gaussian weights with std ``scale`` (default 1/sqrt(fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    if spec.architecture == "quadratic":
        return np.zeros(spec.p)
    chunks = []
    for out, inp in spec.layer_shapes:
        std = scale if scale is not None else 1.0 / np.sqrt(inp)
        chunks.append(std * rng.standard_normal(out * inp))
        chunks.append(np.zeros(out))
    return np.concatenate(chunks)


def unflatten(spec: ModelSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    layers, i = [], 0
    for out, inp in spec.layer_shapes:
        w = theta[i : i + out * inp].reshape(out, inp)
        i += out * inp
        b = theta[i : i + out]
        i += out
        layers.append((w, b))
    return layers


def _check(spec: ModelSpec, theta: np.ndarray, x: np.ndarray) -> None:
    if theta.shape != (spec.p,):
        raise ModelError(f"parameter vector has length {theta.shape}, expected {spec.p}")
    if not np.all(np.isfinite(theta)):
        raise ModelError("non-finite parameters")
    if x.ndim != 2 or x.shape[1] != spec.d_in:
        raise ModelError(f"feature dimension mismatch: expected {spec.d_in}")


def _as_batch(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim == 1:
        x, y = x[None, :], y.reshape(1)
    return x, y


def _act(spec, a):
    return np.tanh(a) if spec.activation == "tanh" else np.maximum(a, 0.0)


def _act_grad(spec, a, h):
    if spec.activation == "tanh":
        return 1.0 - h * h
    return (a > 0).astype(np.float64)  # subgradient 0 at the kink


def forward(spec: ModelSpec, theta: np.ndarray, x: np.ndarray):
    """Returns (outputs, pre-activations per hidden layer, inputs per layer)."""
    layers = unflatten(spec, theta)
    h = x
    pre, inputs = [], []
    for li, (w, b) in enumerate(layers):
        inputs.append(h)
        a = h @ w.T + b
        if li < len(layers) - 1:
            pre.append(a)
            h = _act(spec, a)
        else:
            h = a
    return h, pre, inputs


def _output_loss(spec: ModelSpec, out: np.ndarray, y: np.ndarray):
    """Per-sample loss and d loss / d output."""
    n = out.shape[0]
    if spec.num_classes == 2:
        s = out[:, 0]
        t = y.astype(np.float64)
        if spec.loss == "cross_entropy":
            # softplus of the signed margin; avoids cancelling log(1 + e^s) against s
            loss = np.logaddexp(0.0, (1.0 - 2.0 * t) * s)
            sig = np.where(s >= 0, 1.0 / (1.0 + np.exp(-np.abs(s))), np.exp(-np.abs(s)) / (1.0 + np.exp(-np.abs(s))))
            return loss, (sig - t)[:, None]
        r = s - t
        return 0.5 * r * r, r[:, None]
    onehot = np.zeros_like(out)
    onehot[np.arange(n), y] = 1.0
    if spec.loss == "cross_entropy":
        m = out.max(axis=1, keepdims=True)
        z = out - m
        lse = np.log(np.exp(z).sum(axis=1))
        loss = lse - z[np.arange(n), y]
        prob = np.exp(z - lse[:, None])
        return loss, prob - onehot
    r = out - onehot
    return 0.5 * (r * r).sum(axis=1), r


def per_sample_losses(spec: ModelSpec, theta, x, y) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    x, y = _as_batch(x, y)
    _check(spec, theta, x)
    if spec.architecture == "quadratic":
        r = theta[None, :] - x
        return 0.5 * spec.curvature * (r * r).sum(axis=1)
    out, _, _ = forward(spec, theta, x)
    return _output_loss(spec, out, y)[0]


def per_sample_grads(spec: ModelSpec, theta, x, y) -> np.ndarray:
    """Analytic gradients, one row per sample, shape ``(n, p)``."""
    theta = np.asarray(theta, dtype=np.float64)
    x, y = _as_batch(x, y)
    _check(spec, theta, x)
    if spec.architecture == "quadratic":
        return spec.curvature * (theta[None, :] - x)
    layers = unflatten(spec, theta)
    out, pre, inputs = forward(spec, theta, x)
    _, delta = _output_loss(spec, out, y)
    n = x.shape[0]
    blocks = []
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        gw = np.einsum("no,ni->noi", delta, inputs[li]).reshape(n, -1)
        blocks.append((gw, delta))
        if li > 0:
            h = inputs[li]
            delta = (delta @ w) * _act_grad(spec, pre[li - 1], h)
    return np.concatenate([np.concatenate([gw, gb], axis=1) for gw, gb in reversed(blocks)], axis=1)


def kahan_sum(rows: np.ndarray) -> np.ndarray:
    """Compensated (Neumaier) sum over axis 0, rows added in the given order."""
    rows = np.asarray(rows, dtype=np.float64)
    total = np.zeros(rows.shape[1:])
    comp = np.zeros(rows.shape[1:])
    for r in rows:
        t = total + r
        big = np.abs(total) >= np.abs(r)
        comp += np.where(big, (total - t) + r, (r - t) + total)
        total = t
    return total + comp


def kahan_mean(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows)
    if rows.shape[0] == 0:
        raise ModelError("empty batch")
    return kahan_sum(rows) / rows.shape[0]


def loss_sample(spec: ModelSpec, theta, x, y) -> float:
    return float(per_sample_losses(spec, theta, x, y)[0])


def loss_batch(spec: ModelSpec, theta, x, y) -> float:
    """Mean loss over the batch ``(x, y)``; order of rows only affects rounding at the 1e-16 level."""
    x, y = _as_batch(x, y)
    if x.shape[0] == 0:
        raise ModelError("empty batch")
    return float(kahan_mean(per_sample_losses(spec, theta, x, y)[:, None])[0])


def grad_sample(spec: ModelSpec, theta, x, y) -> np.ndarray:
    return per_sample_grads(spec, theta, x, y)[0]


def grad_batch(spec: ModelSpec, theta, x, y) -> np.ndarray:
    """Mean of per-sample gradients, accumulated in row order with compensation."""
    x, y = _as_batch(x, y)
    if x.shape[0] == 0:
        raise ModelError("empty batch")
    return kahan_mean(per_sample_grads(spec, theta, x, y))


def accuracy(spec: ModelSpec, theta, x, y) -> float:
    x, y = _as_batch(x, y)
    if spec.architecture == "quadratic":
        raise ModelError("quadratic stub has no predictions")
    out, _, _ = forward(spec, np.asarray(theta, dtype=np.float64), x)
    pred = (out[:, 0] > 0).astype(np.int64) if spec.num_classes == 2 else out.argmax(axis=1)
    return float(np.mean(pred == y))


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    mode: str  # coordinates | directions
    nondifferentiable: bool = False
    nonfinite: bool = False
    details: dict = field(default_factory=dict)


def _near_kink(spec: ModelSpec, theta, x, step: float) -> bool:
    if spec.architecture != "mlp" or spec.activation != "relu":
        return False
    _, pre, inputs = forward(spec, theta, x[None, :])
    for a, h_in in zip(pre, inputs):
        tol = step * (1.0 + np.abs(h_in).sum())
        if np.any(np.abs(a) <= tol):
            return True
    return False


def check_gradient(
    spec: ModelSpec, theta, x, y, step: float = 1e-5, max_coords: int = 200, seed: int = 0
) -> GradCheckReport:
    """Compare the analytic gradient with central differences of ``loss_sample``.

    Coordinate-wise when ``p <= max_coords``, otherwise along 64 seeded random
    unit directions.  The error is normwise: ``max|analytic - fd| / max(max|analytic|, max|fd|)``.
    """
    if step <= 0:
        raise ModelError("step must be > 0")
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    f = lambda th: loss_sample(spec, th, x, y)  # noqa: E731
    try:
        f0 = f(theta)
        g = grad_sample(spec, theta, x, y)
    except ModelError:
        return GradCheckReport(float("nan"), 0, "coordinates", nonfinite=True)
    if not np.isfinite(f0) or not np.all(np.isfinite(g)):
        return GradCheckReport(float("nan"), 0, "coordinates", nonfinite=True)
    if spec.p <= max_coords:
        dirs = np.eye(spec.p)
        mode = "coordinates"
    else:
        rng = np.random.default_rng(seed)
        dirs = rng.standard_normal((64, spec.p))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        mode = "directions"
    analytic = dirs @ g
    fd = np.array([(f(theta + step * v) - f(theta - step * v)) / (2 * step) for v in dirs])
    if not np.all(np.isfinite(fd)):
        return GradCheckReport(float("nan"), len(dirs), mode, nonfinite=True)
    scale = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-300)
    err = float(np.abs(analytic - fd).max() / scale)
    return GradCheckReport(err, len(dirs), mode, nondifferentiable=_near_kink(spec, theta, x, step))


def save_params(path: str | Path, theta: np.ndarray, spec: ModelSpec | None = None) -> None:
    """Write ``theta`` as little-endian float64 plus a ``.json`` sidecar."""
    path = Path(path)
    theta = np.asarray(theta, dtype=np.float64)
    path.write_bytes(theta.astype("<f8").tobytes())
    side = {"spec": spec.to_dict() if spec else None, "p": int(theta.size), "layout_version": LAYOUT_VERSION}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def load_params(path: str | Path) -> tuple[np.ndarray, ModelSpec | None]:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    if side.get("layout_version") != LAYOUT_VERSION:
        raise ModelError(f"unsupported layout version {side.get('layout_version')}")
    theta = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    if theta.size != side["p"]:
        raise ModelError("parameter file length does not match sidecar")
    spec = ModelSpec.from_dict(side["spec"]) if side.get("spec") else None
    return theta, spec
