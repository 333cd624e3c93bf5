"""Gradient-based reconstruction of private training inputs from a stolen
gradient, at the client-SGD and server-aggregation attack surfaces."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data import Dataset
from .errors import ConfigError, NumericError, ShapeError
from .numcore import (
    FlatVector,
    ModelSpec,
    grad_match_batch_input_grad,
    grad_match_input_grad,
    layout,
    loss_and_param_grad,
    per_example_grads,
)

SURFACES = ("client_sgd", "server_aggregation")
INIT_STRATEGIES = ("random", "pattern4", "pattern16", "binary", "rgb", "exemplar")

# reconstructions with MSE below this are considered leaked
MSE_SUCCESS_THRESHOLD = 0.4


@dataclass
class TargetGradient:
    surface: str
    grad: FlatVector
    client_id: int = -1
    round: int = -1

    def __post_init__(self):
        if self.surface not in SURFACES:
            raise ConfigError(f"unknown attack surface {self.surface!r}")


@dataclass
class AttackConfig:
    init: str = "random"
    max_iters: int = 1000
    loss_threshold: float = 1e-10
    lr: float = 0.25
    optimizer: str = "gd"
    seed: int = 0
    # box-constrain x_rec each step; defended-leakage scenarios disable it
    # so failed reconstructions diverge past the MSE failure threshold
    clamp: bool = True

    def __post_init__(self):
        if self.init not in INIT_STRATEGIES:
            raise ConfigError(f"unknown init strategy {self.init!r}")
        if self.max_iters < 1 or self.lr <= 0 or self.loss_threshold < 0:
            raise ConfigError("need max_iters >= 1, lr > 0, threshold >= 0")
        if self.optimizer not in ("gd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ReconResult:
    x_rec: np.ndarray
    y_rec: int
    iterations: int
    final_loss: float
    loss_trace: list[float]
    mse: float | None = None
    ssim: float | None = None
    success: bool | None = None
    aborted: bool = False
    mse_trace: list[float] = field(default_factory=list)

    def iterations_to_success(self) -> int | None:
        """First iteration with MSE under the leak threshold, if any."""
        for i, m in enumerate(self.mse_trace):
            if m < MSE_SUCCESS_THRESHOLD:
                return i
        return None


def client_sgd_target(spec, params, x, label) -> TargetGradient:
    """Single-example gradient as stolen during a local SGD iteration."""
    grads = per_example_grads(spec, params, [(x, label)])
    return TargetGradient(surface="client_sgd", grad=grads[0])


def server_aggregation_target(
    spec, params, shard: Dataset, local_iters: int, batch_size: int, local_lr: float, rng
) -> TargetGradient:
    """Accumulated per-client gradient after local training, as shared with
    the server: (w(t) - w_k(t+1)) / local_lr."""
    w = params.copy()
    for _ in range(local_iters):
        idx = rng.choice(len(shard), size=min(batch_size, len(shard)), replace=False)
        batch = [(shard.images[i], shard.labels[i]) for i in idx]
        _, g = loss_and_param_grad(spec, w, batch)
        w = FlatVector(w.values - local_lr * g.values, w.segments)
    acc = (params.values - w.values) / local_lr
    return TargetGradient(surface="server_aggregation", grad=FlatVector(acc, w.segments))


def infer_label(target: TargetGradient, spec: ModelSpec) -> int:
    """Class whose final-layer bias-gradient entry is negative; with zero
    or several negative entries, the largest-magnitude entry wins (ties to
    the lowest class index)."""
    bias = target.grad.segment(f"b{len(spec.layer_dims) - 1}")
    negative = np.flatnonzero(bias < 0)
    if len(negative) == 1:
        return int(negative[0])
    return int(np.argmax(np.abs(bias)))


def infer_labels(target: TargetGradient, spec: ModelSpec, count: int) -> list[int]:
    """The `count` most-negative bias entries, for batch reconstruction."""
    bias = target.grad.segment(f"b{len(spec.layer_dims) - 1}")
    order = np.argsort(bias, kind="stable")
    return [int(i) for i in order[:count]]


def init_seed(strategy: str, shape, rng, exemplar=None) -> np.ndarray:
    """Dummy-seed image for the attack optimizer, values in [0, 1]."""
    rows, cols = shape
    if strategy == "random":
        return rng.uniform(0.0, 1.0, size=shape)
    if strategy == "pattern4":
        return _block_pattern(shape, 2, rng)
    if strategy == "pattern16":
        return _block_pattern(shape, 4, rng)
    if strategy == "binary":
        rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        return ((rr + cc) % 2).astype(np.float64)
    if strategy == "rgb":
        # palette stripes standing in for color channels on 1-channel images
        palette = np.array([0.9, 0.6, 0.3])
        return np.tile(palette[np.arange(cols) % 3], (rows, 1))
    if strategy == "exemplar":
        if exemplar is None:
            raise ConfigError("exemplar init requires an exemplar image")
        ex = np.asarray(exemplar, dtype=np.float64)
        if ex.shape != tuple(shape):
            raise ShapeError(f"exemplar {ex.shape} vs input {shape}")
        return ex.copy()
    raise ConfigError(f"unknown init strategy {strategy!r}")


def _block_pattern(shape, grid: int, rng) -> np.ndarray:
    # mid-range block values: geometric seeds start near the pixel mean
    rows, cols = shape
    values = rng.uniform(0.25, 0.75, size=(grid, grid))
    r_edges = np.linspace(0, rows, grid + 1).astype(int)
    c_edges = np.linspace(0, cols, grid + 1).astype(int)
    out = np.zeros(shape)
    for i in range(grid):
        for j in range(grid):
            out[r_edges[i] : r_edges[i + 1], c_edges[j] : c_edges[j + 1]] = values[i, j]
    return out


def reconstruct(
    spec: ModelSpec,
    params: FlatVector,
    target: TargetGradient,
    cfg: AttackConfig,
    ground_truth=None,
    exemplar=None,
) -> ReconResult:
    """Iterative gradient-matching reconstruction of one training input.

    Descends D = ||grad(x_rec, y_rec) - target||^2 in the input, clamping
    x_rec into [0, 1] after each step, until the loss threshold or the
    iteration cap; a non-finite loss aborts with the partial trace.
    """
    if not params.same_layout(target.grad):
        raise ShapeError("target gradient layout does not match parameters")
    rng = np.random.default_rng(cfg.seed)
    y_rec = infer_label(target, spec)
    x = init_seed(cfg.init, spec.input_shape, rng, exemplar=exemplar)
    trace: list[float] = []
    mse_trace: list[float] = []
    m1 = np.zeros(spec.input_shape)
    m2 = np.zeros(spec.input_shape)
    aborted = False
    iterations = 0
    d_val = float("inf")
    for tau in range(cfg.max_iters + 1):
        try:
            d_val, dx = grad_match_input_grad(spec, params, x, y_rec, target.grad)
        except NumericError:
            aborted = True
            break
        trace.append(d_val)
        if ground_truth is not None:
            mse_trace.append(metrics.mse(x, ground_truth))
        iterations = tau
        if d_val < cfg.loss_threshold or tau == cfg.max_iters:
            break
        if cfg.optimizer == "adam":
            m1 = 0.9 * m1 + 0.1 * dx
            m2 = 0.999 * m2 + 0.001 * dx * dx
            h1 = m1 / (1.0 - 0.9 ** (tau + 1))
            h2 = m2 / (1.0 - 0.999 ** (tau + 1))
            step = h1 / (np.sqrt(h2) + 1e-8)
        else:
            step = dx
        x = x - cfg.lr * step
        if cfg.clamp:
            x = np.clip(x, 0.0, 1.0)
    result = ReconResult(
        x_rec=x,
        y_rec=y_rec,
        iterations=iterations,
        final_loss=trace[-1] if trace else float("nan"),
        loss_trace=trace,
        aborted=aborted,
        mse_trace=mse_trace,
    )
    if ground_truth is not None and not aborted:
        result.mse = metrics.mse(x, ground_truth)
        window = min(8, min(spec.input_shape))
        result.ssim = metrics.ssim(x, np.asarray(ground_truth, dtype=np.float64), window=window)
        result.success = result.mse < MSE_SUCCESS_THRESHOLD
    return result


def reconstruct_batch(
    spec: ModelSpec,
    params: FlatVector,
    target: TargetGradient,
    cfg: AttackConfig,
    batch_size: int,
    ground_truth=None,
) -> list[ReconResult]:
    """Joint reconstruction of up to four inputs against one target.

    Labels come from the most-negative bias entries; each slot gets its
    own init seed derived from the attack seed.
    """
    if not 1 <= batch_size <= 4:
        raise ConfigError("batch reconstruction supports 1..4 slots")
    labels = infer_labels(target, spec, batch_size)
    xs = [
        init_seed(cfg.init, spec.input_shape, np.random.default_rng([cfg.seed, slot]))
        for slot in range(batch_size)
    ]
    trace: list[float] = []
    aborted = False
    iterations = 0
    for tau in range(cfg.max_iters + 1):
        try:
            d_val, dxs = grad_match_batch_input_grad(spec, params, xs, labels, target.grad)
        except NumericError:
            aborted = True
            break
        trace.append(d_val)
        iterations = tau
        if d_val < cfg.loss_threshold or tau == cfg.max_iters:
            break
        xs = [x - cfg.lr * dx for x, dx in zip(xs, dxs)]
        if cfg.clamp:
            xs = [np.clip(x, 0.0, 1.0) for x in xs]
    results = []
    for slot, (x, y) in enumerate(zip(xs, labels)):
        res = ReconResult(
            x_rec=x,
            y_rec=y,
            iterations=iterations,
            final_loss=trace[-1] if trace else float("nan"),
            loss_trace=trace,
            aborted=aborted,
        )
        if ground_truth is not None and not aborted:
            # score each slot against its best-matching truth image
            best = min(ground_truth, key=lambda g: metrics.mse(x, g))
            res.mse = metrics.mse(x, best)
            res.success = res.mse < MSE_SUCCESS_THRESHOLD
        results.append(res)
    return results


def evaluate_leakage(x_rec, x) -> tuple[float, float, bool]:
    """(MSE, SSIM, leaked?) for a reconstruction against the ground truth."""
    a = np.asarray(x_rec, dtype=np.float64)
    b = np.asarray(x, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"evaluate_leakage: {a.shape} vs {b.shape}")
    m = metrics.mse(a, b)
    window = min(8, min(a.shape))
    s = metrics.ssim(a, b, window=window)
    return m, s, m < MSE_SUCCESS_THRESHOLD
