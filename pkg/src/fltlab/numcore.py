"""Feed-forward model family and its first/second-order gradients.

Models are stacks of affine layers with a smooth activation (tanh or
sigmoid) and a softmax cross-entropy head.  Parameters and gradients
travel as flat float64 vectors with a per-layer segment table, which is
the currency exchanged between clients, server, attacker, and defenses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DegenerateInputError, NumericError, ShapeError

ACTIVATIONS = ("tanh", "sigmoid")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture: input shape, hidden widths, class count, activation."""

    input_shape: tuple[int, ...]
    hidden: tuple[int, ...]
    classes: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.classes < 2:
            raise ShapeError("class count must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        if any(h < 1 for h in self.hidden):
            raise ShapeError("hidden widths must be positive")

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.classes]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    @property
    def penultimate_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def layout(spec: ModelSpec) -> tuple[Segment, ...]:
    segments, offset = [], 0
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        for name, shape in ((f"W{i}", (fan_out, fan_in)), (f"b{i}", (fan_out,))):
            segments.append(Segment(name, offset, shape))
            offset += int(np.prod(shape))
    return tuple(segments)


@dataclass
class FlatVector:
    """Flat float64 values plus the segment table mapping layer -> slice.

    Used for both parameter vectors and gradient vectors; the two share a
    layout by construction.
    """

    values: np.ndarray
    segments: tuple[Segment, ...] = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        total = sum(s.size for s in self.segments)
        if self.values.ndim != 1 or self.values.shape[0] != total:
            raise ShapeError(
                f"flat vector length {self.values.shape} != segment total {total}"
            )

    def segment(self, name: str) -> np.ndarray:
        for s in self.segments:
            if s.name == name:
                return self.values[s.offset : s.offset + s.size].reshape(s.shape)
        raise ShapeError(f"no segment {name!r}")

    def same_layout(self, other: "FlatVector") -> bool:
        return self.segments == other.segments

    def copy(self) -> "FlatVector":
        return FlatVector(self.values.copy(), self.segments)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def l2(self) -> float:
        return float(np.linalg.norm(self.values))


ParamVector = FlatVector
GradVector = FlatVector


def zeros_params(spec: ModelSpec) -> FlatVector:
    segs = layout(spec)
    return FlatVector(np.zeros(sum(s.size for s in segs)), segs)


def init_params(spec: ModelSpec, seed, scale: float = 1.0) -> FlatVector:
    """Seeded Xavier-style init: per-layer std scale/sqrt(fan_in), zero bias."""
    rng = np.random.default_rng(seed)
    segs = layout(spec)
    values = np.zeros(sum(s.size for s in segs))
    for s in segs:
        if s.name.startswith("W"):
            fan_in = s.shape[1]
            block = rng.normal(0.0, scale / np.sqrt(fan_in), size=s.shape)
            values[s.offset : s.offset + s.size] = block.ravel()
    return FlatVector(values, segs)


def _check_finite(arr, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _check_input(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != spec.input_shape and x.shape != (spec.input_dim,):
        raise ShapeError(f"input shape {x.shape} != {spec.input_shape}")
    return x.reshape(spec.input_dim)


def _check_params(spec: ModelSpec, params: FlatVector):
    if params.segments != layout(spec):
        raise ShapeError("parameter layout does not match model spec")


def _act(spec: ModelSpec):
    return ad.tanh if spec.activation == "tanh" else ad.sigmoid


def _act_np(spec: ModelSpec):
    if spec.activation == "tanh":
        return np.tanh
    return lambda z: 1.0 / (1.0 + np.exp(-z))


def forward(spec: ModelSpec, params: FlatVector, x) -> np.ndarray:
    """Class probabilities for one input."""
    _check_params(spec, params)
    a = _check_input(spec, x)
    act = _act_np(spec)
    n_layers = len(spec.layer_dims)
    for i in range(n_layers):
        z = params.segment(f"W{i}") @ a + params.segment(f"b{i}")
        a = act(z) if i < n_layers - 1 else z
    z = a - np.max(a)
    p = np.exp(z)
    p /= p.sum()
    _check_finite(p, "forward")
    return p


def forward_batch(spec: ModelSpec, params: FlatVector, xs) -> np.ndarray:
    """Probabilities for a stack of inputs, rows = examples."""
    _check_params(spec, params)
    X = np.asarray(xs, dtype=np.float64).reshape(len(xs), spec.input_dim)
    act = _act_np(spec)
    n_layers = len(spec.layer_dims)
    A = X
    for i in range(n_layers):
        Z = A @ params.segment(f"W{i}").T + params.segment(f"b{i}")
        A = act(Z) if i < n_layers - 1 else Z
    Z = A - A.max(axis=1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=1, keepdims=True)
    _check_finite(P, "forward_batch")
    return P


def _param_vars(spec: ModelSpec, params: FlatVector):
    return {s.name: ad.leaf(params.segment(s.name)) for s in layout(spec)}


def _loss_node(spec: ModelSpec, pvars, x_node, label: int):
    """Cross-entropy loss node for one example on the tape."""
    act = _act(spec)
    n_layers = len(spec.layer_dims)
    a = x_node
    for i in range(n_layers):
        z = ad.add(ad.matvec(pvars[f"W{i}"], a), pvars[f"b{i}"])
        a = act(z) if i < n_layers - 1 else z
    return ad.sub(ad.logsumexp(a), ad.pick(a, label))


def _flatten_grads(spec: ModelSpec, pvars, grads) -> FlatVector:
    segs = layout(spec)
    values = np.concatenate([g.value.ravel() for g in grads])
    return FlatVector(values, segs)


def _check_batch(spec: ModelSpec, batch):
    if not batch:
        raise DegenerateInputError("empty batch")
    for _, y in batch:
        if not 0 <= int(y) < spec.classes:
            raise ShapeError(f"label {y} out of range")


def per_example_grads(spec: ModelSpec, params: FlatVector, batch) -> list[FlatVector]:
    """Loss gradient w.r.t. parameters for each (x, label) separately."""
    _check_params(spec, params)
    _check_batch(spec, batch)
    out = []
    for x, y in batch:
        pvars = _param_vars(spec, params)
        loss = _loss_node(spec, pvars, ad.const(_check_input(spec, x)), int(y))
        names = [s.name for s in layout(spec)]
        grads = ad.grad(loss, [pvars[n] for n in names])
        g = _flatten_grads(spec, pvars, grads)
        _check_finite(g.values, "per_example_grads")
        out.append(g)
    return out


def loss_and_param_grad(spec: ModelSpec, params: FlatVector, batch):
    """Mean cross-entropy over the batch and its parameter gradient.

    Computed as the average of per-example gradients so that
    per_example_grads is consistent with it by construction.
    """
    _check_params(spec, params)
    _check_batch(spec, batch)
    losses = []
    for x, y in batch:
        pvars = _param_vars(spec, params)
        loss = _loss_node(spec, pvars, ad.const(_check_input(spec, x)), int(y))
        losses.append(float(loss.value))
    grads = per_example_grads(spec, params, batch)
    mean = np.mean([g.values for g in grads], axis=0)
    loss_val = float(np.mean(losses))
    _check_finite(np.array([loss_val]), "loss")
    return loss_val, FlatVector(mean, layout(spec))


def grad_match_input_grad(
    spec: ModelSpec,
    params: FlatVector,
    x_rec,
    y_rec: int,
    target: FlatVector,
):
    """Gradient-matching distance and its gradient w.r.t. the input.

    D is the squared L2 distance between the parameter gradient at
    (x_rec, y_rec) and `target`; dx is dD/dx_rec, obtained by
    differentiating through the parameter-gradient computation.
    """
    _check_params(spec, params)
    if not params.same_layout(target):
        raise ShapeError("target layout does not match parameters")
    x = _check_input(spec, x_rec)
    pvars = _param_vars(spec, params)
    x_node = ad.leaf(x)
    loss = _loss_node(spec, pvars, x_node, int(y_rec))
    names = [s.name for s in layout(spec)]
    grads = ad.grad(loss, [pvars[n] for n in names])
    d_node = None
    for name, g in zip(names, grads):
        r = ad.sub(g, ad.const(target.segment(name)))
        term = ad.sqnorm(r)
        d_node = term if d_node is None else ad.add(d_node, term)
    (dx_node,) = ad.grad(d_node, [x_node])
    d_val = float(d_node.value)
    dx = dx_node.value.reshape(spec.input_shape)
    if not np.isfinite(d_val) or not np.all(np.isfinite(dx)):
        raise NumericError("non-finite gradient-matching value")
    return d_val, dx


def grad_match_batch_input_grad(
    spec: ModelSpec,
    params: FlatVector,
    xs,
    ys,
    target: FlatVector,
):
    """Batch variant: D compares the mean per-example gradient to `target`
    and dx_i is dD/dx_i for every reconstruction slot."""
    _check_params(spec, params)
    if not params.same_layout(target):
        raise ShapeError("target layout does not match parameters")
    if len(xs) != len(ys) or not xs:
        raise DegenerateInputError("empty or mismatched reconstruction batch")
    pvars = _param_vars(spec, params)
    x_nodes = [ad.leaf(_check_input(spec, x)) for x in xs]
    inv = ad.const(1.0 / len(xs))
    loss = None
    for x_node, y in zip(x_nodes, ys):
        term = _loss_node(spec, pvars, x_node, int(y))
        loss = term if loss is None else ad.add(loss, term)
    loss = ad.mul(inv, loss)
    names = [s.name for s in layout(spec)]
    grads = ad.grad(loss, [pvars[n] for n in names])
    d_node = None
    for name, g in zip(names, grads):
        r = ad.sub(g, ad.const(target.segment(name)))
        term = ad.sqnorm(r)
        d_node = term if d_node is None else ad.add(d_node, term)
    dx_nodes = ad.grad(d_node, x_nodes)
    d_val = float(d_node.value)
    dxs = [n.value.reshape(spec.input_shape) for n in dx_nodes]
    if not np.isfinite(d_val) or not all(np.all(np.isfinite(d)) for d in dxs):
        raise NumericError("non-finite gradient-matching value")
    return d_val, dxs
