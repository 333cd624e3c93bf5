"""Reverse-mode autodiff over float64 numpy arrays.

Every VJP rule is itself expressed with tape operations, so gradients are
ordinary tape nodes and `grad` can be applied to its own output.  That is
what makes the gradient-of-gradient-matching-loss computation possible
without a second mechanism.

Shapes are deliberately restricted: elementwise ops require equal shapes or
one scalar operand, matrix work goes through `matvec`/`outer`/`transpose`.
No general broadcasting.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


class Var:
    """A tape node: a float64 array plus the recipe that produced it."""

    __slots__ = ("value", "parents", "vjp", "requires")

    def __init__(self, value, parents=(), vjp=None, requires=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.requires = requires

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires={self.requires})"


def leaf(value):
    """A differentiation target."""
    return Var(value, requires=True)


def const(value):
    """A node gradients never flow into."""
    return Var(value, requires=False)


def _as_var(x):
    return x if isinstance(x, Var) else const(x)


def _is_scalar(v):
    return v.value.ndim == 0


def _make(value, parents, vjp):
    requires = any(p.requires for p in parents)
    if not requires:
        return Var(value)
    return Var(value, parents=parents, vjp=vjp, requires=True)


def _match(a, b, op):
    # equal shapes, or one side scalar
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, target):
    """Sum an adjoint down to a scalar operand's shape if needed."""
    if _is_scalar(target) and not _is_scalar(g):
        return vsum(g)
    return g


def add(a, b):
    a, b = _as_var(a), _as_var(b)
    _match(a, b, "add")
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (_reduce_to(g, a), _reduce_to(g, b)),
    )


def sub(a, b):
    a, b = _as_var(a), _as_var(b)
    _match(a, b, "sub")
    return _make(
        a.value - b.value,
        (a, b),
        lambda g: (_reduce_to(g, a), _reduce_to(neg(g), b)),
    )


def neg(a):
    a = _as_var(a)
    return _make(-a.value, (a,), lambda g: (neg(g),))


def mul(a, b):
    a, b = _as_var(a), _as_var(b)
    _match(a, b, "mul")
    return _make(
        a.value * b.value,
        (a, b),
        lambda g: (_reduce_to(mul(g, b), a), _reduce_to(mul(g, a), b)),
    )


def recip(a):
    a = _as_var(a)
    out = _make(1.0 / a.value, (a,), None)
    if out.requires:
        out.vjp = lambda g: (neg(mul(g, mul(out, out))),)
    return out


def exp(a):
    a = _as_var(a)
    out = _make(np.exp(a.value), (a,), None)
    if out.requires:
        out.vjp = lambda g: (mul(g, out),)
    return out


def log(a):
    a = _as_var(a)
    return _make(np.log(a.value), (a,), lambda g: (mul(g, recip(a)),))


def tanh(a):
    a = _as_var(a)
    out = _make(np.tanh(a.value), (a,), None)
    if out.requires:
        out.vjp = lambda g: (mul(g, sub(const(1.0), mul(out, out))),)
    return out


def sigmoid(a):
    a = _as_var(a)
    out = _make(1.0 / (1.0 + np.exp(-a.value)), (a,), None)
    if out.requires:
        out.vjp = lambda g: (mul(g, mul(out, sub(const(1.0), out))),)
    return out


def matvec(m, v):
    m, v = _as_var(m), _as_var(v)
    if m.value.ndim != 2 or v.value.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: {m.shape} @ {v.shape}")
    return _make(
        m.value @ v.value,
        (m, v),
        lambda g: (outer(g, v), matvec(transpose(m), g)),
    )


def outer(u, v):
    u, v = _as_var(u), _as_var(v)
    if u.value.ndim != 1 or v.value.ndim != 1:
        raise ShapeError(f"outer: {u.shape} x {v.shape}")
    return _make(
        np.outer(u.value, v.value),
        (u, v),
        lambda g: (matvec(g, v), matvec(transpose(g), u)),
    )


def transpose(m):
    m = _as_var(m)
    if m.value.ndim != 2:
        raise ShapeError(f"transpose: {m.shape}")
    return _make(m.value.T, (m,), lambda g: (transpose(g),))


def vsum(a):
    """Sum of all elements, as a scalar node."""
    a = _as_var(a)
    return _make(np.sum(a.value), (a,), lambda g: (fill(g, a.shape),))


def fill(s, shape):
    """Broadcast a scalar node to `shape`."""
    s = _as_var(s)
    if not _is_scalar(s):
        raise ShapeError("fill: source must be scalar")
    return _make(np.full(shape, s.value), (s,), lambda g: (vsum(g),))


def pick(v, i):
    """v[i] as a scalar node."""
    v = _as_var(v)
    if v.value.ndim != 1:
        raise ShapeError(f"pick: {v.shape}")
    return _make(v.value[i], (v,), lambda g: (scatter(g, i, v.shape[0]),))


def scatter(s, i, n):
    """A length-n vector with scalar node `s` at index i, zeros elsewhere."""
    s = _as_var(s)
    if not _is_scalar(s):
        raise ShapeError("scatter: source must be scalar")
    base = np.zeros(n)

    def make_value(x):
        out = base.copy()
        out[i] = x
        return out

    return _make(make_value(s.value), (s,), lambda g: (pick(g, i),))


def dot(u, v):
    return vsum(mul(u, v))


def sqnorm(a):
    return vsum(mul(a, a))


def logsumexp(z):
    """Numerically stable log-sum-exp of a vector node.

    The max shift is detached; the result and all derivatives are exact
    because the shift cancels analytically.
    """
    m = float(np.max(z.value))
    return add(const(m), log(vsum(exp(sub(z, const(m))))))


def _topo(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(out, wrt):
    """Adjoints of scalar node `out` with respect to each node in `wrt`.

    The returned nodes are full tape expressions, so they can be fed back
    into `grad` for higher-order derivatives.  Nodes `out` does not depend
    on get a zeros adjoint.
    """
    if not _is_scalar(out):
        raise ShapeError("grad: output must be scalar")
    adjoint = {id(out): const(1.0) if _is_scalar(out) else None}
    if out.requires:
        for node in reversed(_topo(out)):
            g = adjoint.get(id(node))
            if g is None or node.vjp is None:
                continue
            # fill() materializes scalar adjoints of non-scalar nodes
            if _is_scalar(g) and node.value.ndim != 0:
                g = fill(g, node.shape)
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not parent.requires:
                    continue
                prev = adjoint.get(id(parent))
                adjoint[id(parent)] = pg if prev is None else add(prev, pg)
    results = []
    for w in wrt:
        g = adjoint.get(id(w))
        results.append(const(np.zeros(w.shape)) if g is None else g)
    return results
