"""Reverse-mode automatic differentiation over dense float64 arrays.

Everything the training loop differentiates is built from the primitives in
this module. Ops execute eagerly and record a tape; calling :func:`backward`
on a scalar root walks the tape in reverse topological order and accumulates
gradients into every ``requires_grad`` leaf. All buffers are 64-bit floats so
finite-difference checks are meaningful.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-6

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class AutodiffError(ValueError):
    """Raised on malformed graphs: shape mismatches, non-scalar backward roots."""


class Tensor:
    """A dense float64 array plus the tape record that produced it.

    ``data`` is immutable by convention once the node is created; only ``grad``
    buffers are written after construction.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents: tuple[Tensor, ...] = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    def detach(self) -> "Tensor":
        """Constant view of this value; gradients do not flow past it."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # constants stay grad-free even when a sibling parent needs gradients
        if not (self.requires_grad or self._backward is not None):
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t.parents for t in tensors)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def topo_order(root: Tensor) -> list[Tensor]:
    """Tape nodes reachable from ``root``, inputs before consumers.

    Iterative so deep training graphs never hit the recursion limit. The
    returned list is the graph: every node records its op kind and parents.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``root``.

    The root must be scalar (size 1). Gradients accumulate: a leaf consumed
    on two paths receives the sum of both path contributions.
    """
    if root.data.size != 1:
        raise AutodiffError(f"backward root must be scalar, got shape {root.data.shape}")
    root.grad = np.ones_like(root.data)
    for node in reversed(topo_order(root)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitives

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise AutodiffError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(out_data, op="add", parents=(a, b))

    def bw(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = bw if _needs_grad(a, b) else None
    return out


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise AutodiffError(f"multiply: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(out_data, op="multiply", parents=(a, b))

    def bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = bw if _needs_grad(a, b) else None
    return out


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c, op="scale", parents=(a,))
    out._backward = (lambda g: a._accumulate(g * c)) if _needs_grad(a) else None
    return out


def subtract(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def matmul(a, b) -> Tensor:
    """2-D matrix product, or stacked 3-D batch product with equal batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim == b.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise AutodiffError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise AutodiffError(f"matmul: shapes {a.shape} and {b.shape} not aligned")
    out = Tensor(a.data @ b.data, op="matmul", parents=(a, b))

    def bw(g):
        a._accumulate(g @ b.data.swapaxes(-1, -2))
        b._accumulate(a.data.swapaxes(-1, -2) @ g)

    out._backward = bw if _needs_grad(a, b) else None
    return out


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    if sorted(axes) != list(range(a.data.ndim)):
        raise AutodiffError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes).copy(), op="transpose", parents=(a,))
    out._backward = (lambda g: a._accumulate(np.transpose(g, inverse))) if _needs_grad(a) else None
    return out


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise AutodiffError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor(out_data, op="reshape", parents=(a,))
    out._backward = (lambda g: a._accumulate(g.reshape(a.data.shape))) if _needs_grad(a) else None
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise AutodiffError("concat: empty input list")
    try:
        out_data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise AutodiffError(f"concat: incompatible shapes {[p.shape for p in parts]}")
    out = Tensor(out_data, op="concat", parents=tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            p._accumulate(g[tuple(idx)])

    out._backward = bw if _needs_grad(*parts) else None
    return out


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _as_tensor(a)
    if not (0 <= start <= stop <= a.data.shape[axis]):
        raise AutodiffError(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    key = [slice(None)] * a.data.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)
    out = Tensor(a.data[key].copy(), op="slice", parents=(a,))

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a._accumulate(full)

    out._backward = bw if _needs_grad(a) else None
    return out


def gather_rows(a, indices) -> Tensor:
    """Row gather along axis 0; the embedding-table lookup primitive."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise AutodiffError(f"gather_rows: index out of range for {a.shape}")
    out = Tensor(a.data[idx], op="gather_rows", parents=(a,))

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    out._backward = bw if _needs_grad(a) else None
    return out


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), op="sum", parents=(a,))

    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    out._backward = bw if _needs_grad(a) else None
    return out


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data), op="exp", parents=(a,))
    out._backward = (lambda g: a._accumulate(g * out.data)) if _needs_grad(a) else None
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data), op="log", parents=(a,))
    out._backward = (lambda g: a._accumulate(g / a.data)) if _needs_grad(a) else None
    return out


def pow_const(a, p: float) -> Tensor:
    """Elementwise x**p for a float constant p."""
    a = _as_tensor(a)
    p = float(p)
    out = Tensor(a.data ** p, op="pow_const", parents=(a,))
    out._backward = (lambda g: a._accumulate(g * p * a.data ** (p - 1.0))) if _needs_grad(a) else None
    return out


def clip_min_const(a, lo: float) -> Tensor:
    """max(x, lo); gradient passes only where x > lo."""
    a = _as_tensor(a)
    lo = float(lo)
    out = Tensor(np.maximum(a.data, lo), op="clip_min", parents=(a,))
    mask = a.data > lo

    def bw(g):
        a._accumulate(g * mask)

    out._backward = bw if _needs_grad(a) else None
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, op="softmax", parents=(a,))

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (g - dot))

    out._backward = bw if _needs_grad(a) else None
    return out


def gelu(a) -> Tensor:
    """Exact-erf GELU; the erf form keeps finite-difference checks clean."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf, op="gelu", parents=(a,))

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        a._accumulate(g * (cdf + x * pdf))

    out._backward = bw if _needs_grad(a) else None
    return out


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance. No affine part;
    compose with multiply/add for a learned gain and bias."""
    a = _as_tensor(a)
    x = a.data
    if x.ndim == 0:
        raise AutodiffError("layer_norm: scalar input")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = Tensor(xhat, op="layer_norm", parents=(a,))

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        a._accumulate(inv_std * (g - gm - xhat * gx))

    out._backward = bw if _needs_grad(a) else None
    return out


def smooth_l1(a, target: np.ndarray) -> Tensor:
    """Elementwise Huber penalty against a constant target (delta = 1)."""
    a = _as_tensor(a)
    d = a.data - np.asarray(target, dtype=np.float64)
    small = np.abs(d) < 1.0
    out = Tensor(np.where(small, 0.5 * d * d, np.abs(d) - 0.5), op="smooth_l1", parents=(a,))

    def bw(g):
        a._accumulate(g * np.where(small, d, np.sign(d)))

    out._backward = bw if _needs_grad(a) else None
    return out


# ---------------------------------------------------------------------------
# verification

def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` must map a Tensor to a scalar Tensor and be evaluable at x ± h·e_i.
    Relative error per coordinate is |analytic - numeric| / max(1e-8, |numeric|).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if not np.all(np.isfinite(out.data)):
        raise AutodiffError("grad_check: f(x) is not finite")
    backward(out)
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad.copy()

    flat = x.data.copy().ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(flat.reshape(x.data.shape))).data.item()
        flat[i] = orig - h
        lo = f(Tensor(flat.reshape(x.data.shape))).data.item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise AutodiffError("grad_check: f not finite at perturbed point")
        numeric[i] = (hi - lo) / (2.0 * h)

    numeric = numeric.reshape(x.data.shape)
    denom = np.maximum(1e-8, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
