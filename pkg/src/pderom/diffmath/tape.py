"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built define-by-run: every operation returns a new
:class:`Tensor` holding the result plus a closure that maps the output
cotangent to cotangents of its parents.  There is no global tape object,
so graphs built on different threads never share state.

The primitive set is fixed.  Networks and solvers elsewhere in the
package must compose only from the operations defined in this module
(plus the least-squares primitive in :mod:`pderom.diffmath.lstsq`):

==============================  =============================================
add, sub, mul, div, neg         elementwise with numpy broadcasting
pow_const                       x**p for a constant scalar exponent
exp, log, sqrt, sin, cos        elementwise transcendentals
sigmoid, softplus               numerically stable forms
maximum, minimum                elementwise extrema (ties route to the
                                first argument)
matmul                          last-two-axes contraction, operands ndim >= 2
sum_, mean_                     reductions over given axes
reshape, transpose, swapaxes    shape manipulation
concat                          concatenation along an axis
take_rows                       fancy indexing along axis 0
take_along                      per-row gather (np.take_along_axis, last axis
                                of the index array addresses ``axis``)
slice_, pad_zero                basic slicing and zero padding (stencils)
stop_gradient                   identity value, zero derivative
==============================  =============================================

All data is float64.  Every primitive checks its output for
non-finite values and raises :class:`NonFiniteError` naming the
operation, so a NaN produced deep inside a training step surfaces at
the exact node that created it.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DiffmathError",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "constant",
    "parameter",
    "backward",
    "grad",
    "stop_gradient",
]


class DiffmathError(Exception):
    """Base class for differentiation errors."""


class NonFiniteError(DiffmathError):
    """A primitive produced a NaN or infinity."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by operation '{op}'")
        self.op = op


_state = threading.local()


def _grad_on() -> bool:
    return getattr(_state, "grad", True)


def grad_enabled() -> bool:
    """Whether newly created operations record derivatives."""
    return _grad_on()


@contextmanager
def no_grad():
    """Disable graph construction inside the context (pure evaluation)."""
    prev = _grad_on()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    """A float64 array plus its position in the reverse-mode graph.

    ``parents``/``vjp`` are populated only when gradients are enabled and
    at least one input requires them; constants stay out of the graph.
    Tensors are immutable by convention: no operation writes to ``data``
    of an existing tensor.
    """

    __slots__ = ("data", "parents", "vjp", "op", "requires_grad")

    def __init__(
        self,
        data,
        parents: tuple = (),
        vjp: Callable | None = None,
        op: str = "leaf",
        requires_grad: bool = False,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.requires_grad = requires_grad or bool(parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    # arithmetic sugar; the module-level functions do the work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(x)


def parameter(x) -> Tensor:
    """A leaf tensor that accumulates gradients in :func:`backward`."""
    return Tensor(x, requires_grad=True)


def _check_finite(data: np.ndarray, op: str) -> None:
    # Summation is cheaper than isfinite().all() and catches both NaN and
    # +/-inf for the magnitudes this package works at.
    if not math.isfinite(float(data.sum())):
        raise NonFiniteError(op)


def _make(data, parents, vjp, op) -> Tensor:
    _check_finite(data, op)
    if _grad_on() and any(p.requires_grad for p in parents):
        return Tensor(data, parents=parents, vjp=vjp, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a cotangent down to the shape of the operand it belongs to."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            _unbroadcast(g, b.data.shape) if nb else None,
        )

    return _make(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            -_unbroadcast(g, b.data.shape) if nb else None,
        )

    return _make(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if na else None,
            _unbroadcast(g * a.data, b.data.shape) if nb else None,
        )

    return _make(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = a.data / b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = g / b.data
        return (
            _unbroadcast(ga, a.data.shape) if na else None,
            _unbroadcast(-ga * out, b.data.shape) if nb else None,
        )

    return _make(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def pow_const(a, p) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data**p

    def vjp(g):
        return (g * (p * a.data ** (p - 1.0)),)

    return _make(out, (a,), vjp, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),), "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    out = np.sin(a.data)
    return _make(out, (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    out = np.cos(a.data)
    return _make(out, (a,), lambda g: (g * -np.sin(a.data),), "cos")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * (out * (1.0 - out)),)

    return _make(out, (a,), vjp, "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        s = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
        return (g * s,)

    return _make(out, (a,), vjp, "softplus")


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.maximum(a.data, b.data)
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        take_a = a.data >= b.data
        return (
            _unbroadcast(np.where(take_a, g, 0.0), a.data.shape) if na else None,
            _unbroadcast(np.where(take_a, 0.0, g), b.data.shape) if nb else None,
        )

    return _make(out, (a, b), vjp, "maximum")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.minimum(a.data, b.data)
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        take_a = a.data <= b.data
        return (
            _unbroadcast(np.where(take_a, g, 0.0), a.data.shape) if na else None,
            _unbroadcast(np.where(take_a, 0.0, g), b.data.shape) if nb else None,
        )

    return _make(out, (a, b), vjp, "minimum")


# ----------------------------------------------------------------------
# linear algebra / shape primitives


def matmul(a, b, row_stable: bool = False) -> Tensor:
    """Contract the last two axes; numpy matmul broadcasting on the rest.

    BLAS gemm/gemv kernels block over rows, so an output row's last bit
    can depend on its position and on the total row count.  With
    ``row_stable=True`` the forward pass runs through einsum's fixed
    per-element reduction order instead, making row values independent
    of slicing, permutation, and batch size at ~10x the cost.  The
    decoders use that mode for their exact-equivariance contract; hot
    loops keep the default.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2; reshape vectors first")
    if row_stable:
        if b.ndim == 2:
            out = np.einsum("...j,jk->...k", a.data, b.data)
        else:
            out = np.einsum("...ij,...jk->...ik", a.data, b.data)
    else:
        out = a.data @ b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = gb = None
        if na:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if nb:
            if a.ndim > 2 and b.ndim == 2:
                # collapse the batch once instead of summing stacked products
                rows = a.data.reshape(-1, a.data.shape[-1])
                gb = rows.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "matmul")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return _make(out, (a,), vjp, "sum")


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.data.shape),)

    return _make(out, (a,), vjp, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out = np.swapaxes(a.data, ax1, ax2)
    return _make(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    needs = [t.requires_grad for t in ts]

    def vjp(g):
        parts_g = np.split(g, splits, axis=axis)
        return tuple(p if need else None for p, need in zip(parts_g, needs))

    return _make(out, tuple(ts), vjp, "concat")


def take_rows(a, indices) -> Tensor:
    """Gather rows ``a[indices]`` along axis 0; adjoint scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), vjp, "take_rows")


def take_along(a, indices, axis: int) -> Tensor:
    """np.take_along_axis with a scatter-add adjoint."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        grids = list(np.ogrid[tuple(slice(s) for s in idx.shape)])
        grids[axis] = idx
        np.add.at(ga, tuple(grids), g)
        return (ga,)

    return _make(out, (a,), vjp, "take_along")


def slice_(a, key) -> Tensor:
    """Basic slicing ``a[key]`` (slices only, keeps rank)."""
    a = as_tensor(a)
    if not isinstance(key, tuple):
        key = (key,)
    if not all(isinstance(k, slice) for k in key):
        raise TypeError("slice_ supports slice objects only")
    out = a.data[key]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _make(out, (a,), vjp, "slice")


def pad_zero(a, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` follows np.pad conventions."""
    a = as_tensor(a)
    out = np.pad(a.data, pad_width)
    key = tuple(
        slice(lo, dim + lo) for (lo, _), dim in zip(pad_width, a.data.shape)
    )

    def vjp(g):
        return (g[key],)

    return _make(out, (a,), vjp, "pad_zero")


def broadcast_to(a, shape) -> Tensor:
    """Broadcast to ``shape``; the adjoint sums over the expanded axes."""
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.data.shape),), "broadcast_to")


def sine_affine(z, W, b, scale: float, row_stable: bool = False) -> Tensor:
    """Fused sine layer ``sin(scale * (z @ W + b))``.

    Mathematically identical to composing matmul, add, mul, and sin;
    fused because this is the inner loop of sine-activated decoders and
    the composition would make four full-size temporaries per layer.
    ``z`` is (..., n, in) with plain 2-D ``W`` (in, out) and ``b`` (out,).
    """
    z, W, b = as_tensor(z), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or b.ndim != 1:
        raise ValueError("sine_affine expects 2-D W and 1-D b")
    if row_stable:
        pre = np.einsum("...j,jk->...k", z.data, W.data)
    else:
        pre = z.data @ W.data
    pre += b.data
    pre *= scale
    out = np.sin(pre)
    nz, nW, nb = z.requires_grad, W.requires_grad, b.requires_grad

    def vjp(g):
        dpre = np.cos(pre)
        dpre *= g
        dpre *= scale
        gz = gW = gb = None
        if nz:
            gz = dpre @ W.data.T
        if nW:
            gW = z.data.reshape(-1, z.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
        if nb:
            gb = dpre.sum(axis=tuple(range(dpre.ndim - 1)))
        return gz, gW, gb

    return _make(out, (z, W, b), vjp, "sine_affine")


def stop_gradient(a) -> Tensor:
    """Identical values, zero contribution to any gradient."""
    a = as_tensor(a)
    return Tensor(a.data, op="stop_gradient")


# ----------------------------------------------------------------------
# backward pass


def _topo(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Cotangents of a scalar ``root`` with respect to each tensor in ``wrt``.

    Tensors not reached by the graph get zero gradients.  Accumulation
    order is the reverse of construction order, so repeated runs over an
    identical graph are bitwise reproducible.
    """
    if root.data.shape != ():
        raise ValueError("backward expects a scalar root tensor")
    wrt = list(wrt)
    if not root.requires_grad:
        return [np.zeros_like(t.data) for t in wrt]

    order = _topo(root)
    # cotangent store: id -> [array, owned]; owned means we may add in place
    store: dict[int, list] = {id(root): [np.ones((), dtype=np.float64), True]}
    for node in reversed(order):
        if node.vjp is None:
            continue  # leaf: its accumulated cotangent stays in the store
        entry = store.pop(id(node), None)
        if entry is None:
            continue
        cot = node.vjp(entry[0])
        for p, c in zip(node.parents, cot):
            if not p.requires_grad or c is None:
                continue
            slot = store.get(id(p))
            if slot is None:
                store[id(p)] = [c, False]
            elif slot[1]:
                np.add(slot[0], c, out=slot[0])
            else:
                slot[0] = slot[0] + c
                slot[1] = True
    out = []
    for t in wrt:
        slot = store.get(id(t))
        out.append(slot[0] if slot is not None else np.zeros_like(t.data))
    return out


def grad(scalar_fn: Callable, params: Mapping[str, Tensor]):
    """Evaluate ``scalar_fn(params)`` and differentiate it.

    ``params`` maps identifiers to leaf tensors; every value is promoted
    to a gradient-requiring leaf.  Returns the scalar value and a
    gradient map holding one tensor per parameter (zeros for parameters
    the function never touched).
    """
    leaves = {k: Tensor(as_tensor(v).data, requires_grad=True) for k, v in params.items()}
    out = scalar_fn(leaves)
    if not isinstance(out, Tensor) or out.data.shape != ():
        raise ValueError("scalar_fn must return a scalar Tensor")
    _check_finite(out.data, "grad-output")
    gs = backward(out, leaves.values())
    for g in gs:
        _check_finite(g, "grad-backward")
    gmap = {k: Tensor(g) for (k, _), g in zip(leaves.items(), gs)}
    return float(out.data), gmap
