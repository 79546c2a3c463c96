"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The primitive set here (elementwise arithmetic, matmul, axis reductions,
activations, softmax, L2 norm, shape surgery) is deliberately closed: it is
exactly what the channel-expansion, disentanglement, alignment and loss
blocks need. Every op records a backward closure on the producing tensor, so
``backward`` on a scalar root populates ``grad`` on every reachable leaf.

Forward results are deterministic: reductions go through numpy's fixed
pairwise order, so identical inputs give bitwise identical outputs.
"""

from __future__ import annotations

import math
import threading
import weakref
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform for the named primitive."""


class AutodiffError(RuntimeError):
    """Backward pass invoked on an unsupported root."""


# ---------------------------------------------------------------------------
# Allocation accounting. The latency benchmark reports a peak-resident
# estimate from live tensor bytes, not OS RSS, so it is reproducible.

_alloc_lock = threading.Lock()
_live_bytes = 0
_peak_bytes = 0


def _track(nbytes: int) -> None:
    global _live_bytes, _peak_bytes
    with _alloc_lock:
        _live_bytes += nbytes
        if _live_bytes > _peak_bytes:
            _peak_bytes = _live_bytes


def _untrack(nbytes: int) -> None:
    global _live_bytes
    with _alloc_lock:
        _live_bytes -= nbytes


def memory_stats() -> dict:
    """Live and peak tensor bytes since the last ``reset_peak_memory``."""
    with _alloc_lock:
        return {"live_bytes": _live_bytes, "peak_bytes": _peak_bytes}


def reset_peak_memory() -> None:
    global _peak_bytes
    with _alloc_lock:
        _peak_bytes = _live_bytes


# ---------------------------------------------------------------------------
# Grad mode. Inference paths wrap themselves in no_grad() to skip the tape.

_grad_enabled = True


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """n-dimensional float64 array with an optional gradient slot.

    Immutable after construction except for ``grad``; op-produced tensors
    carry their parents and a backward closure (the tape).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op",
                 "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None,
                 _op: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op
        _track(arr.nbytes)
        weakref.finalize(self, _untrack, arr.nbytes)

    # -- inspection --------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op!r})"

    # -- grad slot ---------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def max(self, axis: int, keepdims: bool = False):
        return max_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Named trainable tensor; the name encodes its module path."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _make(op: str, out_data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    record = _grad_enabled and any(p.requires_grad for p in parents)
    if record:
        return Tensor(out_data, requires_grad=True, _parents=parents,
                      _backward=backward_fn, _op=op)
    return Tensor(out_data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the pre-broadcast operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape))
                 if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op: str, a, b, fwd, da, db) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        return (_unbroadcast(da(g, a.data, b.data, out), a.shape),
                _unbroadcast(db(g, a.data, b.data, out), b.shape))

    return _make(op, out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# Elementwise arithmetic (broadcasting per numpy rules)

def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y))


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out = a.data ** p

    def backward_fn(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make("power", out, (a,), backward_fn)


def matmul(a, b) -> Tensor:
    """Matrix product; leading batch axes broadcast elementwise."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# Reductions

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes if axes else None, keepdims=keepdims)

    def backward_fn(g):
        gx = g
        if not keepdims:
            for ax in sorted(axes):
                gx = np.expand_dims(gx, ax)
        return (np.broadcast_to(gx, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), backward_fn)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max over a single axis; gradient routes to the first occurrence."""
    a = _as_tensor(a)
    if a.shape[axis % a.ndim] == 0:
        raise ShapeError(f"max: empty axis {axis} for shape {a.shape}")
    out = a.data.max(axis=axis, keepdims=keepdims)
    idx = np.argmax(a.data, axis=axis)

    def backward_fn(g):
        gx = g if keepdims else np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), gx, axis=axis)
        return (grad,)

    return _make("max", out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# Pointwise nonlinearities

def _unary(op, a, fwd, dfun) -> Tensor:
    a = _as_tensor(a)
    out = fwd(a.data)

    def backward_fn(g):
        return (g * dfun(a.data, out),)

    return _make(op, out, (a,), backward_fn)


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda x, o: o)


def log(a) -> Tensor:
    return _unary("log", a, np.log, lambda x, o: 1.0 / x)


def tanh(a) -> Tensor:
    return _unary("tanh", a, np.tanh, lambda x, o: 1.0 - o * o)


def relu(a) -> Tensor:
    return _unary("relu", a, lambda x: np.maximum(x, 0.0),
                  lambda x, o: (x > 0).astype(DTYPE))


def sigmoid(a) -> Tensor:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary("sigmoid", a, fwd, lambda x, o: o * (1.0 - o))


def sqrt(a) -> Tensor:
    return _unary("sqrt", a, np.sqrt, lambda x, o: 0.5 / o)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax over one axis."""
    a = _as_tensor(a)
    if a.shape[axis % a.ndim] == 0:
        raise ShapeError(f"softmax: empty axis {axis} for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make("softmax", out, (a,), backward_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if a.shape[axis % a.ndim] == 0:
        raise ShapeError(f"log_softmax: empty axis {axis} for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def backward_fn(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), backward_fn)


def l2_norm(a) -> Tensor:
    """Frobenius norm over all entries; subgradient 0 at the origin."""
    a = _as_tensor(a)
    out = np.sqrt((a.data * a.data).sum())

    def backward_fn(g):
        if out == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / out,)

    return _make("l2_norm", np.asarray(out), (a,), backward_fn)


# ---------------------------------------------------------------------------
# Shape surgery

def transpose(a, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: needs at least 2 axes, got shape {a.shape}")
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _make("transpose", out, (a,), backward_fn)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), backward_fn)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    axis = axis % a.ndim
    if not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError(
            f"slice_axis: range [{start}:{stop}] out of bounds for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.data[index].copy()

    def backward_fn(g):
        grad = np.zeros_like(a.data)
        grad[index] = g
        return (grad,)

    return _make("slice", out, (a,), backward_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        grads = []
        index = [slice(None)] * g.ndim
        for i in range(len(tensors)):
            index[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(index)].copy())
        return tuple(grads)

    return _make("concat", out, tuple(tensors), backward_fn)


# ---------------------------------------------------------------------------
# Reverse pass

def _topo_order(root: Tensor) -> list:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad leaf of ``root``.

    Gradients accumulate across calls until ``zero_grad``; the root must be
    a scalar produced by taped operations.
    """
    if root.size != 1:
        raise AutodiffError(f"backward: root must be scalar, got shape {root.shape}")
    if not root._parents:
        raise AutodiffError("backward: root was not produced by taped operations")

    flow: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flow:
                flow[key] = flow[key] + pg
            else:
                flow[key] = pg


# ---------------------------------------------------------------------------
# Attention and the finite-difference oracle

def attention_probs(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic attention matrix softmax(QK^T / sqrt(d_k))."""
    d_k = q.shape[-1]
    if k.shape[-1] != d_k:
        raise ShapeError(
            f"scaled_dot_attention: key dimension mismatch, Q has d_k={d_k}, "
            f"K has d_k={k.shape[-1]}")
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d_k))
    return softmax(scores, axis=-1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(QK^T / sqrt(d_k)) V with row-wise softmax.

    Q: (..., S_q, d_k), K: (..., S_k, d_k), V: (..., S_k, d_v); leading axes
    broadcast elementwise.
    """
    return matmul(attention_probs(q, k), v)


@dataclass
class GradCheckReport:
    """Outcome of an analytic-vs-central-differences comparison."""

    max_rel_error: float
    tolerance: float
    analytic: np.ndarray
    numeric: np.ndarray
    failures: list = field(default_factory=list)  # (flat index, rel error)

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_check(f, point: Tensor, step: float = 1e-5, tolerance: float = 1e-4,
               denom_floor: float = 1e-6) -> GradCheckReport:
    """Compare the analytic gradient of scalar-valued ``f`` at ``point``
    against central finite differences.

    Relative error per entry is |a - n| / max(|a|, |n|, denom_floor); the
    floor keeps near-zero gradients from producing spurious 0/0 blowups.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    x = Tensor(point.data.copy(), requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise AutodiffError("grad_check: f must be scalar-valued")
    if not np.isfinite(out.data).all():
        raise ValueError("grad_check: f(point) is not finite")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(Tensor(x.data.copy())).data)
            flat[i] = orig - step
            lo = float(f(Tensor(x.data.copy())).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (hi - lo) / (2.0 * step)

    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), denom_floor)
    rel = diff / denom
    failures = [(int(i), float(rel.reshape(-1)[i]))
                for i in np.flatnonzero(rel.reshape(-1) > tolerance)]
    return GradCheckReport(max_rel_error=float(rel.max()) if rel.size else 0.0,
                           tolerance=tolerance, analytic=analytic,
                           numeric=numeric, failures=failures)
