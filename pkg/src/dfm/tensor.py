"""Dense float64 tensors with a reverse-mode tape and activation accounting.

Recording only happens inside an open :class:`Tape`::

    with Tape() as tape:
        loss = (x @ w).sum()
        tape.backward(loss)

Outside a tape every op is evaluated eagerly and nothing is retained, which
is how inference runs.

Saving policy
-------------
A tape holds, for every recorded node, the node's output array plus the
arrays its adjoint needs. ``retained_scalars`` is the total size of the
*distinct* arrays held (identity-based, so an activation saved by the next op
is not counted twice). Parameter data and integer index arrays are never
counted. Per op, the saved arrays are:

=====================  ==================================================
op                     saved (besides the output)
=====================  ==================================================
matmul, linear         both operands (parameters excluded)
mul, div               both operands
minimum, maximum       both operands
relu, gelu, abs        the input
sigmoid, softmax       nothing extra (the output is reused)
layer_norm             normalized input and 1/std (one per row)
softmax_cross_entropy  the softmax probabilities (+ per-row weights)
add, sub, scale,       nothing
shift, sum, mean,
concat, slice,
reshape, transpose,
gather_rows
=====================  ==================================================
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Tape used incorrectly (non-scalar loss, closed tape, foreign tensor)."""


# ---------------------------------------------------------------------------
# activation meter and tape stack, one per thread


class _Meter:
    __slots__ = ("retained", "peak")

    def __init__(self) -> None:
        self.retained = 0
        self.peak = 0

    def add(self, n: int) -> None:
        self.retained += n
        if self.retained > self.peak:
            self.peak = self.retained


_local = threading.local()


def _meter() -> _Meter:
    m = getattr(_local, "meter", None)
    if m is None:
        m = _local.meter = _Meter()
    return m


def _tapes() -> list:
    s = getattr(_local, "tapes", None)
    if s is None:
        s = _local.tapes = []
    return s


def current_tape() -> "Tape | None":
    s = _tapes()
    return s[-1] if s else None


def tape_metrics() -> tuple[int, int]:
    """(retained, peak) activation scalars over all live tapes of this thread."""
    m = _meter()
    return m.retained, m.peak


def reset_peak() -> None:
    m = _meter()
    m.peak = m.retained


# ---------------------------------------------------------------------------


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: "_Node | None" = None

    # -- basic properties
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self):
        return None if self._node is None else (id(self._node.tape), self._node.index)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        extra = ", requires_grad=True" if self.requires_grad else ""
        return f"{type(self).__name__}(shape={self.shape}{extra})"

    # -- operator sugar
    def __add__(self, other):
        if _is_number(other):
            return shift(self, other)
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if _is_number(other):
            return shift(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        if _is_number(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_number(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)


class Parameter(Tensor):
    """Trainable leaf. Its data never counts as a retained activation."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class _Node:
    tape: "Tape"
    index: int
    op: str
    inputs: tuple
    out: Tensor
    backward: Callable
    saved: tuple = ()


@dataclass(eq=False)
class Tape:
    """Append-only record of differentiable ops with retained-scalar counts."""

    nodes: list = field(default_factory=list)
    retained_scalars: int = 0
    peak_retained: int = 0
    closed: bool = False

    def __post_init__(self) -> None:
        self._held: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()
        self.free()

    def _hold(self, arr: np.ndarray) -> None:
        if id(arr) in self._held:
            return
        self._held[id(arr)] = arr
        n = int(arr.size)
        self.retained_scalars += n
        self.peak_retained = max(self.peak_retained, self.retained_scalars)
        _meter().add(n)

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward: Callable, saved=()) -> None:
        if self.closed:
            raise TapeError("cannot record on a freed tape")
        for t in inputs:
            if t._node is not None and t._node.tape is not self:
                raise TapeError(f"{op}: input {t!r} belongs to another tape; detach it first")
        node = _Node(self, len(self.nodes), op, tuple(inputs), out, backward)
        self.nodes.append(node)
        out._node = node
        out.requires_grad = True
        self._hold(out.data)
        for s in saved:
            if isinstance(s, Parameter):
                continue
            arr = s.data if isinstance(s, Tensor) else s
            if arr.dtype.kind in "iub":
                continue
            self._hold(arr)

    def backward(self, root: Tensor, grad=None) -> None:
        """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

        ``grad`` seeds a non-scalar root; a scalar root defaults to 1.
        Nodes are visited in strict reverse construction order.
        """
        if self.closed:
            raise TapeError("tape already freed")
        if grad is None:
            if root.size != 1:
                raise TapeError(f"backward needs a scalar loss, got shape {root.shape}")
            grad = np.ones_like(root.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != root.shape:
                raise DimensionError(f"seed gradient {grad.shape} does not match root {root.shape}")
        node = root._node
        if node is None or node.tape is not self:
            if root.requires_grad and root._node is None:
                _accumulate_leaf(root, grad)
                return
            raise TapeError("root is not recorded on this tape")
        pending = {id(root): grad}
        for n in reversed(self.nodes[: node.index + 1]):
            g = pending.pop(id(n.out), None)
            if g is None:
                continue
            grads = n.backward(g)
            for t, gi in zip(n.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    _accumulate_leaf(t, gi)
                else:
                    prev = pending.get(id(t))
                    pending[id(t)] = gi if prev is None else prev + gi

    def free(self) -> None:
        if self.closed:
            return
        _meter().retained -= self.retained_scalars
        self.retained_scalars = 0
        self._held.clear()
        self.nodes.clear()
        self.closed = True


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += g.reshape(t.shape)


def backward(loss: Tensor, grad=None) -> None:
    """Backward through the tape that recorded ``loss``."""
    if loss._node is None:
        raise TapeError("loss is not on an open tape")
    loss._node.tape.backward(loss, grad)


def _emit(op: str, out_data, inputs: Sequence[Tensor], backward: Callable, saved=()) -> Tensor:
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward, saved)
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if t.ndim == 0 and g.ndim != 0 else g


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[..., m, k] @ [k, n] or batched [B, m, k] @ [B, k, n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _emit("matmul", A @ B, (a, b), bw, saved=(a, b))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., k] @ w[k, n] (+ b[n])."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    X, W = x.data, w.data
    out = X @ W
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ W.T if x.requires_grad else None
        gw = X.reshape(-1, X.shape[-1]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return _emit("linear", out, inputs, bw, saved=(x, w))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose: needs >= 2 axes, got {x.shape}")
    return _emit("transpose", np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), (x,),
                 lambda g: (np.swapaxes(g, -1, -2),))


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(g, b)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(-g, b)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (_unscalar(g * B, a), _unscalar(g * A, b)), saved=(a, b))


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("div", a, b)
    A, B = a.data, b.data

    def bw(g):
        return _unscalar(g / B, a), _unscalar(-g * A / (B * B), b)

    return _emit("div", A / B, (a, b), bw, saved=(a, b))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same("minimum", a, b)
    A, B = a.data, b.data

    def bw(g):
        pick = A <= B
        return _unscalar(np.where(pick, g, 0.0), a), _unscalar(np.where(pick, 0.0, g), b)

    return _emit("minimum", np.minimum(A, B), (a, b), bw, saved=(a, b))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same("maximum", a, b)
    A, B = a.data, b.data

    def bw(g):
        pick = A >= B
        return _unscalar(np.where(pick, g, 0.0), a), _unscalar(np.where(pick, 0.0, g), b)

    return _emit("maximum", np.maximum(A, B), (a, b), bw, saved=(a, b))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("shift", x.data + c, (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    X = x.data
    return _emit("relu", np.maximum(X, 0.0), (x,), lambda g: (g * (X > 0),), saved=(x,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    X = x.data
    cdf = 0.5 * (1.0 + erf(X / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * X * X)
        return (g * (cdf + X * pdf),)

    return _emit("gelu", X * cdf, (x,), bw, saved=(x,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def abs_(x: Tensor) -> Tensor:
    X = x.data
    return _emit("abs", np.abs(X), (x,), lambda g: (g * np.sign(X),), saved=(x,))


def square(x: Tensor) -> Tensor:
    return mul(x, x)


# ---------------------------------------------------------------------------
# reductions and shape


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} is invalid for shape {x.shape}")
    return axis % x.ndim


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        shape = x.shape
        return _emit("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = _axis(x, axis)
    shape = x.shape
    return _emit("sum", x.data.sum(axis=ax), (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = max(x.size, 1)
        shape = x.shape
        return _emit("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))
    ax = _axis(x, axis)
    n = x.shape[ax]
    shape = x.shape
    return _emit("mean", x.data.mean(axis=ax), (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = _axis(ref, axis)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def concat_last_axis(*tensors: Tensor) -> Tensor:
    return concat(tensors, axis=-1)


def slice_(x: Tensor, index) -> Tensor:
    """Basic (view-style) indexing: ints, slices, Ellipsis."""
    idx = index if isinstance(index, tuple) else (index,)
    for i in idx:
        if not (isinstance(i, (int, slice, np.integer)) or i is Ellipsis):
            raise TypeError("slice_ supports ints, slices and Ellipsis; use gather_rows for fancy indexing")
    try:
        out = np.array(x.data[index], copy=True)
    except IndexError as e:
        raise DimensionError(f"slice {index!r} invalid for shape {x.shape}") from e
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] += g
        return (full,)

    return _emit("slice", out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape).copy()
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from e
    old = x.shape
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def gather_rows(w: Tensor, index) -> Tensor:
    """w[index] along axis 0; the adjoint scatters into the used rows only."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= w.shape[0]):
        raise IndexError(f"row index out of range [0, {w.shape[0]})")
    shape = w.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("gather_rows", w.data[idx], (w,), bw, saved=(idx,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then affine with ``gain``/``bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: gain/bias must be ({x.shape[-1]},)")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    var = X.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * rstd
    G = gain.data
    n = X.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * G
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, n)
        gg = (lead * xhat.reshape(-1, n)).sum(axis=0) if gain.requires_grad else None
        gb = lead.sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb

    return _emit("layer_norm", xhat * G + bias.data, (x, gain, bias), bw, saved=(xhat, rstd))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", out, (x,), bw)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Mean (optionally class-weighted) negative log-likelihood.

    With ``class_weights`` the mean is ``sum(w[y_i] * nll_i) / sum(w[y_i])``.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [B, C], got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, C = logits.shape
    if y.shape[0] != B:
        raise DimensionError(f"{y.shape[0]} labels for {B} rows")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise ValueError(f"label out of range [0, {C})")
    logp = log_softmax_np(logits.data)
    nll = -logp[np.arange(B), y]
    if class_weights is None:
        w = None
        denom = float(B)
        loss = nll.sum() / denom
    else:
        cw = np.asarray(class_weights.data if isinstance(class_weights, Tensor) else class_weights, dtype=np.float64)
        if cw.shape != (C,) or np.any(cw <= 0):
            raise ValueError("class_weights must be positive with one entry per class")
        w = cw[y]
        denom = float(w.sum())
        loss = (w * nll).sum() / denom
    probs = np.exp(logp)

    def bw(g):
        d = probs.copy()
        d[np.arange(B), y] -= 1.0
        if w is not None:
            d *= w[:, None]
        return (d * (float(g) / denom),)

    saved = (probs,) if w is None else (probs, w)
    return _emit("softmax_cross_entropy", np.asarray(loss), (logits,), bw, saved=saved)


def im2col(x: Tensor, kernel: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    """Channels-last patches: [B, H, W, C] -> [B, Ho, Wo, kernel*kernel*C].

    Patch layout is (di, dj, c) row-major, so a conv weight of shape
    [kernel*kernel*C, C_out] indexed the same way turns this into a conv.
    """
    if x.ndim != 4:
        raise DimensionError(f"im2col expects [B, H, W, C], got {x.shape}")
    B, H, W, C = x.shape
    Ho = (H + 2 * pad - kernel) // stride + 1
    Wo = (W + 2 * pad - kernel) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"kernel {kernel} too large for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty((B, Ho, Wo, kernel * kernel, C))
    for di in range(kernel):
        for dj in range(kernel):
            out[:, :, :, di * kernel + dj, :] = xp[:, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride, :]
    out = out.reshape(B, Ho, Wo, kernel * kernel * C)
    padded = xp.shape

    def bw(g):
        g = g.reshape(B, Ho, Wo, kernel * kernel, C)
        gp = np.zeros(padded)
        for di in range(kernel):
            for dj in range(kernel):
                gp[:, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride, :] += g[:, :, :, di * kernel + dj, :]
        return (gp[:, pad:pad + H, pad:pad + W, :],)

    return _emit("im2col", out, (x,), bw)
