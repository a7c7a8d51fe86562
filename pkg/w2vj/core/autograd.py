"""
Reverse-mode differentiable arrays for w2vj.

A ``Tensor`` wraps a numpy array. Every operation records its parents and a
backward rule; ``Tensor.backward`` walks the graph in reverse topological
order and accumulates gradients into the leaves that require them. Values are
checked for finiteness after every operation.
"""

import math
from typing import Any, Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..utils.errors import NonFiniteError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", np.ndarray, float, int]
IntPair = Union[int, Tuple[int, int]]
Axis = Optional[Union[int, Tuple[int, ...]]]


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    # numpy defers mixed ndarray/Tensor arithmetic to the Tensor operators
    __array_priority__ = 100

    def __init__(
        self,
        data: Union[np.ndarray, float, Sequence[float]],
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: BackwardFn,
        op: str = "op",
    ) -> "Tensor":
        """Create the result of an operation, recording history when needed."""
        data = np.asarray(data)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced non-finite values")
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return int(self.data.shape[0])

    # ------------------------------------------------------------------
    # Backward pass
    # ------------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got dims {self.dims}")
        if not self.requires_grad:
            return

        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    grad = grad.astype(node.data.dtype, copy=False)
                    node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: object) -> "Tensor":
        return index_select(self, index)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *dims: int) -> "Tensor":
        if len(dims) == 1 and isinstance(dims[0], (tuple, list)):
            dims = tuple(dims[0])
        return reshape(self, dims)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes if axes else None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


# ----------------------------------------------------------------------
# Helpers
# ----------------------------------------------------------------------


def as_tensor(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    """Wrap a constant as a Tensor, matching ``like``'s dtype when given."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _pair(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b_t = as_tensor(b)
    return as_tensor(a, like=b_t), b_t


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def detach(x: Tensor) -> Tensor:
    """Return a constant copy of ``x`` without history."""
    return Tensor(x.data)


# ----------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor.from_op(a.data / b.data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor.from_op(a.data**exponent, (a,), backward, "pow")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dims {a.dims} @ {b.dims}")

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor.from_op(a.data @ b.data, (a, b), backward, "matmul")


# ----------------------------------------------------------------------
# Reductions
# ----------------------------------------------------------------------


def _expand_reduced(
    g: np.ndarray, shape: Tuple[int, ...], axis: Any, keepdims: bool
) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)

    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return Tensor.from_op(out, (a,), backward, "sum")


def mean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    peak = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - peak)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = np.log(total) + peak
    weights = shifted / total

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * weights,)

    data = out if keepdims else np.squeeze(out, axis=axis)
    return Tensor.from_op(data, (a,), backward, "logsumexp")


# ----------------------------------------------------------------------
# Pointwise nonlinearities
# ----------------------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return Tensor.from_op(x * cdf, (a,), backward, "gelu")


def silu(a: Tensor) -> Tensor:
    """Swish: x * sigmoid(x)."""
    x = a.data
    sig = 0.5 * (np.tanh(0.5 * x) + 1.0)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g * sig * (1.0 + x * (1.0 - sig)),)

    return Tensor.from_op(x * sig, (a,), backward, "silu")


# ----------------------------------------------------------------------
# Normalized exponentials
# ----------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0."""
    x = a.data
    if mask is not None:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(valid, x, -np.inf)
    peak = np.max(x, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(x - peak)
    total = np.sum(e, axis=axis, keepdims=True)
    total = np.where(total > 0, total, 1.0)
    out = (e / total).astype(a.dtype, copy=False)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor.from_op(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    peak = np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(x - peak), axis=axis, keepdims=True)) + peak
    out = x - lse

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return Tensor.from_op(out, (a,), backward, "log_softmax")


# ----------------------------------------------------------------------
# Shape manipulation
# ----------------------------------------------------------------------


def reshape(a: Tensor, dims: Sequence[int]) -> Tensor:
    source = a.shape
    return Tensor.from_op(
        a.data.reshape(tuple(dims)), (a,), lambda g: (g.reshape(source),), "reshape"
    )


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (np.transpose(g, inverse),)

    return Tensor.from_op(np.transpose(a.data, axes), (a,), backward, "transpose")


def _is_basic_index(index: object) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


def index_select(a: Tensor, index: Any) -> Tensor:
    """``a[index]`` with basic or advanced (integer/boolean array) indexing."""
    if isinstance(index, np.ndarray) and index.dtype == bool:
        index = np.nonzero(index)
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(np.array(out), (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return tuple(np.split(g, bounds, axis=axis))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor.from_op(out, tensors, backward, "concat")


def where(condition: np.ndarray, a: Operand, b: Operand) -> Tensor:
    """Select ``a`` where ``condition`` holds, ``b`` elsewhere (broadcasting)."""
    a, b = _pair(a, b)
    cond = np.asarray(condition, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        zero = np.zeros_like(g)
        return (
            _unbroadcast(np.where(cond, g, zero), a.shape),
            _unbroadcast(np.where(cond, zero, g), b.shape),
        )

    return Tensor.from_op(out, (a, b), backward, "where")


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard`` exactly; gradient passed unchanged to ``soft``."""
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through dims {hard.shape} vs {soft.dims}")
    return Tensor.from_op(hard, (soft,), lambda g: (g,), "straight_through")


# ----------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear input width {x.shape[-1]} vs weight {weight.dims}")
    out = matmul(x, transpose(weight))
    return out if bias is None else out + bias


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    data = x.data
    width = data.shape[-1]
    mu = data.mean(axis=-1, keepdims=True)
    centered = data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * weight.data + bias.data

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        gxhat = g * weight.data
        gx = (inv_std / width) * (
            width * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        gw = _unbroadcast(g * xhat, weight.shape)
        gb = _unbroadcast(g, bias.shape)
        return gx, gw, gb

    return Tensor.from_op(out, (x, weight, bias), backward, "layer_norm")


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of the second half."""
    half = a.shape[axis] // 2
    index_a = [slice(None)] * a.ndim
    index_b = [slice(None)] * a.ndim
    index_a[axis] = slice(0, half)
    index_b[axis] = slice(half, 2 * half)
    return a[tuple(index_a)] * sigmoid(a[tuple(index_b)])


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``p`` is 0."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * Tensor(keep)


def _as_pair(value: IntPair) -> Tuple[int, int]:
    if isinstance(value, tuple):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: IntPair = 0,
    groups: int = 1,
) -> Tensor:
    """Time-major 1-D convolution.

    ``x`` is (L, C_in), ``weight`` is (C_out, C_in / groups, K); the result
    is (L_out, C_out) with L_out = floor((L + pad - K) / stride) + 1.
    """
    length, channels = x.shape
    c_out, c_per_group, kernel = weight.shape
    if channels != c_per_group * groups or c_out % groups:
        raise ShapeError(
            f"conv1d input {x.dims} incompatible with weight {weight.dims} "
            f"(groups={groups})"
        )
    left, right = _as_pair(padding)
    xp = np.pad(x.data, ((left, right), (0, 0)))
    if xp.shape[0] < kernel:
        raise ShapeError(f"conv1d input length {length} shorter than kernel {kernel}")
    l_out = (xp.shape[0] - kernel) // stride + 1
    windows = sliding_window_view(xp, kernel, axis=0)[::stride]
    windows = windows.reshape(l_out, groups, c_per_group, kernel)
    w = weight.data.reshape(groups, c_out // groups, c_per_group, kernel)
    out = np.einsum("lgck,gock->lgo", windows, w, optimize=True).reshape(l_out, c_out)
    if bias is not None:
        out = out + bias.data

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        gg = g.reshape(l_out, groups, c_out // groups)
        gw = np.einsum("lgo,lgck->gock", gg, windows, optimize=True)
        gw = gw.reshape(weight.shape)
        gwin = np.einsum("lgo,gock->lgck", gg, w, optimize=True)
        gwin = gwin.reshape(l_out, channels, kernel)
        gxp = np.zeros_like(xp)
        span = stride * (l_out - 1) + 1
        for k in range(kernel):
            gxp[k : k + span : stride] += gwin[:, :, k]
        grads: List[Optional[np.ndarray]] = [gxp[left : left + length], gw]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward, "conv1d")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: IntPair = 1,
    padding: IntPair = 0,
) -> Tensor:
    """Channels-first 2-D convolution: (C_in, H, W) -> (C_out, H_out, W_out)."""
    c_in, height, width = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w:
        raise ShapeError(
            f"conv2d input {x.dims} incompatible with weight {weight.dims}"
        )
    sh, sw = _as_pair(stride)
    ph, pw = _as_pair(padding)
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeError(f"conv2d input {x.dims} smaller than kernel ({kh}, {kw})")
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    h_out, w_out = windows.shape[1], windows.shape[2]
    out = np.einsum("chwij,ocij->ohw", windows, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        gw = np.einsum("ohw,chwij->ocij", g, windows, optimize=True)
        gwin = np.einsum("ohw,ocij->chwij", g, weight.data, optimize=True)
        gxp = np.zeros_like(xp)
        span_h = sh * (h_out - 1) + 1
        span_w = sw * (w_out - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + span_h : sh, j : j + span_w : sw] += gwin[..., i, j]
        gx = gxp[:, ph : ph + height, pw : pw + width]
        grads: List[Optional[np.ndarray]] = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward, "conv2d")
