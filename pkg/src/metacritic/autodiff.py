"""Reverse-mode automatic differentiation on numpy arrays.

Every backward rule is written in terms of the differentiable operations
defined here, so running :func:`grad` with ``create_graph=True`` yields
gradients that are themselves nodes of a new graph. That is what makes
differentiating through an unrolled gradient-descent loop possible.

All values are stored in double precision.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def grad_mode(enabled: bool):
    """Temporarily switch graph recording on or off (per thread)."""
    previous = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = previous


def no_grad():
    return grad_mode(False)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class Tensor:
    """An n-dimensional float64 array that may carry a graph node.

    A tensor without a node (``requires_grad`` false) is a constant.
    Tensors are never mutated in place once created.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[["Tensor"], Sequence[Optional["Tensor"]]]] = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def op(self) -> str:
        return self._op

    @property
    def parents(self) -> Tuple["Tensor", ...]:
        return self._parents

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        if not self.is_leaf:
            raise ValueError("requires_grad_ is only valid on leaf tensors")
        self.requires_grad = flag
        return self

    def __repr__(self) -> str:
        suffix = f", op={self._op}" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{suffix})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method aliases ---------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------

def _reduce_axes(from_shape: Tuple[int, ...], to_shape: Tuple[int, ...]) -> Tuple[Tuple[int, ...], int]:
    lead = len(from_shape) - len(to_shape)
    if lead < 0:
        raise ShapeError("sum_to", f"cannot reduce {from_shape} to {to_shape}")
    axes = list(range(lead))
    for i, n in enumerate(to_shape):
        m = from_shape[lead + i]
        if n == 1 and m != 1:
            axes.append(lead + i)
        elif n != m:
            raise ShapeError("sum_to", f"cannot reduce {from_shape} to {to_shape}")
    return tuple(axes), lead


def sum_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape``; the adjoint of :func:`broadcast_to`."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    axes, lead = _reduce_axes(x.shape, shape)
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    data = data.reshape(shape)
    src_shape = x.shape
    return _record(data, (x,), lambda g, need: (broadcast_to(g, src_shape),), "sum_to")


def broadcast_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", f"cannot broadcast {x.shape} to {shape}") from None
    src_shape = x.shape
    return _record(data, (x,), lambda g, need: (sum_to(g, src_shape),), "broadcast_to")


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"operands with shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g, need: (sum_to(g, sa) if need[0] else None,
                                                          sum_to(g, sb) if need[1] else None), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g, need: (sum_to(g, sa) if need[0] else None,
                                                          sum_to(neg(g), sb) if need[1] else None), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g, need: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data * b.data, (a, b), lambda g, need: (sum_to(mul(g, b), sa) if need[0] else None,
                                      sum_to(mul(g, a), sb) if need[1] else None), "mul"
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    sa, sb = a.shape, b.shape

    def backward(g, need):
        ga = div(g, b)
        gb = neg(div(mul(ga, a), b)) if need[1] else None
        return (sum_to(ga, sa) if need[0] else None), (sum_to(gb, sb) if need[1] else None)

    return _record(a.data / b.data, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    a = as_tensor(a)
    c = float(exponent)

    def backward(g, need):
        if c == 0.0:
            return (None,)
        if c == 1.0:
            return (g,)
        return (mul(g, mul(power(a, c - 1.0), c)),)

    return _record(np.power(a.data, c), (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.exp(a.data), (a,), lambda g, need: (mul(g, exp(a)),), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g, need: (div(g, a),), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    # second derivative is zero almost everywhere, so the mask is a constant
    return _record(a.data * mask, (a,), lambda g, need: (mul(g, Tensor(mask)),), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)

    def backward(g, need):
        s = sigmoid(a)
        return (mul(g, mul(s, sub(1.0, s))),)

    return _record(_sigmoid(a.data), (a,), backward, "sigmoid")


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    src_shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src_shape))

    def backward(g, need):
        return (broadcast_to(reshape(g, kept), src_shape),)

    return _record(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {shape}") from None
    src_shape = a.shape
    return _record(data, (a,), lambda g, need: (reshape(g, src_shape),), "reshape")


def flatten(a, start_dim: int = 1) -> Tensor:
    a = as_tensor(a)
    return reshape(a, a.shape[:start_dim] + (-1,))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g, need: (transpose(g, inverse),), "transpose")


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def _is_basic_key(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in items)


def getitem(a, key) -> Tensor:
    """Numpy-style indexing (basic or advanced); adjoint is :func:`scatter_add`."""
    a = as_tensor(a)
    src_shape = a.shape
    try:
        data = a.data[key]
    except IndexError as exc:
        raise ShapeError("getitem", f"{exc} (operand shape {src_shape})") from None
    return _record(np.array(data), (a,), lambda g, need: (scatter_add(g, key, src_shape),), "getitem")


def scatter_add(values, key, shape: Tuple[int, ...]) -> Tensor:
    """Zeros of ``shape`` with ``values`` accumulated at ``key``."""
    values = as_tensor(values)
    out = np.zeros(shape, dtype=np.float64)
    if _is_basic_key(key):
        out[key] += values.data
    else:
        np.add.at(out, key, values.data)
    return _record(out, (values,), lambda g, need: (getitem(g, key),), "scatter_add")


def pad(a, pads: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero-pad with independent (before, after) counts per axis."""
    a = as_tensor(a)
    pads = [tuple(int(v) for v in p) for p in pads]
    if len(pads) != a.ndim or any(v < 0 for p in pads for v in p):
        raise ShapeError("pad", f"invalid pad spec {pads} for shape {a.shape}")
    shape = tuple(n + lo + hi for n, (lo, hi) in zip(a.shape, pads))
    key = tuple(slice(lo, lo + n) for n, (lo, _) in zip(a.shape, pads))
    return scatter_add(a, key, shape)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", "nothing to concatenate")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        other = [n for i, n in enumerate(t.shape) if i != axis]
        first = [n for i, n in enumerate(tensors[0].shape) if i != axis]
        if t.ndim != ndim or other != first:
            raise ShapeError(
                "concat", f"shapes {tensors[0].shape} and {t.shape} differ off axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g, need):
        grads = []
        for k, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
            if not need[k]:
                grads.append(None)
                continue
            key = (slice(None),) * axis + (slice(int(lo), int(hi)),)
            grads.append(getitem(g, key))
        return tuple(grads)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _record(data, tensors, backward, "concat")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            "matmul", f"inner dimensions differ: {a.shape[-1]} (of {a.shape}) vs {b.shape[-2]} (of {b.shape})"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", f"batch dimensions {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
    sa, sb = a.shape, b.shape

    def backward(g, need):
        ga = sum_to(matmul(g, swap_last(b)), sa) if need[0] else None
        gb = sum_to(matmul(swap_last(a), g), sb) if need[1] else None
        return ga, gb

    if a.shape[-1] == 1:
        data = a.data * b.data  # rank-1 product; broadcasting beats BLAS here
    else:
        data = np.matmul(a.data, b.data)
    return _record(data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# Composite neural-network operations
# ---------------------------------------------------------------------------

def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    z = sub(x, shift)
    return sub(z, log(tsum(exp(z), axis=axis, keepdims=True)))


def softmax(x, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


def _check_labels(op: str, n: int, classes: int, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(op, f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(op, f"labels must lie in [0, {classes})")
    return labels.astype(np.int64)


def nll_loss(log_probs, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise log-probabilities."""
    log_probs = as_tensor(log_probs)
    if log_probs.ndim != 2:
        raise ShapeError("nll_loss", f"expected (batch, classes), got {log_probs.shape}")
    n, c = log_probs.shape
    labels = _check_labels("nll_loss", n, c, labels)
    picked = getitem(log_probs, (np.arange(n), labels))
    return neg(mean(picked))


def cross_entropy(logits, labels) -> Tensor:
    return nll_loss(log_softmax(logits, axis=-1), labels)


def mse_loss(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mse_loss", f"shapes {a.shape} and {b.shape} differ")
    d = sub(a, b)
    return mean(mul(d, d))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out_features, in_features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", f"input {x.shape} incompatible with weight {weight.shape}")
    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out


def conv_output_length(length: int, kernel_size: int, dilation: int = 1, stride: int = 1,
                       pad_left: int = 0, pad_right: int = 0) -> int:
    """Output length of a 1-D convolution with asymmetric padding."""
    return (length + pad_left + pad_right - dilation * (kernel_size - 1) - 1) // stride + 1


def conv1d(x, weight, bias=None, *, stride: int = 1, dilation: int = 1,
           padding: Union[int, Tuple[int, int]] = 0) -> Tensor:
    """1-D cross-correlation.

    ``x`` is (batch, in_channels, length), ``weight`` (out_channels, in_channels, kernel).
    ``padding`` is either a symmetric count or a ``(left, right)`` pair.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError("conv1d", f"expected 3-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            "conv1d", f"input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    left, right = (padding, padding) if isinstance(padding, int) else padding
    batch, cin, length = x.shape
    cout, _, k = weight.shape
    out_len = conv_output_length(length, k, dilation, stride, left, right)
    if out_len < 1:
        raise ShapeError("conv1d", f"length {length} too short for kernel {k} at dilation {dilation}")
    if left or right:
        x = pad(x, [(0, 0), (0, 0), (left, right)])
    taps = np.arange(k)[:, None] * dilation + np.arange(out_len)[None, :] * stride
    cols = getitem(x, (slice(None), slice(None), taps))  # (B, C, K, Lout)
    cols = reshape(cols, (batch, cin * k, out_len))
    out = matmul(reshape(weight, (cout, cin * k)), cols)
    if bias is not None:
        out = add(out, reshape(as_tensor(bias), (1, cout, 1)))
    return out


def _pair(v) -> Tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x, weight, bias=None, *, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation; ``x`` is (B, C, H, W), ``weight`` (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            "conv2d", f"input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    batch, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"input {h}x{w} too small for kernel {kh}x{kw}")
    if ph or pw:
        x = pad(x, [(0, 0), (0, 0), (ph, ph), (pw, pw)])
    rows = (np.arange(kh)[:, None] + np.arange(ho)[None, :] * sh)  # (kh, ho)
    colsi = (np.arange(kw)[:, None] + np.arange(wo)[None, :] * sw)  # (kw, wo)
    ih = np.broadcast_to(rows[:, None, :, None], (kh, kw, ho, wo)).reshape(kh * kw, ho * wo)
    iw = np.broadcast_to(colsi[None, :, None, :], (kh, kw, ho, wo)).reshape(kh * kw, ho * wo)
    patches = getitem(x, (slice(None), slice(None), ih, iw))  # (B, C, kh*kw, ho*wo)
    patches = reshape(patches, (batch, cin * kh * kw, ho * wo))
    out = matmul(reshape(weight, (cout, cin * kh * kw)), patches)
    out = reshape(out, (batch, cout, ho, wo))
    if bias is not None:
        out = add(out, reshape(as_tensor(bias), (1, cout, 1, 1)))
    return out


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("max_pool2d", f"expected 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ShapeError("max_pool2d", f"input {h}x{w} smaller than window {size}")
    win = x.data[:, :, : ho * size, : wo * size].reshape(b, c, ho, size, wo, size)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, size * size)
    arg = win.argmax(axis=-1)  # ties resolve to the first element
    di, dj = np.divmod(arg, size)
    bi, ci, hi, wi = np.meshgrid(np.arange(b), np.arange(c), np.arange(ho), np.arange(wo), indexing="ij")
    return getitem(x, (bi, ci, hi * size + di, wi * size + dj))


def avg_pool2d(x, size: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("avg_pool2d", f"expected 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ShapeError("avg_pool2d", f"input {h}x{w} smaller than window {size}")
    if (h, w) != (ho * size, wo * size):
        x = getitem(x, (slice(None), slice(None), slice(0, ho * size), slice(0, wo * size)))
    x = reshape(x, (b, c, ho, size, wo, size))
    return mean(x, axis=(3, 5))


def global_avg_pool(x) -> Tensor:
    """Average over every axis after the channel axis: (B, C, ...) -> (B, C)."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError("global_avg_pool", f"expected at least 3-D input, got {x.shape}")
    return mean(x, axis=tuple(range(2, x.ndim)))


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               eps: float = 1e-5) -> Tensor:
    """Normalise along axis 1 with stored running statistics (never batch statistics).

    Because the statistics are constants, every sample is processed
    independently of the rest of its batch.
    """
    x = as_tensor(x)
    c = x.shape[1] if x.ndim >= 2 else None
    running_mean = np.asarray(running_mean, dtype=np.float64)
    running_var = np.asarray(running_var, dtype=np.float64)
    if c is None or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError("batch_norm", f"statistics of shape {running_mean.shape} do not match input {x.shape}")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    scale = 1.0 / np.sqrt(running_var + eps)
    x_hat = mul(sub(x, Tensor(running_mean.reshape(bshape))), Tensor(scale.reshape(bshape)))
    return add(mul(x_hat, reshape(as_tensor(gamma), bshape)), reshape(as_tensor(beta), bshape))


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------

PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "pow": power,
    "exp": exp,
    "log": log,
    "matmul": matmul,
    "linear": linear,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "nll_loss": nll_loss,
    "cross_entropy": cross_entropy,
    "mse_loss": mse_loss,
    "conv1d": conv1d,
    "conv2d": conv2d,
    "max_pool2d": max_pool2d,
    "avg_pool2d": avg_pool2d,
    "global_avg_pool": global_avg_pool,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "reshape": reshape,
    "flatten": flatten,
    "transpose": transpose,
    "pad": pad,
    "getitem": getitem,
    "batch_norm": batch_norm,
    "sum": tsum,
    "mean": mean,
}


def primitive_forward(op: str, inputs: Sequence, attrs: Optional[dict] = None) -> Tensor:
    """Apply a registered primitive by name."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*[as_tensor(t) if not isinstance(t, np.ndarray) or t.dtype.kind == "f" else t
                for t in inputs], **(attrs or {}))


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede children


def grad(root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> List[Tensor]:
    """Gradients of scalar ``root`` with respect to each tensor in ``wrt``.

    Tensors not reachable from ``root`` receive exact zeros. With
    ``create_graph`` the returned gradients are themselves differentiable.
    """
    root = as_tensor(root)
    if root.size != 1:
        raise ValueError(f"grad requires a scalar root, got shape {root.shape}")
    wrt = list(wrt)
    results: List[Optional[Tensor]] = [None] * len(wrt)
    if not root.requires_grad:
        return [Tensor(np.zeros(t.shape)) for t in wrt]

    order = _topological_order(root)
    targets: Dict[int, List[int]] = {}
    for i, t in enumerate(wrt):
        targets.setdefault(id(t), []).append(i)

    # only propagate into nodes from which some target is reachable
    relevant = set()
    for node in order:
        if id(node) in targets or any(id(p) in relevant for p in node._parents):
            relevant.add(id(node))

    grads: Dict[int, Tensor] = {id(root): Tensor(np.ones(root.shape))}
    with grad_mode(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for i in targets.get(id(node), ()):
                results[i] = g
            if node._backward is None:
                continue
            need = tuple(id(p) in relevant for p in node._parents)
            parent_grads = node._backward(g, need)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or id(p) not in relevant:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

    out = []
    for t, r in zip(wrt, results):
        if r is None:
            out.append(Tensor(np.zeros(t.shape)))
        elif not create_graph and r.requires_grad:
            out.append(r.detach())
        else:
            out.append(r)
    return out


def graph_is_acyclic(root: Tensor) -> bool:
    """Check that no node of ``root``'s graph is its own ancestor."""
    state: Dict[int, int] = {}
    stack = [(root, iter(root._parents))]
    state[id(root)] = 1
    while stack:
        node, it = stack[-1]
        nxt = next(it, None)
        if nxt is None:
            state[id(node)] = 2
            stack.pop()
            continue
        mark = state.get(id(nxt), 0)
        if mark == 1:
            return False
        if mark == 0:
            state[id(nxt)] = 1
            stack.append((nxt, iter(nxt._parents)))
    return True


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: Dict[str, float] = field(default_factory=dict)
    checked_coordinates: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-12)


def finite_difference_check(f: Callable, at, step: float = 1e-5,
                            max_coords_per_tensor: Optional[int] = None,
                            seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` maps a parameter set (anything with ``items()`` and ``replace()``,
    see :class:`metacritic.networks.ParamSet`, or a plain dict of arrays) to a
    scalar tensor. Large tensors can be spot-checked on a seeded random
    subset of ``max_coords_per_tensor`` coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    named = [(name, np.asarray(getattr(t, "data", t), dtype=np.float64)) for name, t in at.items()]
    rebuild = getattr(at, "replace", None)

    def call(values: Dict[str, np.ndarray], track: bool):
        tensors = {k: Tensor(v, requires_grad=track) for k, v in values.items()}
        params = rebuild(tensors) if rebuild is not None else tensors
        return f(params), tensors

    base = {k: v.copy() for k, v in named}
    root, leaves = call(base, True)
    order = [k for k, _ in named]
    analytic = dict(zip(order, (g.data for g in grad(root, [leaves[k] for k in order]))))

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0)
    for name, value in named:
        flat_idx = np.arange(value.size)
        if max_coords_per_tensor is not None and value.size > max_coords_per_tensor:
            flat_idx = np.sort(rng.choice(value.size, size=max_coords_per_tensor, replace=False))
        worst = 0.0
        for j in flat_idx:
            idx = np.unravel_index(j, value.shape)
            vals = []
            for sign in (1.0, -1.0):
                probe = dict(base)
                probe[name] = value.copy()
                probe[name][idx] += sign * step
                with no_grad():
                    out, _ = call(probe, False)
                v = float(out.data.reshape(-1)[0])
                if not np.isfinite(v):
                    raise FloatingPointError(f"non-finite value at {name}{[int(i) for i in idx]}")
                vals.append(v)
            numeric = (vals[0] - vals[1]) / (2 * step)
            err = float(relative_error(np.array(analytic[name][idx]), np.array(numeric)))
            worst = max(worst, err)
            report.checked_coordinates += 1
        report.per_parameter[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report


def backward(root: Tensor, wrt, retain: bool = False) -> Dict[str, Tensor]:
    """Gradient map ``name -> gradient`` for a named parameter collection."""
    items = list(wrt.items())
    grads = grad(root, [t for _, t in items], create_graph=retain)
    return {name: g for (name, _), g in zip(items, grads)}


__all__ = [
    "Tensor", "ShapeError", "grad", "backward", "grad_mode", "no_grad", "is_grad_enabled",
    "primitive_forward", "finite_difference_check", "GradCheckReport", "relative_error",
    "graph_is_acyclic", "conv_output_length", "PRIMITIVES",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "relu", "sigmoid", "tsum", "mean",
    "reshape", "flatten", "transpose", "getitem", "scatter_add", "pad", "concat", "matmul",
    "linear", "log_softmax", "softmax", "nll_loss", "cross_entropy", "mse_loss", "conv1d",
    "conv2d", "max_pool2d", "avg_pool2d", "global_avg_pool", "batch_norm", "sum_to",
    "broadcast_to", "as_tensor",
]
