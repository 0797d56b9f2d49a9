"""Primitive differentiable operations and the composites built from them.

Every backward rule is expressed with the functions in this module, which is what makes
gradients differentiable again when ``grad(..., create_graph=True)`` is used.
"""

import logging
from typing import Any, Optional, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError
from .tensor import Function, Tensor, as_tensor

logger = logging.getLogger(__name__)

Axis = Optional[Any]


def _broadcast_shape(*shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"shapes {', '.join(str(s) for s in shapes)} do not broadcast") from exc


def _sum_to_array(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if arr.shape == tuple(shape):
        return arr
    lead = arr.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, extent in enumerate(shape) if extent == 1 and arr.shape[i + lead] != 1
    )
    return arr.sum(axis=axes, keepdims=True).reshape(shape)


def _normalize_axes(axis: Axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# -- elementwise arithmetic ---------------------------------------------------------------------


class Add(Function):
    tag = "add"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a + b

    def backward(self, grad, a, b):
        return sum_to(grad, a.shape), sum_to(grad, b.shape)


class Sub(Function):
    tag = "sub"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a - b

    def backward(self, grad, a, b):
        return sum_to(grad, a.shape), sum_to(neg(grad), b.shape)


class Mul(Function):
    tag = "mul"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a * b

    def backward(self, grad, a, b):
        return sum_to(mul(grad, b), a.shape), sum_to(mul(grad, a), b.shape)


class Div(Function):
    tag = "div"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        if np.any(b == 0):
            raise NonFiniteError(f"division by zero (divisor shape {b.shape})")
        return a / b

    def backward(self, grad, a, b):
        grad_a = div(grad, b)
        grad_b = neg(div(mul(grad, a), mul(b, b)))
        return sum_to(grad_a, a.shape), sum_to(grad_b, b.shape)


class Neg(Function):
    tag = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad, a):
        return (neg(grad),)


class Scale(Function):
    tag = "scale"

    def __init__(self, factor: float):
        self.factor = float(factor)

    def forward(self, a):
        return a * self.factor

    def backward(self, grad, a):
        return (scale(grad, self.factor),)


class Power(Function):
    tag = "pow"

    def __init__(self, exponent: float):
        self.exponent = float(exponent)

    def forward(self, a):
        if self.exponent != int(self.exponent) and np.any(a < 0):
            raise NonFiniteError("fractional power of a negative value")
        return np.power(a, self.exponent)

    def backward(self, grad, a):
        if self.exponent == 0.0:
            return (None,)
        if self.exponent == 1.0:
            return (grad,)
        return (mul(grad, scale(power(a, self.exponent - 1.0), self.exponent)),)


# -- shape manipulation -------------------------------------------------------------------------


class SumTo(Function):
    tag = "sum_to"

    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)

    def forward(self, a):
        return _sum_to_array(a, self.shape)

    def backward(self, grad, a):
        return (broadcast_to(grad, a.shape),)


class BroadcastTo(Function):
    tag = "broadcast_to"

    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)

    def forward(self, a):
        _broadcast_shape(a.shape, self.shape)
        return np.broadcast_to(a, self.shape).copy()

    def backward(self, grad, a):
        return (sum_to(grad, a.shape),)


class Reshape(Function):
    tag = "reshape"

    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)

    def forward(self, a):
        try:
            return a.reshape(self.shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {a.shape} to {self.shape}") from exc

    def backward(self, grad, a):
        return (reshape(grad, a.shape),)


class Transpose(Function):
    tag = "transpose"

    def __init__(self, axes: Optional[Sequence[int]] = None):
        self.axes = tuple(axes) if axes is not None else None

    def forward(self, a):
        return np.transpose(a, self.axes)

    def backward(self, grad, a):
        if self.axes is None:
            return (transpose(grad),)
        return (transpose(grad, tuple(np.argsort(self.axes))),)


class Index(Function):
    tag = "index"

    def __init__(self, key: Any):
        self.key = key

    def forward(self, a):
        return np.array(a[self.key], dtype=np.float64)

    def backward(self, grad, a):
        return (index_add(grad, self.key, a.shape),)


class IndexAdd(Function):
    """Scatter-add of ``a`` into zeros of ``shape`` at ``key``; adjoint of :class:`Index`."""

    tag = "index_add"

    def __init__(self, key: Any, shape: tuple[int, ...]):
        self.key = key
        self.shape = tuple(shape)

    def forward(self, a):
        out = np.zeros(self.shape)
        np.add.at(out, self.key, a)
        return out

    def backward(self, grad, a):
        return (index(grad, self.key),)


class Concat(Function):
    tag = "concat"

    def __init__(self, axis: int = 0):
        self.axis = axis

    def forward(self, *arrays):
        try:
            return np.concatenate(arrays, axis=self.axis)
        except ValueError as exc:
            shapes = ", ".join(str(a.shape) for a in arrays)
            raise ShapeError(f"cannot concatenate {shapes} on axis {self.axis}") from exc

    def backward(self, grad, *inputs):
        grads = []
        start = 0
        axis = self.axis % grad.ndim
        for t in inputs:
            stop = start + t.shape[axis]
            key = tuple([slice(None)] * axis + [slice(start, stop)])
            grads.append(index(grad, key))
            start = stop
        return grads


class Sum(Function):
    tag = "sum"

    def __init__(self, axis: Axis = None, keepdims: bool = False):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        return np.asarray(a.sum(axis=self.axis, keepdims=self.keepdims), dtype=np.float64)

    def backward(self, grad, a):
        if not self.keepdims:
            kept = list(a.shape)
            for ax in _normalize_axes(self.axis, a.ndim):
                kept[ax] = 1
            grad = reshape(grad, tuple(kept))
        return (broadcast_to(grad, a.shape),)


class MatMul(Function):
    tag = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul needs (m, k) @ (k, n), got {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, grad, a, b):
        return matmul(grad, transpose(b)), matmul(transpose(a), grad)


# -- elementwise nonlinearities -----------------------------------------------------------------


class Exp(Function):
    tag = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, grad, a):
        return (mul(grad, exp(a)),)


class Log(Function):
    tag = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise NonFiniteError("log of a non-positive value")
        return np.log(a)

    def backward(self, grad, a):
        return (div(grad, a),)


class Sqrt(Function):
    tag = "sqrt"

    def forward(self, a):
        if np.any(a < 0):
            raise NonFiniteError(f"sqrt of a negative value (min {a.min():.6g})")
        return np.sqrt(a)

    def backward(self, grad, a):
        return (div(grad, scale(sqrt(a), 2.0)),)


class Abs(Function):
    tag = "abs"

    def forward(self, a):
        return np.abs(a)

    def backward(self, grad, a):
        return (mul(grad, Tensor(np.sign(a.data))),)


class Relu(Function):
    tag = "relu"

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, grad, a):
        return (mul(grad, Tensor((a.data > 0).astype(np.float64))),)


class Clip(Function):
    tag = "clip"

    def __init__(self, lo: float, hi: float):
        if lo > hi:
            raise ValueError(f"clip bounds reversed: {lo} > {hi}")
        self.lo = lo
        self.hi = hi

    def forward(self, a):
        return np.clip(a, self.lo, self.hi)

    def backward(self, grad, a):
        inside = (a.data > self.lo) & (a.data < self.hi)
        return (mul(grad, Tensor(inside.astype(np.float64))),)


class Tanh(Function):
    tag = "tanh"

    def forward(self, a):
        return np.tanh(a)

    def backward(self, grad, a):
        t = tanh(a)
        return (mul(grad, sub(1.0, mul(t, t))),)


class Sigmoid(Function):
    tag = "sigmoid"

    def forward(self, a):
        return 0.5 * (1.0 + np.tanh(0.5 * a))

    def backward(self, grad, a):
        s = sigmoid(a)
        return (mul(grad, mul(s, sub(1.0, s))),)


class RoundSTE(Function):
    """Round half up; the backward pass is the identity."""

    tag = "round_ste"

    def forward(self, a):
        return np.floor(a + 0.5)

    def backward(self, grad, a):
        return (grad,)


class FloorSTE(Function):
    tag = "floor_ste"

    def forward(self, a):
        return np.floor(a)

    def backward(self, grad, a):
        return (grad,)


# -- convolution as unfold + matmul -------------------------------------------------------------


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise ShapeError(f"kernel {kernel} with padding {padding} does not fit extent {size}")
    return out


class Unfold(Function):
    """Image batch (N, C, H, W) to patch rows (N*OH*OW, C*kh*kw)."""

    tag = "unfold"

    def __init__(self, kernel: tuple[int, int], stride: int, padding: int):
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"unfold expects (N, C, H, W), got {x.shape}")
        n, c, h, w = x.shape
        kh, kw = self.kernel
        s, p = self.stride, self.padding
        oh, ow = _conv_out(h, kh, s, p), _conv_out(w, kw, s, p)
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((n, c, kh, kw, oh, ow))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = padded[:, :, i : i + s * oh : s, j : j + s * ow : s]
        return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)

    def backward(self, grad, x):
        return (fold(grad, x.shape, self.kernel, self.stride, self.padding),)


class Fold(Function):
    """Adjoint of :class:`Unfold`: patch rows summed back into an image batch."""

    tag = "fold"

    def __init__(self, shape: tuple[int, ...], kernel: tuple[int, int], stride: int, padding: int):
        self.shape = tuple(shape)
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def forward(self, cols):
        n, c, h, w = self.shape
        kh, kw = self.kernel
        s, p = self.stride, self.padding
        oh, ow = _conv_out(h, kh, s, p), _conv_out(w, kw, s, p)
        if cols.shape != (n * oh * ow, c * kh * kw):
            raise ShapeError(f"fold got {cols.shape}, expected {(n * oh * ow, c * kh * kw)}")
        patches = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        padded = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(kh):
            for j in range(kw):
                padded[:, :, i : i + s * oh : s, j : j + s * ow : s] += patches[:, :, i, j]
        return padded[:, :, p : p + h, p : p + w].copy()

    def backward(self, grad, cols):
        return (unfold(grad, self.kernel, self.stride, self.padding),)


# -- functional API -----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    return Add()(as_tensor(a), as_tensor(b))


def sub(a, b) -> Tensor:
    return Sub()(as_tensor(a), as_tensor(b))


def mul(a, b) -> Tensor:
    return Mul()(as_tensor(a), as_tensor(b))


def div(a, b) -> Tensor:
    return Div()(as_tensor(a), as_tensor(b))


def neg(a) -> Tensor:
    return Neg()(as_tensor(a))


def scale(a, factor: float) -> Tensor:
    return Scale(factor)(as_tensor(a))


def power(a, exponent: float) -> Tensor:
    return Power(exponent)(as_tensor(a))


def square(a) -> Tensor:
    a = as_tensor(a)
    return mul(a, a)


def sum_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return SumTo(tuple(shape))(a)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return BroadcastTo(tuple(shape))(a)


def reshape(a, shape: Sequence[int]) -> Tensor:
    return Reshape(tuple(shape))(as_tensor(a))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose(axes)(as_tensor(a))


def index(a, key: Any) -> Tensor:
    return Index(key)(as_tensor(a))


def index_add(a, key: Any, shape: Sequence[int]) -> Tensor:
    return IndexAdd(key, tuple(shape))(as_tensor(a))


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    return Concat(axis)(*(as_tensor(t) for t in tensors))


def sum(a, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum(axis, keepdims)(as_tensor(a))


def mean(a, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = int(np.prod([a.shape[ax] for ax in _normalize_axes(axis, a.ndim)]))
    if count == 0:
        raise ShapeError(f"mean over an empty extent of shape {a.shape}")
    return scale(sum(a, axis, keepdims), 1.0 / count)


def variance(a, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """Biased (population) variance."""
    a = as_tensor(a)
    centered = sub(a, mean(a, axis, keepdims=True))
    return mean(mul(centered, centered), axis, keepdims)


def matmul(a, b) -> Tensor:
    return MatMul()(as_tensor(a), as_tensor(b))


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot needs equal shapes, got {a.shape} and {b.shape}")
    return sum(mul(a, b))


def l2norm(a, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return sqrt(sum(mul(a, a), axis, keepdims))


def exp(a) -> Tensor:
    return Exp()(as_tensor(a))


def log(a) -> Tensor:
    return Log()(as_tensor(a))


def sqrt(a) -> Tensor:
    return Sqrt()(as_tensor(a))


def abs(a) -> Tensor:  # noqa: A001
    return Abs()(as_tensor(a))


def relu(a) -> Tensor:
    return Relu()(as_tensor(a))


def clip(a, lo: float, hi: float) -> Tensor:
    return Clip(lo, hi)(as_tensor(a))


def tanh(a) -> Tensor:
    return Tanh()(as_tensor(a))


def sigmoid(a) -> Tensor:
    return Sigmoid()(as_tensor(a))


def round_ste(a) -> Tensor:
    return RoundSTE()(as_tensor(a))


def floor_ste(a) -> Tensor:
    return FloorSTE()(as_tensor(a))


def unfold(x, kernel: tuple[int, int], stride: int = 1, padding: int = 0) -> Tensor:
    return Unfold(tuple(kernel), stride, padding)(as_tensor(x))


def fold(cols, shape, kernel: tuple[int, int], stride: int = 1, padding: int = 0) -> Tensor:
    return Fold(tuple(shape), tuple(kernel), stride, padding)(as_tensor(cols))


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D convolution (cross-correlation) of (N, C, H, W) with (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    out_ch, in_ch, kh, kw = weight.shape
    if c != in_ch:
        raise ShapeError(f"conv2d input has {c} channels, weight expects {in_ch}")
    oh, ow = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    cols = unfold(x, (kh, kw), stride, padding)
    out = matmul(cols, transpose(reshape(weight, (out_ch, in_ch * kh * kw))))
    out = transpose(reshape(out, (n, oh, ow, out_ch)), (0, 3, 1, 2))
    if bias is not None:
        out = add(out, reshape(as_tensor(bias), (1, out_ch, 1, 1)))
    return out


def _channel_view(param, ndim: int) -> Tensor:
    param = as_tensor(param)
    return reshape(param, (1, param.size) + (1,) * (ndim - 2))


def batchnorm_apply(x, mean_, std, gamma, beta) -> Tensor:
    """Normalize channel-wise with the given statistics, then scale and shift."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"batchnorm_apply expects (N, C, ...), got {x.shape}")
    channels = x.shape[1]
    for label, param in (("mean", mean_), ("std", std), ("gamma", gamma), ("beta", beta)):
        if as_tensor(param).size != channels:
            size = as_tensor(param).size
            raise ShapeError(f"batchnorm {label} has {size} entries, x has {channels} channels")
    normalized = div(sub(x, _channel_view(mean_, x.ndim)), _channel_view(std, x.ndim))
    return add(mul(normalized, _channel_view(gamma, x.ndim)), _channel_view(beta, x.ndim))


def channel_stats(x, eps: float = 0.0) -> tuple[Tensor, Tensor]:
    """Per-channel batch mean and standard deviation sqrt(var + eps) over all non-channel axes."""
    x = as_tensor(x)
    axes = (0,) + tuple(range(2, x.ndim))
    mu = mean(x, axes)
    var = variance(x, axes)
    return mu, sqrt(add(var, eps))


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    tiled = broadcast_to(reshape(x, (n, c, h, 1, w, 1)), (n, c, h, factor, w, factor))
    return reshape(tiled, (n, c, h * factor, w * factor))


def global_avg_pool(x) -> Tensor:
    return mean(as_tensor(x), (2, 3))


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    return add(log(sum(exp(sub(a, shift)), axis, keepdims=True)), shift)


def softmax_crossentropy(logits, labels) -> Tensor:
    """Mean cross-entropy of (N, C) logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not pair up")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"labels outside [0, {logits.shape[1]})")
    log_probs = sub(logits, logsumexp(logits, axis=1))
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return scale(sum(mul(log_probs, onehot)), -1.0 / max(labels.size, 1))


def normalize_rows(a, min_norm: float = 0.0) -> tuple[Tensor, np.ndarray]:
    """Unit-normalize rows of a 2-D tensor; rows with norm <= min_norm are left as zeros.

    Returns the normalized tensor and the boolean mask of rows that were normalized.
    """
    a = as_tensor(a)
    norms = np.sqrt((a.data * a.data).sum(axis=1))
    valid = norms > min_norm
    if not np.any(valid):
        return Tensor(np.zeros(a.shape)), valid
    safe = np.where(valid, 0.0, 1.0)
    norm = sqrt(add(sum(mul(a, a), axis=1, keepdims=True), Tensor(safe[:, None])))
    unit = div(a, norm)
    return mul(unit, Tensor(valid[:, None].astype(np.float64))), valid


FORWARD_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "batchnorm_apply": batchnorm_apply,
    "sum": sum,
    "mean": mean,
    "variance": variance,
    "sqrt": sqrt,
    "abs": abs,
    "clip": clip,
    "dot": dot,
    "l2norm": l2norm,
    "scale": scale,
    "reshape": reshape,
    "concat": lambda *tensors, axis=0: concat(tensors, axis),
    "softmax_crossentropy": softmax_crossentropy,
}


def forward_op(op: str, *inputs: Any, **params: Any) -> Tensor:
    """Apply a named operation; unknown names are rejected."""
    try:
        fn = FORWARD_OPS[op]
    except KeyError:
        raise ValueError(f"unknown operation '{op}'; known: {sorted(FORWARD_OPS)}") from None
    return fn(*inputs, **params)
