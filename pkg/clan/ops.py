"""
Differentiable primitives.

Every public function here builds one graph node (a Function subclass) and
returns its output Tensor. Reductions run through numpy in a fixed order, so
identical inputs give bitwise-identical outputs.
"""

from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from clan.errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    NumericError,
    UsageError,
)
from clan.tensor import Function, Tensor, get_dtype


def _require_rank(x: Tensor, rank: int, op: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{op} expects a rank-{rank} tensor, got shape {x.shape}")


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...], op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a} with {b}") from None


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray):
        return (
            self.unbroadcast(grad, self.shapes[0]),
            self.unbroadcast(grad, self.shapes[1]),
        )


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray):
        return (
            self.unbroadcast(grad * self.b, self.a.shape),
            self.unbroadcast(grad * self.a, self.b.shape),
        )


class Scale(Function):
    def forward(self, x: np.ndarray, alpha: float) -> np.ndarray:
        self.alpha = alpha
        return x * alpha

    def backward(self, grad: np.ndarray):
        return (grad * self.alpha,)


class Relu(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        return np.where(self.mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad: np.ndarray):
        return (np.where(self.mask, grad, 0.0).astype(grad.dtype, copy=False),)


class Exp(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        with np.errstate(over='ignore'):
            self.out = np.exp(x)
        if not np.all(np.isfinite(self.out)):
            raise NumericError("exp overflowed or received a non-finite value")
        return self.out

    def backward(self, grad: np.ndarray):
        return (grad * self.out,)


class Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        # tanh form stays finite for any input and gives exactly 0.5 at 0
        self.out = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self.out

    def backward(self, grad: np.ndarray):
        return (grad * self.out * (1.0 - self.out),)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, 'add')
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, 'mul')
    return Mul.apply(a, b)


def scale(x: Tensor, alpha: float) -> Tensor:
    return Scale.apply(x, alpha=float(alpha))


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


_ELEMENTWISE = {
    'add': add,
    'mul': mul,
    'relu': relu,
    'exp': exp,
    'scale': scale,
    'sigmoid': sigmoid,
}


def elementwise(op: str, *args: Any) -> Tensor:
    """Dispatch by name: elementwise('add', a, b), elementwise('scale', x, 0.5)."""
    if op not in _ELEMENTWISE:
        raise UsageError(f"Unknown elementwise op '{op}', expected one of {sorted(_ELEMENTWISE)}")
    return _ELEMENTWISE[op](*args)


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad: np.ndarray):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, x: np.ndarray, axes: Tuple[int, ...]) -> np.ndarray:
        self.inverse = tuple(np.argsort(axes))
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, grad: np.ndarray):
        return (np.ascontiguousarray(grad.transpose(self.inverse)),)


class Sum(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.in_shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad: np.ndarray):
        return (np.full(self.in_shape, grad, dtype=grad.dtype),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}")
    return Reshape.apply(x, shape=shape)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes))


def swap_last(x: Tensor) -> Tensor:
    """Swap the last two axes (matrix transpose, batched)."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def tensor_sum(x: Tensor) -> Tensor:
    return Sum.apply(x)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray):
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return (
            self.unbroadcast(ga, self.a.shape),
            self.unbroadcast(gb, self.b.shape),
        )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product a @ b; leading axes broadcast as batch axes.

    dL/da = g·bᵀ and dL/db = aᵀ·g, summed over any broadcast batch axes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} vs {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], 'matmul')
    return MatMul.apply(a, b)


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------


def _output_extent(size: int, kernel: int, stride: int, padding: int, op: str) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ConfigurationError(
            f"{op}: extent {size} with kernel {kernel}, stride {stride}, "
            f"padding {padding} gives a non-integral output"
        )
    return span // stride + 1


def _scatter_windows(
    target: np.ndarray, patches: np.ndarray, stride: int, out_h: int, out_w: int
) -> None:
    """Add patches[..., i, j] into target at every window offset (i, j)."""
    kh, kw = patches.shape[-2:]
    for i in range(kh):
        for j in range(kw):
            target[:, :, i:i + stride * (out_h - 1) + 1:stride,
                   j:j + stride * (out_w - 1) + 1:stride] += patches[..., i, j]


class Conv2d(Function):
    def forward(
        self, x: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray] = None, *,
        stride: int, padding: int,
    ) -> np.ndarray:
        b, c, h, w = x.shape
        c_out, _, kh, kw = kernel.shape
        self.out_h = _output_extent(h, kh, stride, padding, 'conv2d')
        self.out_w = _output_extent(w, kw, stride, padding, 'conv2d')
        self.stride, self.padding = stride, padding
        self.x_shape, self.kernel = x.shape, kernel

        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # rows: (batch, out_y, out_x); columns: (c_in, ky, kx)
        self.cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(
            b * self.out_h * self.out_w, c * kh * kw
        )
        out = self.cols @ kernel.reshape(c_out, -1).T
        if bias is not None:
            out = out + bias
        return np.ascontiguousarray(
            out.reshape(b, self.out_h, self.out_w, c_out).transpose(0, 3, 1, 2)
        )

    def backward(self, grad: np.ndarray):
        b, c, h, w = self.x_shape
        c_out, _, kh, kw = self.kernel.shape
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, c_out)

        grad_kernel = (g2.T @ self.cols).reshape(self.kernel.shape)
        grad_bias = grad.sum(axis=(0, 2, 3))

        dcols = (g2 @ self.kernel.reshape(c_out, -1)).reshape(
            b, self.out_h, self.out_w, c, kh, kw
        ).transpose(0, 3, 1, 2, 4, 5)
        p = self.padding
        padded = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        _scatter_windows(padded, dcols, self.stride, self.out_h, self.out_w)
        grad_x = padded[:, :, p:p + h, p:p + w]
        return (np.ascontiguousarray(grad_x), grad_kernel, grad_bias)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of x (b×c_in×h×w) with kernel (c_out×c_in×kh×kw), plus bias."""
    _require_rank(x, 4, 'conv2d')
    _require_rank(kernel, 4, 'conv2d kernel')
    kh, kw = kernel.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return Conv2d.apply(*inputs, stride=stride, padding=padding)


class Pool2d(Function):
    def forward(self, x: np.ndarray, *, mode: str, window: int, stride: int) -> np.ndarray:
        self.x_shape = x.shape
        self.mode, self.window, self.stride = mode, window, stride
        self.out_h = _output_extent(x.shape[2], window, stride, 0, 'pool2d')
        self.out_w = _output_extent(x.shape[3], window, stride, 0, 'pool2d')
        windows = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
        if mode == 'avg':
            return windows.mean(axis=(-2, -1))
        flat = windows.reshape(*windows.shape[:4], window * window)
        # argmax returns the first occurrence, which fixes tie-breaking
        self.argmax = flat.argmax(axis=-1)
        return np.take_along_axis(flat, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray):
        k = self.window
        if self.mode == 'avg':
            patches = np.broadcast_to((grad / (k * k))[..., None, None], grad.shape + (k, k))
        else:
            positions = np.arange(k * k).reshape(k, k)
            patches = np.where(
                self.argmax[..., None, None] == positions, grad[..., None, None], 0.0
            )
        out = np.zeros(self.x_shape, dtype=grad.dtype)
        _scatter_windows(out, patches, self.stride, self.out_h, self.out_w)
        return (out,)


def pool2d(x: Tensor, mode: str, window: int, stride: Optional[int] = None) -> Tensor:
    """Windowed mean ('avg') or max ('max') over the two spatial axes."""
    _require_rank(x, 4, 'pool2d')
    if mode not in ('avg', 'max'):
        raise ConfigurationError(f"pool2d mode must be 'avg' or 'max', got '{mode}'")
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ConfigurationError(f"pool2d needs window, stride >= 1, got {window}, {stride}")
    if window > x.shape[2] or window > x.shape[3]:
        raise ConfigurationError(
            f"pool2d window {window} is larger than spatial extent {x.shape[2:]}"
        )
    return Pool2d.apply(x, mode=mode, window=window, stride=stride)


class ChannelPool(Function):
    def forward(self, x: np.ndarray, *, modes: Tuple[str, ...]) -> np.ndarray:
        self.x_shape, self.modes = x.shape, modes
        parts = []
        for mode in modes:
            if mode == 'avg':
                parts.append(x.mean(axis=1))
            else:
                self.argmax = x.argmax(axis=1)
                parts.append(np.take_along_axis(x, self.argmax[:, None], axis=1)[:, 0])
        return np.stack(parts, axis=1)

    def backward(self, grad: np.ndarray):
        c = self.x_shape[1]
        out = np.zeros(self.x_shape, dtype=grad.dtype)
        for index, mode in enumerate(self.modes):
            g = grad[:, index:index + 1]
            if mode == 'avg':
                out += g / c
            else:
                channels = np.arange(c)[None, :, None, None]
                out += np.where(self.argmax[:, None] == channels, g, 0.0)
        return (out,)


def channel_pool(x: Tensor, modes: Sequence[str] = ('avg', 'max')) -> Tensor:
    """
    Per-position reductions along the channel axis.

    With the default modes the output has two channels: channel 0 holds the
    mean over channels, channel 1 the max (first occurrence on ties).
    """
    _require_rank(x, 4, 'channel_pool')
    modes = tuple(modes)
    if not modes or any(m not in ('avg', 'max') for m in modes):
        raise ConfigurationError(f"channel_pool modes must be 'avg'/'max', got {modes}")
    return ChannelPool.apply(x, modes=modes)


class GlobalAvgPool(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad: np.ndarray):
        h, w = self.x_shape[2:]
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), self.x_shape).copy(),)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: b×c×h×w → b×c."""
    _require_rank(x, 4, 'global_avg_pool')
    return GlobalAvgPool.apply(x)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def axis_resample_matrix(src: int, dst: int, mode: str) -> np.ndarray:
    """
    dst×src matrix mapping one spatial axis onto another extent.

    Shrinking is an average over integer factors; growing is nearest
    (floor index mapping) or bilinear with half-pixel centres.
    """
    if dst < 1:
        raise ConfigurationError(f"resample target extent must be >= 1, got {dst}")
    matrix = np.zeros((dst, src), dtype=get_dtype())
    if dst == src:
        np.fill_diagonal(matrix, 1.0)
    elif dst < src:
        if src % dst != 0:
            raise ConfigurationError(
                f"downsampling {src} -> {dst} needs an integer factor"
            )
        factor = src // dst
        for i in range(dst):
            matrix[i, i * factor:(i + 1) * factor] = 1.0 / factor
    elif mode == 'nearest':
        for i in range(dst):
            matrix[i, (i * src) // dst] = 1.0
    elif mode == 'bilinear':
        for i in range(dst):
            pos = min(max((i + 0.5) * src / dst - 0.5, 0.0), src - 1.0)
            lo = int(np.floor(pos))
            hi = min(lo + 1, src - 1)
            frac = pos - lo
            matrix[i, lo] += 1.0 - frac
            matrix[i, hi] += frac
    else:
        raise ConfigurationError(f"resample mode must be 'nearest' or 'bilinear', got '{mode}'")
    return matrix


class Resample(Function):
    def forward(self, x: np.ndarray, *, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        self.rows, self.cols = rows, cols
        return np.matmul(np.matmul(rows, x), cols.T)

    def backward(self, grad: np.ndarray):
        return (np.matmul(np.matmul(self.rows.T, grad), self.cols),)


def resample(x: Tensor, target_h: int, target_w: int, mode: str = 'nearest') -> Tensor:
    """Spatially resize a b×c×h×w tensor (see axis_resample_matrix for the rules)."""
    _require_rank(x, 4, 'resample')
    h, w = x.shape[2:]
    rows = axis_resample_matrix(h, target_h, mode)
    cols = axis_resample_matrix(w, target_w, mode)
    if (target_h, target_w) == (h, w):
        return x
    return Resample.apply(x, rows=rows, cols=cols)


# ---------------------------------------------------------------------------
# Channel concatenation
# ---------------------------------------------------------------------------


class ConcatChannels(Function):
    def forward(self, *xs: np.ndarray) -> np.ndarray:
        self.bounds = np.cumsum([0] + [x.shape[1] for x in xs])
        return np.concatenate(xs, axis=1)

    def backward(self, grad: np.ndarray):
        return tuple(
            np.ascontiguousarray(grad[:, lo:hi])
            for lo, hi in zip(self.bounds[:-1], self.bounds[1:])
        )


class SliceChannels(Function):
    def forward(self, x: np.ndarray, *, start: int, stop: int) -> np.ndarray:
        self.x_shape, self.start, self.stop = x.shape, start, stop
        return np.ascontiguousarray(x[:, start:stop])

    def backward(self, grad: np.ndarray):
        out = np.zeros(self.x_shape, dtype=grad.dtype)
        out[:, self.start:self.stop] = grad
        return (out,)


def concat_channels(xs: List[Tensor]) -> Tensor:
    """Concatenate along the channel axis, in argument order."""
    if not xs:
        raise UsageError("concat_channels needs at least one tensor")
    for x in xs:
        _require_rank(x, 4, 'concat_channels')
    reference = xs[0].shape
    for x in xs[1:]:
        if x.shape[0] != reference[0] or x.shape[2:] != reference[2:]:
            raise DimensionError(
                f"concat_channels extent mismatch: {reference} vs {x.shape}"
            )
    if len(xs) == 1:
        return xs[0]
    return ConcatChannels.apply(*xs)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_rank(x, 4, 'slice_channels')
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"channel slice [{start}:{stop}] out of range for {x.shape}")
    return SliceChannels.apply(x, start=start, stop=stop)


# ---------------------------------------------------------------------------
# Normalisation and losses
# ---------------------------------------------------------------------------


class SoftmaxRows(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray):
        inner = (grad * self.out).sum(axis=-1, keepdims=True)
        return (self.out * (grad - inner),)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    if x.ndim < 1:
        raise DimensionError("softmax_rows needs at least one axis")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows received non-finite input")
    return SoftmaxRows.apply(x)


class CrossEntropy(Function):
    def forward(self, logits: np.ndarray, *, labels: np.ndarray) -> np.ndarray:
        rows = np.arange(logits.shape[0])
        shifted = logits - logits.max(axis=1, keepdims=True)
        # the row max contributes exactly 1; log1p keeps confident rows precise
        rest = np.exp(shifted)
        rest[rows, logits.argmax(axis=1)] = 0.0
        log_norm = np.log1p(rest.sum(axis=1))
        self.probs = np.exp(shifted - log_norm[:, None])
        self.labels = labels
        return np.asarray((log_norm - shifted[rows, labels]).mean(), dtype=logits.dtype)

    def backward(self, grad: np.ndarray):
        batch = self.probs.shape[0]
        g = self.probs.copy()
        g[np.arange(batch), self.labels] -= 1.0
        return (g * (grad / batch),)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], via log-sum-exp."""
    _require_rank(logits, 2, 'cross_entropy')
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise DimensionError(
            f"cross_entropy: {labels.shape[0]} labels for {logits.shape[0]} rows"
        )
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"cross_entropy label out of range [0, {classes}): {labels.tolist()}")
    return CrossEntropy.apply(logits, labels=labels)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer: x (b×c_in) @ weight (c_in×c_out) + bias."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def conv1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-position matrix-vector product W·x_i (+ b), as a 1×1 convolution."""
    c_out, c_in = weight.shape
    return conv2d(x, reshape(weight, (c_out, c_in, 1, 1)), bias, stride=1, padding=0)
