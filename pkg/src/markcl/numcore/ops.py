"""Differentiable layer operations used by the MARK architectures."""
from dataclasses import dataclass

import numpy as np

from ..errors import BatchSizeError, DimensionError, LabelError, ParameterError
from . import _backend
from .tensor import Function, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class _Dense(Function):
    def forward(self, x, w, b):
        self.x, self.w = x, w
        return x @ w + b

    def backward(self, g):
        return g @ self.w.T, self.x.T @ g, g.sum(axis=0)


def dense_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``x @ weights + bias`` for ``x`` of shape (N, I)."""
    if x.data.ndim != 2 or weights.data.ndim != 2 or bias.data.ndim != 1:
        raise DimensionError(f"dense expects 2-D input/weights and 1-D bias, got "
                             f"{x.shape}, {weights.shape}, {bias.shape}")
    if x.shape[1] != weights.shape[0] or weights.shape[1] != bias.shape[0]:
        raise DimensionError(f"dense shape mismatch: {x.shape} @ {weights.shape} + {bias.shape}")
    return _Dense.apply(x, weights, bias)


class _Conv2d(Function):
    def forward(self, x, w, b, stride, padding):
        if padding:
            x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        f, c, k, _ = w.shape
        n, _, h, wd = x.shape
        ho = (h - k) // stride + 1
        wo = (wd - k) // stride + 1
        cols = _backend.kernels.im2col(np.ascontiguousarray(x), k, stride)
        wmat = w.reshape(f, -1)
        out = cols @ wmat.T + b
        self.cols, self.wmat = cols, wmat
        self.meta = (x.shape, w.shape, stride, padding, ho, wo)
        return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def backward(self, g):
        xshape, wshape, stride, padding, ho, wo = self.meta
        f = wshape[0]
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gmat.T @ self.cols).reshape(wshape)
        gb = gmat.sum(axis=0)
        dcols = np.ascontiguousarray(gmat @ self.wmat)
        dx = _backend.kernels.col2im(dcols, tuple(xshape), wshape[2], stride)
        if padding:
            dx = dx[:, :, padding:-padding, padding:-padding]
        return dx, gw, gb


def conv2d_forward(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (F, C, k, k) kernels."""
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernels, got {x.shape}, {kernels.shape}")
    f, c, kh, kw = kernels.shape
    if kh != kw:
        raise DimensionError("conv2d kernels must be square")
    if x.shape[1] != c or bias.shape != (f,):
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"bad stride/padding {stride}/{padding}")
    h, w = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if h < kh or w < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    return _Conv2d.apply(x, kernels, bias, stride=stride, padding=padding)


class _Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, g):
        return (g * self.mask,)


def relu(x: Tensor) -> Tensor:
    return _Relu.apply(x)


class _MaxPool(Function):
    def forward(self, x, window):
        out, self.idx = _backend.kernels.maxpool_forward(np.ascontiguousarray(x), window)
        self.xshape, self.window = x.shape, window
        return out

    def backward(self, g):
        return (_backend.kernels.maxpool_backward(np.ascontiguousarray(g), self.idx, tuple(self.xshape), self.window),)


def maxpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """
    if window < 1:
        raise ParameterError(f"pool window must be >= 1, got {window}")
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects (N, C, H, W), got {x.shape}")
    if x.shape[2] < window or x.shape[3] < window:
        raise DimensionError(f"pool window {window} larger than input {x.shape[2:]}")
    return _MaxPool.apply(x, window=window)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels):
        return cls(np.zeros(channels, dtype=np.float32), np.ones(channels, dtype=np.float32))


class _BatchNorm(Function):
    def forward(self, x, gamma, beta, state, training):
        axes = (0, 2, 3)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * m / max(m - 1, 1)
            state.running_mean = ((1 - BN_MOMENTUM) * state.running_mean + BN_MOMENTUM * mean).astype(np.float32)
            state.running_var = ((1 - BN_MOMENTUM) * state.running_var + BN_MOMENTUM * unbiased).astype(np.float32)
        else:
            mean = state.running_mean.astype(np.float64)
            var = state.running_var.astype(np.float64)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self.xhat, self.inv, self.gamma, self.training = xhat, inv, gamma, training
        return xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, g):
        axes = (0, 2, 3)
        gbeta = g.sum(axis=axes)
        ggamma = (g * self.xhat).sum(axis=axes)
        gxhat = g * self.gamma[None, :, None, None]
        inv = self.inv[None, :, None, None]
        if not self.training:
            return gxhat * inv, ggamma, gbeta
        m = g.shape[0] * g.shape[2] * g.shape[3]
        dx = inv / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                        - self.xhat * (gxhat * self.xhat).sum(axis=axes, keepdims=True))
        return dx, ggamma, gbeta


def batchnorm_forward(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm expects (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm affine params must have shape ({c},)")
    if training and x.shape[0] < 2:
        raise BatchSizeError("batchnorm in training mode needs a batch of at least 2")
    return _BatchNorm.apply(x, gamma, beta, state=state, training=training)


class _Modulate(Function):
    def forward(self, x, mask):
        self.x, self.mask = x, mask
        self.extra = x.ndim - 2
        return x * mask.reshape(mask.shape + (1,) * self.extra)

    def backward(self, g):
        gx = g * self.mask.reshape(self.mask.shape + (1,) * self.extra)
        gm = g * self.x
        if self.extra:
            gm = gm.sum(axis=tuple(range(2, g.ndim)))
        return gx, gm


def modulate(x: Tensor, mask: Tensor) -> Tensor:
    """Scale channel ``c`` of sample ``n`` by ``mask[n, c]``; works for (N, C) and (N, C, H, W)."""
    if mask.data.ndim != 2 or x.shape[:2] != mask.shape:
        raise DimensionError(f"mask of shape {mask.shape} does not fit activations {x.shape}")
    return _Modulate.apply(x, mask)


class _Reshape(Function):
    def forward(self, x, shape):
        self.orig = x.shape
        return x.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.orig),)


class _ColumnSlice(Function):
    def forward(self, x, start, stop):
        self.shape, self.start, self.stop = x.shape, start, stop
        return np.ascontiguousarray(x[:, start:stop])

    def backward(self, g):
        full = np.zeros(self.shape)
        full[:, self.start:self.stop] = g
        return (full,)


def split_columns(x: Tensor, sizes):
    """Split (N, D) into consecutive column blocks of the given widths."""
    if x.data.ndim != 2 or sum(sizes) != x.shape[1]:
        raise DimensionError(f"cannot split width {x.shape[1:]} into {list(sizes)}")
    out, start = [], 0
    for size in sizes:
        out.append(_ColumnSlice.apply(x, start=start, stop=start + size))
        start += size
    return out


def flatten(x: Tensor) -> Tensor:
    return _Reshape.apply(x, shape=(x.shape[0], -1))


def reshape(x: Tensor, shape) -> Tensor:
    return _Reshape.apply(x, shape=tuple(shape))


class _CrossEntropy(Function):
    def forward(self, logits, labels):
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        n = logits.shape[0]
        self.probs = np.exp(z - lse[:, None])
        self.labels = labels
        return np.asarray((lse - z[np.arange(n), labels]).mean())

    def backward(self, g):
        n = self.probs.shape[0]
        d = self.probs.copy()
        d[np.arange(n), self.labels] -= 1.0
        return (d * (g / n),)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelError(f"labels must lie in [0, {logits.shape[1]})")
    return _CrossEntropy.apply(logits, labels=labels.astype(np.int64))


class _Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class _Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class _Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum())

    def backward(self, g):
        return (np.broadcast_to(g, self.shape).copy(),)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    return _Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _Mul.apply(a, b)


def tensor_sum(x: Tensor) -> Tensor:
    return _Sum.apply(x)


def argmax_rows(logits: Tensor):
    return np.argmax(logits.data, axis=1)
