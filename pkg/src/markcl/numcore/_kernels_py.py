"""Pure numpy versions of the hot convolution/pooling kernels.

Arithmetic order matches ``_kernels.pyx`` exactly so both backends give
bitwise-identical results. All arrays are float64 and C-contiguous.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def col2im(cols, x_shape, k, stride):
    n, c, h, w = x_shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    c6 = cols.reshape(n, ho, wo, c, k, k)
    dx = np.zeros(x_shape, dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            dx[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += \
                c6[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return dx


def maxpool_forward(x, window):
    n, c, h, w = x.shape
    ho, wo = h // window, w // window
    blocks = x[:, :, :ho * window, :wo * window].reshape(n, c, ho, window, wo, window)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window)
    # np.argmax returns the first occurrence, i.e. row-major tie-break
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_backward(grad, idx, x_shape, window):
    n, c, h, w = x_shape
    ho, wo = grad.shape[2], grad.shape[3]
    scatter = np.zeros((n, c, ho, wo, window * window), dtype=np.float64)
    np.put_along_axis(scatter, idx[..., None], grad[..., None], axis=-1)
    scatter = scatter.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(x_shape, dtype=np.float64)
    dx[:, :, :ho * window, :wo * window] = scatter.reshape(n, c, ho * window, wo * window)
    return dx
