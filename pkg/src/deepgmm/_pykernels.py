"""Pure numpy implementations of the hot kernels.

Same signatures and results as the compiled ``_ckernels`` extension; used when
the extension is not built or ``DEEPGMM_BACKEND=python`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_2PI = float(np.log(2.0 * np.pi))


def log_gauss_table(x, means, var):
    """log N(x_n | mean_k, diag(var_k)) for every pixel n and class k -> (N, K)."""
    x = np.asarray(x, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    m = x.shape[1]
    const = -0.5 * m * LOG_2PI - 0.5 * np.log(var).sum(axis=1)
    diff = x[:, None, :] - means[None, :, :]
    return const[None, :] - 0.5 * (diff * diff / var[None, :, :]).sum(axis=2)


def im2col(x, k, pad):
    """(B, C, H, W) -> (B*H'*W', C*k*k) patches of the zero-padded input, stride 1."""
    x = np.asarray(x, dtype=np.float64)
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B, C, H', W', k, k
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * k * k)


def col2im(cols, shape, k, pad):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to (B, C, H, W)."""
    b, c, h, w = shape
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    d = np.asarray(cols, dtype=np.float64).reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky:ky + ho, kx:kx + wo] += d[:, :, ky, kx]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def maxpool2_forward(x):
    """2x2 max pooling, stride 2. Returns (pooled, argmax in 0..3, first max wins)."""
    x = np.asarray(x, dtype=np.float64)
    b, c, h, w = x.shape
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int8)


def maxpool2_backward(dout, idx):
    dout = np.asarray(dout, dtype=np.float64)
    b, c, ho, wo = dout.shape
    blocks = np.zeros((b, c, ho, wo, 4))
    np.put_along_axis(blocks, idx.astype(np.intp)[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(blocks.reshape(b, c, 2 * ho, 2 * wo))
