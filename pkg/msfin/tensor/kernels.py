"""Direct convolution kernels on (N, C, H, W) arrays.

Convolutions are lowered to batched matrix products over im2col windows, one matrix per
group, and processed in batch chunks so the window buffer stays bounded.
"""
from typing import Iterator, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Upper bound on the im2col buffer built for one chunk of the batch.
COLS_BUDGET_BYTES = 256 * 1024 * 1024


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _batch_chunks(n: int, per_sample_bytes: int) -> Iterator[slice]:
    step = max(1, COLS_BUDGET_BYTES // max(per_sample_bytes, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _im2col(xp: np.ndarray, kernel: int, stride: int, groups: int) -> Tuple[np.ndarray, int, int]:
    """(N, C, Hp, Wp) -> (N, G, Ho*Wo, C/G * k * k) plus output extents."""
    n, c = xp.shape[:2]
    windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2:4]
    cg = c // groups
    cols = windows.reshape(n, groups, cg, ho, wo, kernel, kernel)
    cols = cols.transpose(0, 1, 3, 4, 2, 5, 6).reshape(n, groups, ho * wo, cg * kernel * kernel)
    return cols, ho, wo


def _col2im(cols: np.ndarray, padded_shape: Tuple[int, int, int, int], kernel: int, stride: int,
            groups: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add (N, G, Ho*Wo, C/G * k * k) windows back onto a padded input."""
    n, c, hp, wp = padded_shape
    cg = c // groups
    patches = cols.reshape(n, groups, ho, wo, cg, kernel, kernel)
    patches = patches.transpose(0, 1, 4, 2, 3, 5, 6).reshape(n, c, ho, wo, kernel, kernel)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + h_span:stride, j:j + w_span:stride] += patches[..., i, j]
    return out


def _weight_matrix(weight: np.ndarray, groups: int) -> np.ndarray:
    """(C_out, C_in/G, k, k) -> (G, C_in/G * k * k, C_out/G)."""
    c_out = weight.shape[0]
    return weight.reshape(groups, c_out // groups, -1).transpose(0, 2, 1)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, stride: int, padding: int, groups: int) -> np.ndarray:
    """Cross-correlation without bias."""
    n, c = x.shape[:2]
    c_out, _, kernel, _ = weight.shape
    xp = _pad(x, padding)
    ho = conv_output_size(x.shape[2], kernel, stride, padding)
    wo = conv_output_size(x.shape[3], kernel, stride, padding)
    wmat = _weight_matrix(weight, groups)
    out = np.empty((n, c_out, ho, wo), dtype=x.dtype)
    per_sample = c * kernel * kernel * ho * wo * x.itemsize
    for chunk in _batch_chunks(n, per_sample):
        cols, _, _ = _im2col(xp[chunk], kernel, stride, groups)
        res = cols @ wmat  # (n, G, Ho*Wo, C_out/G)
        out[chunk] = res.transpose(0, 1, 3, 2).reshape(-1, c_out, ho, wo)
    return out


def conv2d_input_grad(grad_out: np.ndarray, weight: np.ndarray, input_hw: Tuple[int, int],
                      stride: int, padding: int, groups: int) -> np.ndarray:
    """Adjoint of conv2d_forward with respect to its input."""
    n, c_out, ho, wo = grad_out.shape
    _, cg, kernel, _ = weight.shape
    c_in = cg * groups
    h, w = input_hw
    padded_shape = (n, c_in, h + 2 * padding, w + 2 * padding)
    wmat_t = _weight_matrix(weight, groups).transpose(0, 2, 1)  # (G, C_out/G, C_in/G*k*k)
    gx = np.empty((n, c_in, h, w), dtype=grad_out.dtype)
    per_sample = c_in * kernel * kernel * ho * wo * grad_out.itemsize
    for chunk in _batch_chunks(n, per_sample):
        g = grad_out[chunk].reshape(-1, groups, c_out // groups, ho * wo).transpose(0, 1, 3, 2)
        cols = g @ wmat_t
        gxp = _col2im(cols, (cols.shape[0],) + padded_shape[1:], kernel, stride, groups, ho, wo)
        gx[chunk] = gxp[:, :, padding:padding + h, padding:padding + w]
    return gx


def conv2d_weight_grad(x: np.ndarray, grad_out: np.ndarray, weight_shape: Tuple[int, int, int, int],
                       stride: int, padding: int, groups: int) -> np.ndarray:
    n, c = x.shape[:2]
    c_out, cg, kernel, _ = weight_shape
    _, _, ho, wo = grad_out.shape
    xp = _pad(x, padding)
    gw = np.zeros((groups, c_out // groups, cg * kernel * kernel), dtype=x.dtype)
    per_sample = c * kernel * kernel * ho * wo * x.itemsize
    for chunk in _batch_chunks(n, per_sample):
        cols, _, _ = _im2col(xp[chunk], kernel, stride, groups)
        g = grad_out[chunk].reshape(-1, groups, c_out // groups, ho * wo)
        gw += (g @ cols).sum(axis=0)
    return gw.reshape(weight_shape)


def conv_transpose2d_forward(x: np.ndarray, weight: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Transposed convolution, weight laid out (C_in, C_out, k, k); the adjoint of conv2d."""
    kernel = weight.shape[2]
    h = conv_transpose_output_size(x.shape[2], kernel, stride, padding)
    w = conv_transpose_output_size(x.shape[3], kernel, stride, padding)
    return conv2d_input_grad(x, weight, (h, w), stride, padding, 1)


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = x.shape
    oc = c // (r * r)
    return x.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)


def channel_shuffle(x: np.ndarray, groups: int) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)
