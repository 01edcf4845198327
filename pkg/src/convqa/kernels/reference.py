"""Numpy reference kernels for the 1-d convolution core.

Same contract as the compiled extension: inputs arrive already padded,
padding and bias handling live in the caller. Built on sliding windows +
einsum so the heavy lifting lands in BLAS.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv1d_forward(x, w):
    # x: [batch, in_ch, padded_len], w: [out_ch, in_ch, k]
    windows = sliding_window_view(x, w.shape[2], axis=2)  # [B, C, Lo, K]
    return np.einsum("bctk,ock->bot", windows, w, optimize=True)


def conv1d_grad_input(gy, w, padded_len):
    # gy: [batch, out_ch, out_len] -> gx: [batch, in_ch, padded_len]
    k = w.shape[2]
    gyp = np.pad(gy, ((0, 0), (0, 0), (k - 1, k - 1)))
    windows = sliding_window_view(gyp, k, axis=2)  # [B, O, Lp, K]
    return np.einsum("botk,ock->bct", windows, w[:, :, ::-1], optimize=True)


def conv1d_grad_weight(gy, x, kernel_width):
    # gy: [batch, out_ch, out_len], x: [batch, in_ch, padded_len] -> gw: [out_ch, in_ch, k]
    windows = sliding_window_view(x, gy.shape[2], axis=2)  # [B, C, K, Lo]
    return np.einsum("bot,bckt->ock", gy, windows, optimize=True)
