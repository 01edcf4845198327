# cython: boundscheck=False, wraparound=False, cdivision=True
# Compiled 1-d cross-correlation kernels. Inputs arrive already padded;
# padding and bias live in the caller so both backends share one contract.

import numpy as np

cimport cython

ctypedef fused real:
    float
    double


def conv1d_forward(real[:, :, ::1] x, real[:, :, ::1] w):
    # x: [batch, in_ch, padded_len], w: [out_ch, in_ch, k]
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], Lp = x.shape[2]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Lo = Lp - K + 1
    if real is float:
        out = np.zeros((B, O, Lo), dtype=np.float32)
    else:
        out = np.zeros((B, O, Lo), dtype=np.float64)
    cdef real[:, :, ::1] y = out
    cdef Py_ssize_t b, o, c, k, t
    cdef real wv
    with nogil:
        for b in range(B):
            for o in range(O):
                for c in range(C):
                    for k in range(K):
                        wv = w[o, c, k]
                        for t in range(Lo):
                            y[b, o, t] += wv * x[b, c, t + k]
    return out


def conv1d_grad_input(real[:, :, ::1] gy, real[:, :, ::1] w, Py_ssize_t padded_len):
    # gy: [batch, out_ch, out_len] -> gx: [batch, in_ch, padded_len]
    cdef Py_ssize_t B = gy.shape[0], O = gy.shape[1], Lo = gy.shape[2]
    cdef Py_ssize_t C = w.shape[1], K = w.shape[2]
    if real is float:
        out = np.zeros((B, C, padded_len), dtype=np.float32)
    else:
        out = np.zeros((B, C, padded_len), dtype=np.float64)
    cdef real[:, :, ::1] gx = out
    cdef Py_ssize_t b, o, c, k, t
    cdef real wv
    with nogil:
        for b in range(B):
            for o in range(O):
                for c in range(C):
                    for k in range(K):
                        wv = w[o, c, k]
                        for t in range(Lo):
                            gx[b, c, t + k] += wv * gy[b, o, t]
    return out


def conv1d_grad_weight(real[:, :, ::1] gy, real[:, :, ::1] x, Py_ssize_t kernel_width):
    # gy: [batch, out_ch, out_len], x: [batch, in_ch, padded_len] -> gw: [out_ch, in_ch, k]
    cdef Py_ssize_t B = gy.shape[0], O = gy.shape[1], Lo = gy.shape[2]
    cdef Py_ssize_t C = x.shape[1], K = kernel_width
    if real is float:
        out = np.zeros((O, C, K), dtype=np.float32)
    else:
        out = np.zeros((O, C, K), dtype=np.float64)
    cdef real[:, :, ::1] gw = out
    cdef Py_ssize_t b, o, c, k, t
    cdef real acc
    with nogil:
        for b in range(B):
            for o in range(O):
                for c in range(C):
                    for k in range(K):
                        acc = 0
                        for t in range(Lo):
                            acc += gy[b, o, t] * x[b, c, t + k]
                        gw[o, c, k] += acc
    return out
