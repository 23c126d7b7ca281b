"""Pure numpy implementations of the row-wise kernels.

Every function takes C-contiguous 2-D arrays (rows x features) of float32 or
float64 and returns arrays of the same dtype. ``sum_squares`` accumulates in
float64 regardless of input dtype.
"""

import numpy as np


def softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_rows_backward(p, g):
    s = (g * p).sum(axis=1, keepdims=True)
    return p * (g - s)


def layer_norm_rows(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0].copy()


def layer_norm_rows_backward(g, xhat, rstd, gain):
    d = xhat.shape[1]
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    dxhat = g * gain
    a = dxhat.sum(axis=1, keepdims=True)
    b = (dxhat * xhat).sum(axis=1, keepdims=True)
    dx = (dxhat * d - a - xhat * b) * (rstd[:, None] / d)
    return dx.astype(g.dtype, copy=False), dgain, dbias


def log_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def sum_squares(x):
    flat = np.asarray(x, dtype=np.float64).ravel()
    return float(np.dot(flat, flat))
