# Compiled row-wise kernels: single-pass layer norm, softmax backward and a
# sequential float64 sum of squares. Exp-bound kernels stay on numpy, whose
# vectorized exp is faster than a scalar libm loop.
# Reductions run sequentially along each row; no parallel sums.
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


def _empty_like(x):
    return np.empty_like(x, order="C")


def softmax_rows_backward(real[:, ::1] p, real[:, ::1] g):
    cdef Py_ssize_t n = p.shape[0], d = p.shape[1], i, j
    cdef double s
    out = _empty_like(np.asarray(p))
    cdef real[:, ::1] o = out
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += g[i, j] * p[i, j]
            for j in range(d):
                o[i, j] = <real>(p[i, j] * (g[i, j] - s))
    return out


def layer_norm_rows(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double mean, var, c, r
    out = _empty_like(np.asarray(x))
    xhat_arr = _empty_like(np.asarray(x))
    rstd_arr = np.empty(n, dtype=np.asarray(x).dtype)
    cdef real[:, ::1] o = out
    cdef real[:, ::1] xh = xhat_arr
    cdef real[::1] rs = rstd_arr
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mean
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rs[i] = <real>r
            for j in range(d):
                c = (x[i, j] - mean) * r
                xh[i, j] = <real>c
                o[i, j] = <real>(c * gain[j] + bias[j])
    return out, xhat_arr, rstd_arr


def layer_norm_rows_backward(real[:, ::1] g, real[:, ::1] xhat, real[::1] rstd, real[::1] gain):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    cdef double a, b, dxh
    dt = np.asarray(g).dtype
    dx_arr = np.empty((n, d), dtype=dt)
    dgain_arr = np.zeros(d, dtype=np.float64)
    dbias_arr = np.zeros(d, dtype=np.float64)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    with nogil:
        for i in range(n):
            a = 0.0
            b = 0.0
            for j in range(d):
                dxh = g[i, j] * gain[j]
                a += dxh
                b += dxh * xhat[i, j]
                dgain[j] += g[i, j] * xhat[i, j]
                dbias[j] += g[i, j]
            for j in range(d):
                dxh = g[i, j] * gain[j]
                dx[i, j] = <real>((dxh * d - a - xhat[i, j] * b) * rstd[i] / d)
    return dx_arr, dgain_arr.astype(dt), dbias_arr.astype(dt)


def _sum_squares_1d(real[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double s = 0.0
    with nogil:
        for i in range(n):
            s += (<double>x[i]) * x[i]
    return s


def sum_squares(x):
    arr = np.ascontiguousarray(x).ravel()
    if arr.dtype != np.float32 and arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    return _sum_squares_1d(arr)
