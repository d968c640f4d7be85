# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel set, mirroring py_kernels function for function.

Matmuls call BLAS dgemm directly (no array-wrapper dispatch, no transpose
copies for the gradient variants); row reductions are hand loops. Large
pure-elementwise maps (gelu, relu) stay on numpy's SIMD ufuncs, which beat
scalar libc loops at these sizes.
"""
import numpy as np

from libc.math cimport exp, sqrt
from scipy.linalg.cython_blas cimport dgemm

from .py_kernels import gelu, gelu_grad, relu, relu_grad

NAME = "cython"


cdef void _dgemm(char ta, char tb, int m, int n, int k,
                 double* a, int lda, double* b, int ldb,
                 double* c, int ldc) noexcept nogil:
    cdef double alpha = 1.0, beta = 0.0
    dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


def matmul(double[:, ::1] a, double[:, ::1] b):
    # row-major C = A @ B via column-major C^T = B^T A^T
    cdef int m = <int> a.shape[0], k = <int> a.shape[1], n = <int> b.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out_arr
    if m and n and k:
        _dgemm(b'N', b'N', n, m, k, &b[0, 0], n, &a[0, 0], k, &c[0, 0], n)
    elif m and n:
        out_arr[:] = 0.0
    return out_arr


def matmul_grad_a(double[:, ::1] g, double[:, ::1] b):
    # (m,n) @ (k,n)^T -> (m,k)
    cdef int m = <int> g.shape[0], n = <int> g.shape[1], k = <int> b.shape[0]
    out_arr = np.empty((m, k), dtype=np.float64)
    cdef double[:, ::1] c = out_arr
    if m and n and k:
        _dgemm(b'T', b'N', k, m, n, &b[0, 0], n, &g[0, 0], n, &c[0, 0], k)
    elif m and k:
        out_arr[:] = 0.0
    return out_arr


def matmul_grad_b(double[:, ::1] a, double[:, ::1] g):
    # (m,k)^T @ (m,n) -> (k,n)
    cdef int m = <int> a.shape[0], k = <int> a.shape[1], n = <int> g.shape[1]
    out_arr = np.empty((k, n), dtype=np.float64)
    cdef double[:, ::1] c = out_arr
    if m and n and k:
        _dgemm(b'N', b'T', n, k, m, &g[0, 0], n, &a[0, 0], k, &c[0, 0], n)
    elif k and n:
        out_arr[:] = 0.0
    return out_arr


def softmax2d(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, s, v
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            v = exp(x[i, j] - mx)
            out[i, j] = v
            s += v
        for j in range(m):
            out[i, j] /= s
    return out_arr


def softmax2d_grad(double[:, ::1] p, double[:, ::1] g):
    cdef Py_ssize_t n = p.shape[0], m = p.shape[1]
    cdef Py_ssize_t i, j
    cdef double dot
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += g[i, j] * p[i, j]
        for j in range(m):
            out[i, j] = p[i, j] * (g[i, j] - dot)
    return out_arr


def sigmoid(x):
    arr = np.asarray(x, dtype=np.float64)
    flat_in = np.ascontiguousarray(arr.reshape(-1))
    out_arr = np.empty_like(flat_in)
    cdef double[::1] xv = flat_in
    cdef double[::1] ov = out_arr
    cdef Py_ssize_t i, n = xv.shape[0]
    for i in range(n):
        ov[i] = 1.0 / (1.0 + exp(-xv[i]))
    return out_arr.reshape(arr.shape)


def sigmoid_grad(y, g):
    y_arr = np.asarray(y, dtype=np.float64)
    flat_y = np.ascontiguousarray(y_arr.reshape(-1))
    flat_g = np.ascontiguousarray(np.asarray(g, dtype=np.float64).reshape(-1))
    out_arr = np.empty_like(flat_y)
    cdef double[::1] yv = flat_y
    cdef double[::1] gv = flat_g
    cdef double[::1] ov = out_arr
    cdef Py_ssize_t i, n = yv.shape[0]
    for i in range(n):
        ov[i] = gv[i] * yv[i] * (1.0 - yv[i])
    return out_arr.reshape(y_arr.shape)


def layer_norm2d(double[:, ::1] x, double[::1] gain, double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mu, var, rs, xc
    y_arr = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            xc = x[i, j] - mu
            var += xc * xc
        var /= d
        rs = 1.0 / sqrt(var + eps)
        rstd[i] = rs
        for j in range(d):
            xc = (x[i, j] - mu) * rs
            xhat[i, j] = xc
            y[i, j] = xc * gain[j] + bias[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm2d_grad(double[:, ::1] xhat, double[::1] rstd, double[::1] gain,
                      double[:, ::1] g):
    cdef Py_ssize_t n = xhat.shape[0], d = xhat.shape[1]
    cdef Py_ssize_t i, j
    cdef double m1, m2, gx
    dx_arr = np.empty((n, d), dtype=np.float64)
    dgain_arr = np.zeros(d, dtype=np.float64)
    dbias_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            gx = g[i, j] * gain[j]
            m1 += gx
            m2 += gx * xhat[i, j]
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            gx = g[i, j] * gain[j]
            dx[i, j] = rstd[i] * (gx - m1 - xhat[i, j] * m2)
    return dx_arr, dgain_arr, dbias_arr
