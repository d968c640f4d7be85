"""Pure-numpy kernel set, the fallback backend.

Every function here has a compiled twin in ``_speedups.pyx`` with the same
name and signature. Inputs are C-contiguous float64 arrays; kernels return
freshly allocated arrays and never write into their arguments.
"""
import numpy as np

NAME = "python"

_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


def matmul(a, b):
    return a @ b


def matmul_grad_a(g, b):
    return g @ b.T


def matmul_grad_b(a, g):
    return a.T @ g


def softmax2d(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax2d_grad(p, g):
    dot = (g * p).sum(axis=1, keepdims=True)
    return p * (g - dot)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid_grad(y, g):
    return g * y * (1.0 - y)


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x, g):
    return g * (x > 0.0)


def gelu(x):
    u = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_grad(x, g):
    u = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    t = np.tanh(u)
    du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def layer_norm2d(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gain + bias, xhat, rstd


def layer_norm2d_grad(xhat, rstd, gain, g):
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    gx = g * gain
    m1 = gx.mean(axis=1, keepdims=True)
    m2 = (gx * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (gx - m1 - xhat * m2)
    return dx, dgain, dbias
