# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twin of fashionsap.core._kernels_py.

Same call signatures, same float32/float64 support. Loops accumulate in
double for stability; per-element results are stored back in the input
dtype. Selected at import by fashionsap.core.kernels when available.
"""

import numpy as np

cimport cython
from libc.math cimport exp, log, sqrt, tanh

ctypedef fused floating:
    float
    double

DEF GELU_C = 0.7978845608028654
DEF GELU_A = 0.044715


# ---------------------------------------------------------------- layernorm

cdef void _ln_fwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta,
                  floating[:, ::1] y, floating[::1] mu, floating[::1] rstd,
                  double eps) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double s, m, v, r, xc
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        m = s / d
        v = 0.0
        for j in range(d):
            xc = x[i, j] - m
            v += xc * xc
        v /= d
        r = 1.0 / sqrt(v + eps)
        mu[i] = <floating> m
        rstd[i] = <floating> r
        for j in range(d):
            y[i, j] = <floating> ((x[i, j] - m) * r * gamma[j] + beta[j])


def layernorm_fwd(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    mu = np.empty(n, dtype=x.dtype)
    rstd = np.empty(n, dtype=x.dtype)
    if x.dtype == np.float32:
        _ln_fwd[float](x, gamma, beta, y, mu, rstd, eps)
    else:
        _ln_fwd[double](x, gamma, beta, y, mu, rstd, eps)
    return y, mu, rstd


cdef void _ln_bwd(floating[:, ::1] dy, floating[:, ::1] x, floating[::1] gamma,
                  floating[::1] mu, floating[::1] rstd,
                  floating[:, ::1] dx, floating[::1] dgamma, floating[::1] dbeta) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double m1, m2, xhat, dxhat
    for j in range(d):
        dgamma[j] = 0
        dbeta[j] = 0
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xhat = (x[i, j] - mu[i]) * rstd[i]
            dxhat = dy[i, j] * gamma[j]
            dgamma[j] += <floating> (dy[i, j] * xhat)
            dbeta[j] += dy[i, j]
            m1 += dxhat
            m2 += dxhat * xhat
        m1 /= d
        m2 /= d
        for j in range(d):
            xhat = (x[i, j] - mu[i]) * rstd[i]
            dxhat = dy[i, j] * gamma[j]
            dx[i, j] = <floating> (rstd[i] * (dxhat - m1 - xhat * m2))


def layernorm_bwd(dy, x, gamma, mu, rstd):
    dx = np.empty_like(x)
    dgamma = np.empty_like(gamma)
    dbeta = np.empty_like(gamma)
    if x.dtype == np.float32:
        _ln_bwd[float](dy, x, gamma, mu, rstd, dx, dgamma, dbeta)
    else:
        _ln_bwd[double](dy, x, gamma, mu, rstd, dx, dgamma, dbeta)
    return dx, dgamma, dbeta


# ------------------------------------------------------------------ softmax

cdef void _sm_fwd(floating[:, ::1] x, floating[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            y[i, j] = <floating> exp(x[i, j] - m)
            s += y[i, j]
        for j in range(d):
            y[i, j] = <floating> (y[i, j] / s)


def softmax_fwd(x):
    y = np.empty_like(x)
    if x.dtype == np.float32:
        _sm_fwd[float](x, y)
    else:
        _sm_fwd[double](x, y)
    return y


cdef void _sm_bwd(floating[:, ::1] dy, floating[:, ::1] y, floating[:, ::1] dx) noexcept nogil:
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += dy[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = <floating> (y[i, j] * (dy[i, j] - s))


def softmax_bwd(dy, y):
    dx = np.empty_like(y)
    if y.dtype == np.float32:
        _sm_bwd[float](dy, y, dx)
    else:
        _sm_bwd[double](dy, y, dx)
    return dx


# -------------------------------------------------------------------- gelu

cdef void _gelu_fwd(floating[::1] x, floating[::1] y) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], i
    cdef double u, xv
    for i in range(n):
        xv = x[i]
        u = GELU_C * (xv + GELU_A * xv * xv * xv)
        y[i] = <floating> (0.5 * xv * (1.0 + tanh(u)))


def gelu_fwd(x):
    y = np.empty_like(x)
    xf = x.reshape(-1)
    yf = y.reshape(-1)
    if x.dtype == np.float32:
        _gelu_fwd[float](xf, yf)
    else:
        _gelu_fwd[double](xf, yf)
    return y


cdef void _gelu_bwd(floating[::1] dy, floating[::1] x, floating[::1] dx) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], i
    cdef double u, t, du, xv
    for i in range(n):
        xv = x[i]
        u = GELU_C * (xv + GELU_A * xv * xv * xv)
        t = tanh(u)
        du = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv)
        dx[i] = <floating> (dy[i] * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du))


def gelu_bwd(dy, x):
    dx = np.empty_like(x)
    if x.dtype == np.float32:
        _gelu_bwd[float](dy.reshape(-1), x.reshape(-1), dx.reshape(-1))
    else:
        _gelu_bwd[double](dy.reshape(-1), x.reshape(-1), dx.reshape(-1))
    return dx


# ---------------------------------------------------------- cross-entropy

cdef void _ce_hard_fwd(floating[:, ::1] logits, long long[::1] targets,
                       floating[::1] losses, floating[:, ::1] probs) noexcept nogil:
    cdef Py_ssize_t n = logits.shape[0], d = logits.shape[1], i, j
    cdef double m, s, lse
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, d):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(d):
            probs[i, j] = <floating> exp(logits[i, j] - m)
            s += probs[i, j]
        lse = log(s)
        losses[i] = <floating> (lse - (logits[i, targets[i]] - m))
        for j in range(d):
            probs[i, j] = <floating> (probs[i, j] / s)


def ce_hard_fwd(logits, targets):
    n = logits.shape[0]
    losses = np.empty(n, dtype=logits.dtype)
    probs = np.empty_like(logits)
    t = np.ascontiguousarray(targets, dtype=np.int64)
    if logits.dtype == np.float32:
        _ce_hard_fwd[float](logits, t, losses, probs)
    else:
        _ce_hard_fwd[double](logits, t, losses, probs)
    return losses, probs


cdef void _ce_hard_bwd(floating[::1] dloss, floating[:, ::1] probs,
                       long long[::1] targets, floating[:, ::1] dlogits) noexcept nogil:
    cdef Py_ssize_t n = probs.shape[0], d = probs.shape[1], i, j
    for i in range(n):
        for j in range(d):
            dlogits[i, j] = probs[i, j] * dloss[i]
        dlogits[i, targets[i]] -= dloss[i]


def ce_hard_bwd(dloss, probs, targets):
    dlogits = np.empty_like(probs)
    t = np.ascontiguousarray(targets, dtype=np.int64)
    if probs.dtype == np.float32:
        _ce_hard_bwd[float](dloss, probs, t, dlogits)
    else:
        _ce_hard_bwd[double](dloss, probs, t, dlogits)
    return dlogits


cdef void _ce_soft_fwd(floating[:, ::1] logits, floating[:, ::1] yt,
                       floating[::1] losses, floating[:, ::1] probs) noexcept nogil:
    cdef Py_ssize_t n = logits.shape[0], d = logits.shape[1], i, j
    cdef double m, s, lse, dot
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, d):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(d):
            probs[i, j] = <floating> exp(logits[i, j] - m)
            s += probs[i, j]
        lse = log(s)
        dot = 0.0
        for j in range(d):
            dot += yt[i, j] * (logits[i, j] - m)
            probs[i, j] = <floating> (probs[i, j] / s)
        losses[i] = <floating> (lse - dot)


def ce_soft_fwd(logits, target_probs):
    n = logits.shape[0]
    losses = np.empty(n, dtype=logits.dtype)
    probs = np.empty_like(logits)
    if logits.dtype == np.float32:
        _ce_soft_fwd[float](logits, target_probs, losses, probs)
    else:
        _ce_soft_fwd[double](logits, target_probs, losses, probs)
    return losses, probs


cdef void _ce_soft_bwd(floating[::1] dloss, floating[:, ::1] probs,
                       floating[:, ::1] yt, floating[:, ::1] dlogits) noexcept nogil:
    cdef Py_ssize_t n = probs.shape[0], d = probs.shape[1], i, j
    for i in range(n):
        for j in range(d):
            dlogits[i, j] = <floating> ((probs[i, j] - yt[i, j]) * dloss[i])


def ce_soft_bwd(dloss, probs, target_probs):
    dlogits = np.empty_like(probs)
    if probs.dtype == np.float32:
        _ce_soft_bwd[float](dloss, probs, target_probs, dlogits)
    else:
        _ce_soft_bwd[double](dloss, probs, target_probs, dlogits)
    return dlogits


# -------------------------------------------------------------------- adamw

cdef void _adamw(floating[::1] p, floating[::1] g, floating[::1] m, floating[::1] v,
                 double lr, double beta1, double beta2, double bc1, double bc2,
                 double eps, double wd) noexcept nogil:
    cdef Py_ssize_t n = p.shape[0], i
    cdef double mi, vi
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
        m[i] = <floating> mi
        v[i] = <floating> vi
        p[i] = <floating> (p[i] - lr * ((mi / bc1) / (sqrt(vi / bc2) + eps) + wd * p[i]))


def adamw_step(p, g, m, v, t, lr, beta1, beta2, eps, wd):
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    pf = p.reshape(-1)
    gf = np.ascontiguousarray(g.reshape(-1), dtype=p.dtype)
    mf = m.reshape(-1)
    vf = v.reshape(-1)
    if p.dtype == np.float32:
        _adamw[float](pf, gf, mf, vf, lr, beta1, beta2, bc1, bc2, eps, wd)
    else:
        _adamw[double](pf, gf, mf, vf, lr, beta1, beta2, bc1, bc2, eps, wd)
