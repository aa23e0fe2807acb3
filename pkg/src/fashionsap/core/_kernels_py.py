"""Numpy implementations of the hot training kernels.

This is the fallback lane; `fashionsap.core._ckernels` is the compiled twin
with identical call signatures. Every function works on contiguous 2-D row
blocks (rows = flattened batch/sequence positions) in float32 or float64 and
must preserve the input dtype.
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715


def layernorm_fwd(x, gamma, beta, eps):
    """Row-wise layer norm. Returns (y, mean, rstd) with mean/rstd cached for backward."""
    mu = x.mean(axis=1)
    xc = x - mu[:, None]
    var = np.mean(xc * xc, axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * gamma + beta
    return y, mu, rstd


def layernorm_bwd(dy, x, gamma, mu, rstd):
    xhat = (x - mu[:, None]) * rstd[:, None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def softmax_fwd(x):
    """Row-wise softmax of a 2-D array."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(dy, y):
    s = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - s)


def gelu_fwd(x):
    u = GELU_C * (x + GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(dy, x):
    u = GELU_C * (x + GELU_A * x * x * x)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def ce_hard_fwd(logits, targets):
    """Per-row softmax cross-entropy against integer targets.

    Returns (losses, probs); probs are cached for the backward pass.
    """
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    e = np.exp(z)
    se = e.sum(axis=1)
    lse = np.log(se)
    rows = np.arange(logits.shape[0])
    losses = lse - z[rows, targets]
    probs = e / se[:, None]
    return losses, probs


def ce_hard_bwd(dloss, probs, targets):
    dlogits = probs * dloss[:, None]
    rows = np.arange(probs.shape[0])
    dlogits[rows, targets] -= dloss
    return dlogits


def ce_soft_fwd(logits, target_probs):
    """Per-row cross-entropy against full target distributions (rows sum to 1)."""
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    e = np.exp(z)
    se = e.sum(axis=1)
    lse = np.log(se)
    losses = lse - (target_probs * z).sum(axis=1)
    probs = e / se[:, None]
    return losses, probs


def ce_soft_bwd(dloss, probs, target_probs):
    return (probs - target_probs) * dloss[:, None]


def adamw_step(p, g, m, v, t, lr, beta1, beta2, eps, wd):
    """Decoupled-weight-decay adaptive-moment update, in place on p/m/v (1-D views)."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    mhat = m / bc1
    vhat = v / bc2
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)
