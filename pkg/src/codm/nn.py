"""Dense numpy primitives with explicit forward/backward passes, plus AdamW.

Every forward function returns ``(output, cache)`` and has a matching
backward that maps the upstream gradient and the cache to input/parameter
gradients.  All functions preserve the dtype of their inputs, so the same
code runs the float32 production path and the float64 high-precision mode
used for finite-difference gradient checks.
"""

from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5
NEG_INF = -1e9


def linear_fwd(x: np.ndarray, w: np.ndarray):
    # flatten leading axes: one big GEMM beats a stack of small ones
    y = (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))
    return y, (x, w)


def linear_bwd(dy: np.ndarray, cache):
    x, w = cache
    flat_dy = dy.reshape(-1, dy.shape[-1])
    dx = (flat_dy @ w.T).reshape(x.shape)
    dw = x.reshape(-1, x.shape[-1]).T @ flat_dy
    return dx, dw


def layernorm_fwd(x: np.ndarray):
    """Zero-mean unit-variance normalization over the last axis, no affine."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(LN_EPS, dtype=x.dtype))
    xhat = xc * inv
    return xhat, (xhat, inv)


def layernorm_bwd(dy: np.ndarray, cache):
    xhat, inv = cache
    m1 = dy.mean(axis=-1, keepdims=True)
    m2 = (dy * xhat).mean(axis=-1, keepdims=True)
    return inv * (dy - m1 - xhat * m2)


def modulate_fwd(xhat: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    """Scale-and-shift conditioning: xhat * (1 + gamma) + beta, per sample."""
    y = xhat * (1.0 + gamma)[:, None, :] + beta[:, None, :]
    return y, (xhat, gamma)


def modulate_bwd(dy: np.ndarray, cache):
    xhat, gamma = cache
    dxhat = dy * (1.0 + gamma)[:, None, :]
    dgamma = (dy * xhat).sum(axis=1)
    dbeta = dy.sum(axis=1)
    return dxhat, dgamma, dbeta


def silu_fwd(x: np.ndarray):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_bwd(dy: np.ndarray, cache):
    x, s = cache
    d = 1.0 - s
    d *= x
    d += 1.0
    d *= s
    d *= dy
    return d


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def attention_fwd(q: np.ndarray, k: np.ndarray, v: np.ndarray, key_bias: np.ndarray):
    """Bidirectional scaled dot-product attention.

    q, k, v: (B, H, T, hd); key_bias: (B, 1, 1, T) additive mask (0 for valid
    keys, a large negative number for padding).
    """
    scale = np.asarray(1.0 / math.sqrt(q.shape[-1]), dtype=q.dtype)
    scores = (q @ np.swapaxes(k, -1, -2)) * scale + key_bias
    attn = softmax(scores, axis=-1)
    out = attn @ v
    return out, (q, k, v, attn, scale)


def attention_bwd(dout: np.ndarray, cache):
    q, k, v, attn, scale = cache
    dattn = dout @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ dout
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dq = (ds @ k) * scale
    dk = (np.swapaxes(ds, -1, -2) @ q) * scale
    return dq, dk, dv


def adamw_step(
    params: dict,
    grads: dict,
    m: dict,
    v: dict,
    t: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    weight_decay: float,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Weight decay applies to matrices (ndim >= 2) only; biases and vector
    parameters are not decayed.
    """
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        mn, vn = m[name], v[name]
        mn *= beta1
        mn += (1.0 - beta1) * g
        vn *= beta2
        vn += (1.0 - beta2) * np.square(g)
        if weight_decay and p.ndim >= 2:
            p *= 1.0 - lr * weight_decay
        denom = np.sqrt(vn / bc2)
        denom += eps
        p -= (lr / bc1) * mn / denom
