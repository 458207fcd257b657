"""Functional neural-net primitives with explicit forward caches.

Every op is a pair of pure functions: ``*_fwd(...) -> (out, cache)`` and
``*_bwd(cache, dout) -> grads``.  Teacher networks run two forward passes
(labeled and unlabeled) before a single parameter update, so caches are
values passed around by the caller rather than state stored on layer objects.
Parameters live in flat ``{name: array}`` dicts; everything is float64 so
training trajectories are bit-reproducible.
"""
from __future__ import annotations

import numpy as np

LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def linear_params(rng, d_in, d_out, scale=None):
    """Weight and bias for a dense layer; fan-in scaling by default."""
    if scale is None:
        scale = 1.0 / np.sqrt(d_in)
    return {"w": rng.standard_normal((d_in, d_out)) * scale,
            "b": np.zeros(d_out)}


def conv_params(rng, c_out, c_in, kh, kw):
    """He-scaled kernel for a conv layer followed by a ReLU."""
    scale = np.sqrt(2.0 / (c_in * kh * kw))
    return {"w": rng.standard_normal((c_out, c_in, kh, kw)) * scale,
            "b": np.zeros(c_out)}


def layernorm_params(d):
    return {"g": np.ones(d), "b": np.zeros(d)}


def add_params(tree: dict, prefix: str, group: dict) -> None:
    for key, value in group.items():
        tree[f"{prefix}.{key}"] = value


# ---------------------------------------------------------------------------
# dense / activation / normalization
# ---------------------------------------------------------------------------

def linear_fwd(x, w, b):
    return x @ w + b, (x, w)


def linear_bwd(cache, dy):
    x, w = cache
    d_in, d_out = w.shape
    x2 = x.reshape(-1, d_in)
    dy2 = dy.reshape(-1, d_out)
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


def relu_fwd(x):
    return np.maximum(x, 0.0), x > 0.0


def relu_bwd(mask, dy):
    return dy * mask


def layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xn = xc * inv
    return g * xn + b, (xn, inv, g)


def layernorm_bwd(cache, dy):
    xn, inv, g = cache
    dg = (dy * xn).reshape(-1, xn.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xn.shape[-1]).sum(axis=0)
    dxn = dy * g
    dx = inv * (dxn - dxn.mean(axis=-1, keepdims=True)
                - xn * (dxn * xn).mean(axis=-1, keepdims=True))
    return dx, dg, db


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_bwd(p, dp, axis=-1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# multi-head self-attention
# ---------------------------------------------------------------------------

def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention_fwd(x, p, prefix, n_heads):
    """Self-attention over (B, T, d) input using params ``prefix.{wq,...,bo}``."""
    q, cq = linear_fwd(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k, ck = linear_fwd(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v, cv = linear_fwd(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    qh, kh, vh = _split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    attn = softmax(scores)
    out = _merge_heads(attn @ vh)
    y, co = linear_fwd(out, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    return y, (cq, ck, cv, co, qh, kh, vh, attn, scale, n_heads)


def attention_bwd(cache, dy):
    cq, ck, cv, co, qh, kh, vh, attn, scale, n_heads = cache
    dout, dwo, dbo = linear_bwd(co, dy)
    doh = _split_heads(dout, n_heads)
    dattn = doh @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ doh
    dscores = softmax_bwd(attn, dattn) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    dq, dwq, dbq = linear_bwd(cq, _merge_heads(dqh))
    dk, dwk, dbk = linear_bwd(ck, _merge_heads(dkh))
    dv, dwv, dbv = linear_bwd(cv, _merge_heads(dvh))
    grads = {"wq": dwq, "bq": dbq, "wk": dwk, "bk": dbk,
             "wv": dwv, "bv": dbv, "wo": dwo, "bo": dbo}
    return dq + dk + dv, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam over a flat param dict; updates in place, iteration order fixed."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for key in sorted(params):
            g = grads[key]
            m = self.m[key]
            v = self.v[key]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            params[key] -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def zero_grads_like(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def accumulate(total, part, scale=1.0):
    """total += scale * part for matching keys of two grad dicts."""
    for key, value in part.items():
        total[key] += scale * value
    return total
