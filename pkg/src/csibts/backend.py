"""Hot numeric kernels with numba-compiled and pure-numpy twin implementations.

Two kernel families live here:

* ``disarray_*`` -- the per-frame disarray statistic (subcarrier-wise temporal
  entropy minus a weighted mean-absolute-deviation term, averaged over
  subcarriers and multiplied across antenna pairs).  This is evaluated over
  thousands of sliding windows when building indicators and confidence
  distributions.
* ``conv2d`` / ``conv2d_grads`` -- the convolution forward/backward used by the
  residual feature extractor.

Every kernel has a numba ``@njit`` version and a pure-numpy version.  The
module-level names (``disarray_frames``, ``conv2d``, ...) dispatch to the
compiled path when numba is importable, unless ``CSIBTS_NO_NUMBA=1`` (or
``NUMBA_DISABLE_JIT=1``) is set, in which case the numpy path is used
everywhere.  ``benchmarks/bench_kernels.py`` times the two paths against each
other.

All kernels are sequential and write each output element exactly once, so
results are bit-reproducible run to run.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("CSIBTS_NO_NUMBA", "") not in ("", "0") or \
    os.environ.get("NUMBA_DISABLE_JIT", "") not in ("", "0")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # decorator stub so the kernels below still parse
        def wrap(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return wrap


# ---------------------------------------------------------------------------
# disarray
# ---------------------------------------------------------------------------
#
# Both paths use the same exactness guards so that analytically clean inputs
# give analytically exact outputs: a constant (s, k) series has entropy ln(tau)
# and zero deviation, a mean of identical values is that value, and a product
# of K identical factors is value**K.

def disarray_frames_numpy(frames, alpha, beta, eps=1e-12, chunk=256):
    """Vectorized disarray over a stack of frames, shape (N, tau, S, K) -> (N,).

    Chunks over N to bound the size of temporaries.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n, tau, _, k_len = frames.shape
    log_tau = np.log(float(tau))
    out = np.empty(n)
    for lo in range(0, n, chunk):
        v = frames[lo:lo + chunk] + eps             # (n', tau, S, K)
        const = v.max(axis=1) == v.min(axis=1)      # (n', S, K)
        tot = v.sum(axis=1)
        p = v / tot[:, None]
        ent = -(p * np.log(p)).sum(axis=1)
        dev = np.abs(v - v.mean(axis=1, keepdims=True))
        if beta != 1.0:
            dev = dev ** beta
        dist = dev.sum(axis=1)
        w = np.where(const, log_tau, ent - (alpha / tau) * dist)
        same_s = np.all(w == w[:, :1, :], axis=1)   # (n', K)
        m = np.where(same_s, w[:, 0, :], w.mean(axis=1))
        same_k = np.all(m == m[:, :1], axis=1)
        out[lo:lo + chunk] = np.where(same_k, m[:, 0] ** k_len, m.prod(axis=1))
    return out


@njit(cache=True)
def _disarray_windows_njit(v, vlogv, anchors, tau, alpha, beta, s_len, k_len):
    """Core loop over window anchors.

    ``v`` is the floored data (x + eps) and ``vlogv`` the precomputed v*ln(v),
    both flattened to (T, S*K) with k fastest.  Entropy of a window column is
    recovered from the identity -sum(p ln p) = ln(total) - sum(v ln v)/total,
    so the logs are taken once per packet instead of once per overlapping
    window.  Sweeps run packet-major to keep the reads streaming.
    """
    sk = s_len * k_len
    n = anchors.shape[0]
    log_tau = np.log(float(tau))
    tot = np.empty(sk)
    smc = np.empty(sk)
    dist = np.empty(sk)
    cst = np.empty(sk, dtype=np.bool_)
    means = np.empty(k_len)
    out = np.empty(n)
    for i in range(n):
        start = anchors[i] - tau + 1
        for j in range(sk):
            tot[j] = 0.0
            smc[j] = 0.0
            dist[j] = 0.0
            cst[j] = True
        for t in range(start, start + tau):
            for j in range(sk):
                val = v[t, j]
                tot[j] += val
                smc[j] += vlogv[t, j]
                cst[j] &= val == v[start, j]
        if beta == 1.0:
            for t in range(start, start + tau):
                for j in range(sk):
                    dist[j] += abs(v[t, j] - tot[j] / tau)
        else:
            for t in range(start, start + tau):
                for j in range(sk):
                    dist[j] += abs(v[t, j] - tot[j] / tau) ** beta
        all_same_k = True
        for k in range(k_len):
            acc = 0.0
            same_s = True
            w0 = 0.0
            for s in range(s_len):
                j = s * k_len + k
                if cst[j]:
                    w = log_tau
                else:
                    w = np.log(tot[j]) - smc[j] / tot[j] - (alpha / tau) * dist[j]
                if s == 0:
                    w0 = w
                elif w != w0:
                    same_s = False
                acc += w
            means[k] = w0 if same_s else acc / s_len
            if means[k] != means[0]:
                all_same_k = False
        if all_same_k:
            out[i] = means[0] ** k_len
        else:
            rho = 1.0
            for k in range(k_len):
                rho *= means[k]
            out[i] = rho
    return out


def disarray_windows_numpy(data, anchors, tau, alpha, beta, eps=1e-12, chunk=256):
    data = np.asarray(data, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.int64)
    n = anchors.shape[0]
    out = np.empty(n)
    # windows[w] covers packets w .. w+tau-1; anchor a maps to window a-tau+1
    win = np.lib.stride_tricks.sliding_window_view(data, tau, axis=0)
    for lo in range(0, n, chunk):
        idx = anchors[lo:lo + chunk] - tau + 1
        frames = np.moveaxis(win[idx], -1, 1)       # (n', tau, S, K)
        out[lo:lo + chunk] = disarray_frames_numpy(frames, alpha, beta, eps, chunk=chunk)
    return out


def _floored_flat(data, eps):
    t_len, s_len, k_len = data.shape
    v = np.ascontiguousarray(data, dtype=np.float64).reshape(t_len, s_len * k_len) + eps
    return v, v * np.log(v), s_len, k_len


def disarray_windows_njit(data, anchors, tau, alpha, beta, eps=1e-12):
    v, vlogv, s_len, k_len = _floored_flat(data, eps)
    anchors = np.ascontiguousarray(anchors, dtype=np.int64)
    return _disarray_windows_njit(v, vlogv, anchors, int(tau), float(alpha), float(beta),
                                  s_len, k_len)


def disarray_frames_njit(frames, alpha, beta, eps=1e-12):
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    n, tau = frames.shape[0], frames.shape[1]
    v, vlogv, s_len, k_len = _floored_flat(
        frames.reshape(n * tau, frames.shape[2], frames.shape[3]), eps)
    anchors = np.arange(1, n + 1, dtype=np.int64) * tau - 1
    return _disarray_windows_njit(v, vlogv, anchors, int(tau), float(alpha), float(beta),
                                  s_len, k_len)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def _out_hw(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def _im2col(x, kh, kw, stride, pad, ho, wo):
    b, c = x.shape[0], x.shape[1]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols, shape, kh, kw, stride, pad, ho, wo):
    b, c, h, w = shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w]
    return xp


def conv2d_numpy(x, w, b, stride=1, pad=0):
    """x (B,C,H,W), w (F,C,kh,kw), b (F,) -> (B,F,Ho,Wo) via im2col + matmul."""
    bs, _, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = _out_hw(h, wd, kh, kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad, ho, wo)
    y = np.matmul(w.reshape(f, -1), cols)           # (B, F, Ho*Wo)
    y += b[:, None]
    return y.reshape(bs, f, ho, wo)


def conv2d_grads_numpy(x, w, dy, stride=1, pad=0):
    bs, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    cols = _im2col(x, kh, kw, stride, pad, ho, wo)
    dyf = dy.reshape(bs, f, ho * wo)
    db = dyf.sum(axis=(0, 2))
    dw = np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    dcols = np.matmul(w.reshape(f, -1).T, dyf)      # (B, C*kh*kw, Ho*Wo)
    dx = _col2im(dcols, x.shape, kh, kw, stride, pad, ho, wo)
    return dx, dw, db


@njit(cache=True)
def _conv2d_njit(x, w, b, stride, pad):
    bs, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    y = np.empty((bs, f, ho, wo), dtype=x.dtype)
    for n in range(bs):
        for fo in range(f):
            for oi in range(ho):
                i0 = oi * stride - pad
                ki_lo = max(0, -i0)
                ki_hi = min(kh, h - i0)
                for oj in range(wo):
                    j0 = oj * stride - pad
                    kj_lo = max(0, -j0)
                    kj_hi = min(kw, wd - j0)
                    acc = b[fo]
                    for ci in range(c):
                        for ki in range(ki_lo, ki_hi):
                            i = i0 + ki
                            for kj in range(kj_lo, kj_hi):
                                acc += x[n, ci, i, j0 + kj] * w[fo, ci, ki, kj]
                    y[n, fo, oi, oj] = acc
    return y


@njit(cache=True)
def _conv2d_grads_njit(x, w, dy, stride, pad):
    bs, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = np.zeros(f, dtype=x.dtype)
    for n in range(bs):
        for fo in range(f):
            for oi in range(ho):
                i0 = oi * stride - pad
                ki_lo = max(0, -i0)
                ki_hi = min(kh, h - i0)
                for oj in range(wo):
                    j0 = oj * stride - pad
                    kj_lo = max(0, -j0)
                    kj_hi = min(kw, wd - j0)
                    g = dy[n, fo, oi, oj]
                    db[fo] += g
                    for ci in range(c):
                        for ki in range(ki_lo, ki_hi):
                            i = i0 + ki
                            for kj in range(kj_lo, kj_hi):
                                dx[n, ci, i, j0 + kj] += g * w[fo, ci, ki, kj]
                                dw[fo, ci, ki, kj] += g * x[n, ci, i, j0 + kj]
    return dx, dw, db


def conv2d_njit(x, w, b, stride=1, pad=0):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return _conv2d_njit(x, w, b, stride, pad)


def conv2d_grads_njit(x, w, dy, stride=1, pad=0):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    dy = np.ascontiguousarray(dy, dtype=np.float64)
    return _conv2d_grads_njit(x, w, dy, stride, pad)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    disarray_frames = disarray_frames_njit
    disarray_windows = disarray_windows_njit
    # im2col+BLAS wins for the convolution sizes used here (see the benchmark);
    # the njit twins remain available for the numpy-free comparison.
    conv2d = conv2d_numpy
    conv2d_grads = conv2d_grads_numpy
else:
    disarray_frames = disarray_frames_numpy
    disarray_windows = disarray_windows_numpy
    conv2d = conv2d_numpy
    conv2d_grads = conv2d_grads_numpy
