"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``BTA_NUMBA`` is not
set to ``0``.  Both implementations are always importable under explicit
names (``*_nb`` / ``*_np``) so the benchmark and the tests can compare them.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("BTA_NUMBA", "1") != "0"


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# --------------------------------------------------------------------------
# MLP forward / input gradient (batch)
# --------------------------------------------------------------------------


def mlp_forward_np(X, U, c, v, b):
    return np.tanh(X @ U.T + c) @ v + b


def mlp_input_grad_np(X, U, c, v):
    a = np.tanh(X @ U.T + c)
    return ((1.0 - a * a) * v) @ U


@_njit
def mlp_forward_nb(X, U, c, v, b):
    n, d = X.shape
    h = U.shape[0]
    out = np.empty(n)
    for r in range(n):
        acc = b
        for j in range(h):
            z = c[j]
            for k in range(d):
                z += U[j, k] * X[r, k]
            acc += v[j] * np.tanh(z)
        out[r] = acc
    return out


@_njit
def mlp_input_grad_nb(X, U, c, v):
    n, d = X.shape
    h = U.shape[0]
    out = np.zeros((n, d))
    for r in range(n):
        for j in range(h):
            z = c[j]
            for k in range(d):
                z += U[j, k] * X[r, k]
            t = np.tanh(z)
            s = v[j] * (1.0 - t * t)
            for k in range(d):
                out[r, k] += s * U[j, k]
    return out


# --------------------------------------------------------------------------
# One epoch of mini-batch SGD with momentum on MSE loss
# --------------------------------------------------------------------------


def mlp_sgd_epoch_np(X, y, perm, U, c, v, b, mU, mc, mv, mb, lr, momentum, batch, l2):
    """Run one epoch in place; ``b`` and ``mb`` are length-1 arrays."""
    n = perm.shape[0]
    for start in range(0, n, batch):
        idx = perm[start:start + batch]
        xb = X[idx]
        a = np.tanh(xb @ U.T + c)
        err = a @ v + b[0] - y[idx]
        scale = 2.0 / idx.shape[0]
        gv = scale * (err @ a)
        gb = scale * err.sum()
        dz = np.outer(err, v) * (1.0 - a * a)
        gU = scale * (dz.T @ xb) + l2 * U
        gc = scale * dz.sum(axis=0)
        mU *= momentum
        mU -= lr * gU
        mc *= momentum
        mc -= lr * gc
        mv *= momentum
        mv -= lr * gv
        mb[0] = momentum * mb[0] - lr * gb
        U += mU
        c += mc
        v += mv
        b[0] += mb[0]


@_njit
def mlp_sgd_epoch_nb(X, y, perm, U, c, v, b, mU, mc, mv, mb, lr, momentum, batch, l2):
    n = perm.shape[0]
    h, d = U.shape
    a = np.empty(h)
    gU = np.empty((h, d))
    gc = np.empty(h)
    gv = np.empty(h)
    for start in range(0, n, batch):
        stop = min(start + batch, n)
        gU[:, :] = 0.0
        gc[:] = 0.0
        gv[:] = 0.0
        gb = 0.0
        scale = 2.0 / (stop - start)
        for p in range(start, stop):
            r = perm[p]
            pred = b[0]
            for j in range(h):
                z = c[j]
                for k in range(d):
                    z += U[j, k] * X[r, k]
                a[j] = np.tanh(z)
                pred += v[j] * a[j]
            err = pred - y[r]
            gb += scale * err
            for j in range(h):
                gv[j] += scale * err * a[j]
                dz = scale * err * v[j] * (1.0 - a[j] * a[j])
                gc[j] += dz
                for k in range(d):
                    gU[j, k] += dz * X[r, k]
        for j in range(h):
            for k in range(d):
                mU[j, k] = momentum * mU[j, k] - lr * (gU[j, k] + l2 * U[j, k])
                U[j, k] += mU[j, k]
            mc[j] = momentum * mc[j] - lr * gc[j]
            c[j] += mc[j]
            mv[j] = momentum * mv[j] - lr * gv[j]
            v[j] += mv[j]
        mb[0] = momentum * mb[0] - lr * gb
        b[0] += mb[0]


# --------------------------------------------------------------------------
# Centered moving median along axis 0, truncated at the edges
# --------------------------------------------------------------------------


def moving_median_np(x, m):
    rows = x.shape[0]
    half = m // 2
    out = np.empty_like(x)
    for t in range(rows):
        lo = max(0, t - half)
        hi = min(rows, t + half + 1)
        out[t] = np.median(x[lo:hi], axis=0)
    return out


@_njit
def moving_median_nb(x, m):
    rows, cols = x.shape
    half = m // 2
    out = np.empty_like(x)
    for t in range(rows):
        lo = max(0, t - half)
        hi = min(rows, t + half + 1)
        for j in range(cols):
            out[t, j] = np.median(x[lo:hi, j])
    return out


# --------------------------------------------------------------------------
# Peak-to-trough drawdown of a path
# --------------------------------------------------------------------------


def max_drawdown_np(path):
    peaks = np.maximum.accumulate(path)
    return float(np.max((peaks - path) / peaks)) if path.size else 0.0


@_njit
def max_drawdown_nb(path):
    worst = 0.0
    peak = -np.inf
    for value in path:
        if value > peak:
            peak = value
        dd = (peak - value) / peak
        if dd > worst:
            worst = dd
    return worst


# Above this many rows the BLAS-backed numpy kernels beat the numba loops
# (see benchmarks/bench_kernels.py); single windows are much faster in numba.
SMALL_BATCH = 8


def _by_batch_size(small, large):
    def kernel(X, *args):
        return (small if X.shape[0] <= SMALL_BATCH else large)(X, *args)

    kernel.__name__ = large.__name__.removesuffix("_np")
    return kernel


if USE_NUMBA:
    mlp_forward = _by_batch_size(mlp_forward_nb, mlp_forward_np)
    mlp_input_grad = _by_batch_size(mlp_input_grad_nb, mlp_input_grad_np)
    mlp_sgd_epoch = mlp_sgd_epoch_nb
    moving_median = moving_median_nb
    max_drawdown = max_drawdown_nb
else:
    mlp_forward = mlp_forward_np
    mlp_input_grad = mlp_input_grad_np
    mlp_sgd_epoch = mlp_sgd_epoch_np
    moving_median = moving_median_np
    max_drawdown = max_drawdown_np


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
