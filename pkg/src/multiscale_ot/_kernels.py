"""Online log-sum-exp reductions over pairwise costs, dense and block-sparse.

Every kernel streams over the source atoms of one output row, keeping a
running maximum so that no pairwise buffer is ever materialized.  Each row is
owned by a single thread and accumulated in a fixed order, which makes the
results bitwise identical for any thread count.

Block-sparse kernels expect both point sets sorted cluster-contiguously:
``out_ptr[J]:out_ptr[J+1]`` are the output atoms of cluster ``J``,
``src_ptr[I]:src_ptr[I+1]`` the source atoms of cluster ``I``, and
``csr_idx[csr_ptr[J]:csr_ptr[J+1]]`` lists the source clusters kept for ``J``.
"""

import math
import os
import warnings

import numpy as np

with warnings.catch_warnings():
    # numba complains about an old TBB on import; the workqueue/omp layers are fine
    warnings.simplefilter("ignore")
    import numba
    from numba import njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    # skip probing TBB, which warns when the installed version is too old
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

# Terms more than this many nats below the running maximum are skipped: their
# total contribution stays below 1e-16 relative even for 1e5 terms.
_CUTOFF = 50.0


@njit(inline="always", fastmath=False)
def _cost(x, i, y, k, p):
    s = 0.0
    for d in range(x.shape[1]):
        t = x[i, d] - y[k, d]
        s += t * t
    if p == 2.0:
        return 0.5 * s
    if p == 1.0:
        return math.sqrt(s)
    return s ** (0.5 * p) / p


@njit(inline="always")
def _lse_row(xo, i, ys, logw, h, inv_eps, p, start, stop, mx, s):
    for k in range(start, stop):
        v = logw[k] + (h[k] - _cost(xo, i, ys, k, p)) * inv_eps
        if v > mx:
            s = s * math.exp(mx - v) + 1.0
            mx = v
        elif v > mx - _CUTOFF:
            s += math.exp(v - mx)
    return mx, s


@njit(parallel=True)
def lse_dense(xo, ys, logw, h, eps, p, out):
    """out[i] = log sum_k exp(logw[k] + (h[k] - C(xo[i], ys[k])) / eps)."""
    inv_eps = 1.0 / eps
    m = ys.shape[0]
    for i in prange(xo.shape[0]):
        mx, s = _lse_row(xo, i, ys, logw, h, inv_eps, p, 0, m, -np.inf, 0.0)
        out[i] = mx + math.log(s)


@njit(parallel=True)
def lse_blocks(xo, ys, logw, h, eps, p, out_ptr, src_ptr, csr_ptr, csr_idx, out):
    inv_eps = 1.0 / eps
    for J in prange(out_ptr.shape[0] - 1):
        for i in range(out_ptr[J], out_ptr[J + 1]):
            mx = -np.inf
            s = 0.0
            for r in range(csr_ptr[J], csr_ptr[J + 1]):
                I = csr_idx[r]
                mx, s = _lse_row(xo, i, ys, logw, h, inv_eps, p, src_ptr[I], src_ptr[I + 1], mx, s)
            out[i] = mx + math.log(s)


@njit(inline="always")
def _apply_row(xo, i, ys, logw, h, bias_i, inv_eps, p, V, start, stop, mx, out):
    L = V.shape[1]
    for k in range(start, stop):
        v = logw[k] + (bias_i + h[k] - _cost(xo, i, ys, k, p)) * inv_eps
        if v > mx:
            r = math.exp(mx - v)
            for l in range(L):
                out[i, l] = out[i, l] * r + V[k, l]
            mx = v
        elif v > mx - _CUTOFF:
            e = math.exp(v - mx)
            for l in range(L):
                out[i, l] += e * V[k, l]
    return mx


@njit(parallel=True)
def apply_dense(xo, ys, logw, h, bias, eps, p, V, out):
    """out[i, :] = sum_k exp(logw[k] + (bias[i] + h[k] - C(xo[i], ys[k])) / eps) * V[k, :]."""
    inv_eps = 1.0 / eps
    m = ys.shape[0]
    L = V.shape[1]
    for i in prange(xo.shape[0]):
        for l in range(L):
            out[i, l] = 0.0
        mx = _apply_row(xo, i, ys, logw, h, bias[i], inv_eps, p, V, 0, m, -np.inf, out)
        scale = math.exp(mx) if mx > -np.inf else 0.0
        for l in range(L):
            out[i, l] *= scale


@njit(parallel=True)
def apply_blocks(xo, ys, logw, h, bias, eps, p, V, out_ptr, src_ptr, csr_ptr, csr_idx, out):
    inv_eps = 1.0 / eps
    L = V.shape[1]
    for J in prange(out_ptr.shape[0] - 1):
        for i in range(out_ptr[J], out_ptr[J + 1]):
            for l in range(L):
                out[i, l] = 0.0
            mx = -np.inf
            for r in range(csr_ptr[J], csr_ptr[J + 1]):
                I = csr_idx[r]
                mx = _apply_row(xo, i, ys, logw, h, bias[i], inv_eps, p, V,
                                src_ptr[I], src_ptr[I + 1], mx, out)
            scale = math.exp(mx) if mx > -np.inf else 0.0
            for l in range(L):
                out[i, l] *= scale


def set_threads(n):
    """Clamp ``n`` to what numba was launched with and apply it; returns the value used."""
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def get_threads():
    return numba.get_num_threads()
