"""Hot inner loops, compiled with numba when available.

Set ``M3BIND_DISABLE_NUMBA=1`` to force the pure-numpy path (useful for
debugging and for the benchmark in ``benchmarks/bench_kernels.py``). Both
paths are deterministic; they are not guaranteed to agree bit-for-bit
because summation order differs, only to within a few ulps.
"""
import os

import numpy as np

_FLAG = os.environ.get("M3BIND_DISABLE_NUMBA", "").strip().lower()

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _FLAG not in ("1", "true", "yes", "on")


# --------------------------------------------------------------------------
# numpy reference implementations
# --------------------------------------------------------------------------

def _np_embedding_bag_mean(table, ids, offsets):
    n = offsets.shape[0] - 1
    lengths = np.diff(offsets)
    seg = np.repeat(np.arange(n), lengths)
    out = np.zeros((n, table.shape[1]))
    np.add.at(out, seg, table[ids])
    return out / lengths[:, None]


def _np_embedding_bag_mean_grad(grad, ids, offsets, vocab):
    lengths = np.diff(offsets)
    seg = np.repeat(np.arange(grad.shape[0]), lengths)
    out = np.zeros((vocab, grad.shape[1]))
    np.add.at(out, ids, grad[seg] / lengths[seg][:, None])
    return out


def _np_log_softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _np_log_softmax_rows_grad(grad, out):
    return grad - np.exp(out) * grad.sum(axis=1, keepdims=True)


def _np_adamw_update(param, grad, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    param *= 1.0 - lr * wd
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _np_first_relevant_rank(sims, relevant):
    # rank (0-based) of the best-scoring relevant item; ties go to the lower index
    n, g = sims.shape
    out = np.empty(n, dtype=np.int64)
    cols = np.arange(g)
    for i in range(n):
        rel = np.flatnonzero(relevant[i])
        best = rel[np.argmax(sims[i, rel])]
        s = sims[i, best]
        out[i] = np.count_nonzero(sims[i] > s) + np.count_nonzero((sims[i] == s) & (cols < best))
    return out


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _nb_embedding_bag_mean(table, ids, offsets):
        n = offsets.shape[0] - 1
        d = table.shape[1]
        out = np.zeros((n, d))
        for i in range(n):
            lo = offsets[i]
            hi = offsets[i + 1]
            for t in range(lo, hi):
                row = ids[t]
                for j in range(d):
                    out[i, j] += table[row, j]
            inv = 1.0 / (hi - lo)
            for j in range(d):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def _nb_embedding_bag_mean_grad(grad, ids, offsets, vocab):
        n, d = grad.shape
        out = np.zeros((vocab, d))
        for i in range(n):
            lo = offsets[i]
            hi = offsets[i + 1]
            inv = 1.0 / (hi - lo)
            for t in range(lo, hi):
                row = ids[t]
                for j in range(d):
                    out[row, j] += grad[i, j] * inv
        return out

    @njit(cache=True)
    def _nb_adamw_update(param, grad, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
        p = param.reshape(-1)
        g = grad.reshape(-1)
        mm = m.reshape(-1)
        vv = v.reshape(-1)
        decay = 1.0 - lr * wd
        for i in range(p.shape[0]):
            p[i] *= decay
            mm[i] = beta1 * mm[i] + (1.0 - beta1) * g[i]
            vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i]
            p[i] -= lr * (mm[i] / bc1) / (np.sqrt(vv[i] / bc2) + eps)

    @njit(cache=True)
    def _nb_first_relevant_rank(sims, relevant):
        n, g = sims.shape
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            best = -1
            for j in range(g):
                if relevant[i, j] and (best < 0 or sims[i, j] > sims[i, best]):
                    best = j
            s = sims[i, best]
            r = 0
            for j in range(g):
                if sims[i, j] > s or (sims[i, j] == s and j < best):
                    r += 1
            out[i] = r
        return out


if USE_NUMBA:
    embedding_bag_mean = _nb_embedding_bag_mean
    embedding_bag_mean_grad = _nb_embedding_bag_mean_grad
    adamw_update = _nb_adamw_update
    first_relevant_rank = _nb_first_relevant_rank
else:
    embedding_bag_mean = _np_embedding_bag_mean
    embedding_bag_mean_grad = _np_embedding_bag_mean_grad
    adamw_update = _np_adamw_update
    first_relevant_rank = _np_first_relevant_rank

# numpy's vectorized exp beats a scalar numba loop here, so both backends share it
log_softmax_rows = _np_log_softmax_rows
log_softmax_rows_grad = _np_log_softmax_rows_grad

BACKEND = "numba" if USE_NUMBA else "numpy"
