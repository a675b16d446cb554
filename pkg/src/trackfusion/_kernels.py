"""Compiled per-segment recursions, used when numba is installed.

Both kernels walk the segments in chronological order and do the same
arithmetic as the batched numpy sweeps in :mod:`trackfusion.hmm`, so the two
paths agree to rounding. Set ``TRACKFUSION_NO_JIT=1`` to force the numpy path.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:  # pragma: no cover - exercised only when numba is importable
    if os.environ.get("TRACKFUSION_NO_JIT"):
        raise ImportError("disabled by TRACKFUSION_NO_JIT")
    import numba
except ImportError:  # pragma: no cover
    numba = None

AVAILABLE = numba is not None


def _forward(a, logf, g, top, starts, lengths, states):
    """Normalised alphas, log scales and per-segment log-likelihoods.

    ``g`` is ``exp(logf - top)`` row by row for any finite reference ``top``;
    steps where that under- or overflows are redone in log space.
    """
    T, N = logf.shape
    alphas = np.zeros((T, N))
    log_c = np.zeros(T)
    seg_ll = np.zeros(starts.size)
    w = np.empty(N)
    for s in range(starts.size):
        t0 = starts[s]
        alphas[t0, 0] = 1.0
        log_c[t0] = logf[t0, 0]
        for t in range(t0 + 1, t0 + lengths[s]):
            c = 0.0
            for j in range(N):
                acc = 0.0
                for i in range(N):
                    acc += alphas[t - 1, i] * a[i, j]
                w[j] = acc * g[t, j]
                c += w[j]
            shift = top[t]
            if not (c > 0.0 and c < math.inf):
                # predicted mass too small to survive the shift: redo in log space
                shift = -math.inf
                for j in range(N):
                    acc = 0.0
                    for i in range(N):
                        acc += alphas[t - 1, i] * a[i, j]
                    w[j] = math.log(acc) + logf[t, j] if acc > 0.0 else -math.inf
                    if w[j] > shift:
                        shift = w[j]
                c = 0.0
                for j in range(N):
                    w[j] = math.exp(w[j] - shift)
                    c += w[j]
            for j in range(N):
                alphas[t, j] = w[j] / c
            log_c[t] = shift + math.log(c)
        end = t0 + lengths[s] - 1
        ll = 0.0
        for t in range(t0, end + 1):
            ll += log_c[t]
        if states[s] >= 0:
            mass = alphas[end, states[s]]
            ll += math.log(mass) if mass > 0.0 else -math.inf
        seg_ll[s] = ll
    return alphas, log_c, seg_ll


def _backward(a, g, alphas, starts, lengths, states):
    """Betas plus the smoothed posteriors and summed within-segment pairwise posteriors."""
    T, N = g.shape
    betas = np.zeros((T, N))
    gamma = np.empty((T, N))
    xi = np.zeros((N, N))
    tmp = np.empty(N)
    for s in range(starts.size):
        end = starts[s] + lengths[s] - 1
        if states[s] < 0:
            betas[end, :] = 1.0
        else:
            betas[end, states[s]] = 1.0
        for t in range(end, starts[s] - 1, -1):
            z = 0.0
            for i in range(N):
                z += alphas[t, i] * betas[t, i]
            for i in range(N):
                gamma[t, i] = alphas[t, i] * betas[t, i] / z
            if t == starts[s]:
                break
            # tmp is the right factor of the pairwise term from t-1 to t
            for j in range(N):
                tmp[j] = g[t, j] * betas[t, j]
            for i in range(N):
                acc = 0.0
                for j in range(N):
                    acc += a[i, j] * tmp[j]
                betas[t - 1, i] = acc
            z = 0.0
            for i in range(N):
                z += alphas[t - 1, i] * betas[t - 1, i]
            for i in range(N):
                left = alphas[t - 1, i] / z
                for j in range(N):
                    xi[i, j] += left * a[i, j] * tmp[j]
    return betas, gamma, xi


if AVAILABLE:  # pragma: no branch
    forward = numba.njit(cache=True, nogil=True)(_forward)
    backward = numba.njit(cache=True, nogil=True)(_backward)
else:  # pragma: no cover
    forward = backward = None
