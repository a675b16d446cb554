"""Exhaustive enumeration over state sequences.

Only usable on tiny instances, but it shares nothing with the recursions in
:mod:`trackfusion.hmm` beyond the emission densities, which makes it the
reference those recursions are checked against.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .hmm import AnnotatedHistory, HmmParams

MAX_SEQUENCES = 10**7


class InstanceTooLargeError(ValueError):
    pass


@dataclass
class BruteForceResult:
    log_likelihood: float
    smoothed: np.ndarray  # (T, N)
    pairwise: dict  # t -> (N, N) for within-segment transitions
    filtered: np.ndarray  # (T, N)


def _check_size(n_states: int, length: int):
    if n_states**length > MAX_SEQUENCES:
        raise InstanceTooLargeError(
            f"{n_states}^{length} sequences exceeds the enumeration cap of {MAX_SEQUENCES}"
        )


def _path_weights(params: HmmParams, history: AnnotatedHistory, lo: int, hi: int):
    """All sequences over frames lo..hi-1 starting a segment at lo, with their probabilities."""
    a = params.transitions
    f = np.exp(params.emissions.log_density(history.frames[lo:hi]))
    paths, weights = [], []
    for tail in itertools.product(range(params.n_states), repeat=hi - lo - 1):
        path = (0,) + tail
        w = f[0, 0]
        for k in range(1, len(path)):
            w *= a[path[k - 1], path[k]] * f[k, path[k]]
        paths.append(path)
        weights.append(w)
    return paths, np.array(weights)


def brute_force(params: HmmParams, history: AnnotatedHistory) -> BruteForceResult:
    """Likelihood, marginals, pairwise and filtering posteriors by enumeration."""
    N, T = params.n_states, history.T
    _check_size(N, T)
    a = params.transitions
    f = np.exp(params.emissions.log_density(history.frames))
    starts = {0} | {t + 1 for t, _ in history.annotations}
    fixed = dict(history.annotations)
    total = 0.0
    smoothed = np.zeros((T, N))
    pair_times = [t for t in range(T - 1) if t + 1 not in starts]
    pairwise = {t: np.zeros((N, N)) for t in pair_times}
    for seq in itertools.product(range(N), repeat=T):
        if any(seq[t] != 0 for t in starts if t < T):
            continue
        if any(seq[t] != s for t, s in fixed.items()):
            continue
        w = 1.0
        for t in range(T):
            if t not in starts:
                w *= a[seq[t - 1], seq[t]]
            w *= f[t, seq[t]]
        total += w
        smoothed[np.arange(T), seq] += w
        for t in pair_times:
            pairwise[t][seq[t], seq[t + 1]] += w
    if total <= 0:
        return BruteForceResult(-math.inf, smoothed, pairwise, _filtered(params, history))
    return BruteForceResult(
        math.log(total),
        smoothed / total,
        {t: m / total for t, m in pairwise.items()},
        _filtered(params, history),
    )


def _filtered(params: HmmParams, history: AnnotatedHistory) -> np.ndarray:
    N, T = params.n_states, history.T
    out = np.zeros((T, N))
    for start, stop, _ in history.segments():
        for t in range(start, stop):
            paths, w = _path_weights(params, history, start, t + 1)
            for path, wi in zip(paths, w):
                out[t, path[-1]] += wi
            out[t] /= out[t].sum()
    return out


def brute_force_posterior(params: HmmParams, history: AnnotatedHistory) -> np.ndarray:
    return brute_force(params, history).smoothed


def brute_force_likelihood(params: HmmParams, history: AnnotatedHistory) -> float:
    return brute_force(params, history).log_likelihood
