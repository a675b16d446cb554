"""Semi-supervised HMM over tracker-correctness states.

A history of observation frames is cut into independent segments by the
annotated (detector-observed) states. Every segment starts in the
all-correct state with probability one; all but the last end in a known
state. Inference runs scaled forward/backward recursions per segment,
batched over segments so that long histories of short segments stay cheap.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .emissions import (
    ObservableLayout,
    ObservableModel,
    clamp,
    default_observable_model,
    estimate_beta_per_state,
)
from .states import StateSpace, build_state_space
from . import _kernels

log = logging.getLogger(__name__)

ROW_TOL = 1e-12


class InfeasibleAnnotationError(FloatingPointError):
    """An annotated state has zero probability under the model."""

    def __init__(self, message, segments=()):
        super().__init__(message)
        self.segments = tuple(segments)


def default_transition_matrix(n: int) -> np.ndarray:
    """Self-transition heavy initial matrix; the all-failed state is near absorbing.

    Cells are written in increasing precedence: 0.05 everywhere, 1e-10 in the
    last row, 0.001 in the last column, 0 in the first column, 0.98 on the
    diagonal. Rows are then normalised.
    """
    size = build_state_space(n).size
    a = np.full((size, size), 0.05)
    a[-1, :] = 1e-10
    a[:, -1] = 0.001
    a[:, 0] = 0.0
    np.fill_diagonal(a, 0.98)
    return a / a.sum(axis=1, keepdims=True)


def check_transitions(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("transition matrix must be square")
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ValueError("transition probabilities must be finite and non-negative")
    if np.any(np.abs(a.sum(axis=1) - 1.0) > ROW_TOL):
        raise ValueError("transition rows must sum to 1")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class HmmParams:
    transitions: np.ndarray
    emissions: ObservableModel

    def __post_init__(self):
        object.__setattr__(self, "transitions", check_transitions(self.transitions))
        size = self.transitions.shape[0]
        if size < 2 or size & (size - 1):
            raise ValueError("state count must be a power of two >= 2")
        if self.emissions.n_states != size:
            raise ValueError(
                f"emission model has {self.emissions.n_states} states, transitions have {size}"
            )

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n(self) -> int:
        return self.n_states.bit_length() - 1

    @property
    def m(self) -> int:
        return self.emissions.m

    @property
    def space(self) -> StateSpace:
        return build_state_space(self.n)

    @classmethod
    def default(cls, layout: ObservableLayout) -> "HmmParams":
        space = build_state_space(layout.n)
        return cls(default_transition_matrix(layout.n), default_observable_model(space, layout))

    def __eq__(self, other):
        if not isinstance(other, HmmParams):
            return NotImplemented
        return np.array_equal(self.transitions, other.transitions) and self.emissions == other.emissions


def emission_log_density(params: HmmParams, state: int, frame) -> float:
    """log f_state(frame): the sum of per-dimension beta log-densities."""
    x = np.asarray(frame, dtype=float)
    if x.shape != (params.m,):
        raise ValueError(f"frame must hold {params.m} observables, got shape {x.shape}")
    if not 0 <= state < params.n_states:
        raise IndexError(f"state {state} out of range")
    return float(params.emissions.log_density(x[None, :])[0, state])


@dataclass(frozen=True, eq=False)
class AnnotatedHistory:
    """Observation frames plus detector-annotated states.

    ``annotations`` holds ``(t, state)`` pairs with 0-based frame index ``t``;
    the annotated frame closes a segment, and the following frame starts a new
    one in the all-correct state.
    """

    frames: np.ndarray
    annotations: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        x = clamp(np.atleast_2d(np.asarray(self.frames, dtype=float)))
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("history needs at least one frame")
        x.setflags(write=False)
        object.__setattr__(self, "frames", x)
        ann = tuple((int(t), int(s)) for t, s in self.annotations)
        times = [t for t, _ in ann]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("annotation times must be strictly increasing")
        if times and (times[0] < 0 or times[-1] >= x.shape[0]):
            raise ValueError("annotation time outside the history")
        if any(s < 0 for _, s in ann):
            raise ValueError("annotated state index must be non-negative")
        object.__setattr__(self, "annotations", ann)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    def frame_logs(self) -> tuple[np.ndarray, np.ndarray]:
        """log(x) and log(1 - x) of the frames, computed once per history."""
        cached = self.__dict__.get("_logs")
        if cached is None:
            cached = (np.log(self.frames), np.log1p(-self.frames))
            object.__setattr__(self, "_logs", cached)
        return cached

    @property
    def m(self) -> int:
        return self.frames.shape[1]

    def segments(self) -> list[tuple[int, int, Optional[int]]]:
        """Non-empty ``(start, stop, annotated_state)`` spans, ``stop`` exclusive."""
        out = []
        start = 0
        for t, s in self.annotations:
            out.append((start, t + 1, s))
            start = t + 1
        if start < self.T:
            out.append((start, self.T, None))
        return out

    def boundary_times(self) -> np.ndarray:
        return _Layout.of(self).chrono_starts[1:] - 1 if self.annotations else np.zeros(0, dtype=int)

    @classmethod
    def _trusted(cls, frames: np.ndarray, annotations: tuple) -> "AnnotatedHistory":
        # skips validation: frames already clamped, annotations already checked
        out = object.__new__(cls)
        object.__setattr__(out, "frames", frames)
        object.__setattr__(out, "annotations", annotations)
        return out

    def select_segments(self, keep: Sequence[int]) -> "AnnotatedHistory":
        """A new history made of the chosen segments, re-indexed back to back."""
        segs = self.segments()
        frames = []
        ann = []
        offset = 0
        for k in keep:
            start, stop, s = segs[k]
            frames.append(self.frames[start:stop])
            offset += stop - start
            if s is not None:
                ann.append((offset - 1, s))
        if not frames:
            raise ValueError("no segments selected")
        return AnnotatedHistory(np.vstack(frames), tuple(ann))

    def last_segment(self) -> "AnnotatedHistory":
        return self.select_segments([len(self.segments()) - 1])


@dataclass
class _Layout:
    """Segment bookkeeping shared by the batched recursions."""

    starts: np.ndarray  # segment start, sorted by length descending
    lengths: np.ndarray
    states: np.ndarray  # annotated state per segment, -1 if open
    order: np.ndarray  # original segment number for each sorted slot
    active: np.ndarray  # active[l] = number of segments longer than l
    chrono_starts: np.ndarray
    # step-major ordering: rows offsets[l]:offsets[l+1] of a permuted array
    # hold step l of every active segment, so each recursion step is a slice
    perm: np.ndarray = None
    offsets: np.ndarray = None
    chrono_lengths: np.ndarray = None
    chrono_states: np.ndarray = None

    @classmethod
    def of(cls, history: AnnotatedHistory) -> "_Layout":
        cached = history.__dict__.get("_layout")
        if cached is not None:
            return cached
        T = history.T
        ann = np.array(history.annotations, dtype=int).reshape(-1, 2)
        stops = ann[:, 0] + 1
        states = ann[:, 1]
        if stops.size == 0 or stops[-1] < T:
            stops = np.append(stops, T)
            states = np.append(states, -1)
        starts = np.concatenate([[0], stops[:-1]])
        lengths = stops - starts
        order = np.argsort(-lengths, kind="stable")
        lengths_sorted = lengths[order]
        counts = np.bincount(lengths_sorted, minlength=lengths_sorted[0] + 1)
        # active[l] = #segments with length > l
        active = lengths_sorted.size - np.cumsum(counts)[: lengths_sorted[0]]
        sorted_starts = starts[order]
        offsets = np.concatenate([[0], np.cumsum(active)])
        slot = np.arange(T) - np.repeat(offsets[:-1], active)
        perm = sorted_starts[slot] + np.repeat(np.arange(active.size), active)
        out = cls(
            sorted_starts, lengths_sorted, states[order], order, active, starts, perm, offsets,
            lengths, states,
        )
        object.__setattr__(history, "_layout", out)
        return out


@dataclass
class ForwardBackwardCache:
    """Scaled forward/backward quantities for one history under one parameter set.

    ``alphas[t]`` is the forward variable normalised to sum to one (the
    filtering distribution); the unscaled value is ``alphas[t] * exp(log_norm[t])``
    where ``log_norm`` accumulates ``log_scales`` from the segment start.
    ``betas`` are divided by the same per-step scales.
    """

    params: HmmParams
    history: AnnotatedHistory
    log_emissions: np.ndarray
    alphas: np.ndarray
    log_scales: np.ndarray
    segment_log_likelihoods: np.ndarray
    betas: Optional[np.ndarray] = None
    _layout: _Layout = field(default=None, repr=False)
    # filled by the compiled backward sweep alongside the betas
    _gamma: Optional[np.ndarray] = field(default=None, repr=False)
    _xi_sum: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def log_likelihood(self) -> float:
        return float(self.segment_log_likelihoods.sum())

    def log_norm(self) -> np.ndarray:
        out = np.empty_like(self.log_scales)
        for start, stop, _ in self.history.segments():
            out[start:stop] = np.cumsum(self.log_scales[start:stop])
        return out

    def unscaled_log_alphas(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.alphas) + self.log_norm()[:, None]


def _scaled_emissions(log_emissions: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    # f_j(X_t) / c_t, the factor each backward step and pairwise term needs
    return np.exp(log_emissions - log_scales[:, None])


def _forward_sweep(a, logf_p, offsets, log_space):
    """Scaled forward recursion over step-major rows.

    The fast path rescales each emission row by its maximum once up front;
    if every predicted state then underflows, the caller reruns the sweep
    with ``log_space`` set, which shifts by the per-step maximum instead.
    """
    T, N = logf_p.shape
    alphas = np.empty((T, N))
    k0 = offsets[1]
    alphas[:k0] = 0.0
    alphas[:k0, 0] = 1.0
    if log_space:
        top = np.empty(T)
    else:
        top = logf_p.max(axis=1)
        g = np.exp(logf_p - top[:, None])
    # segment starts are pinned to state 0: their scale is f_0 itself
    top[:k0] = logf_p[:k0, 0]
    c_all = np.ones(T)
    ones = np.ones(N)
    with np.errstate(divide="ignore", invalid="ignore"):
        for step in range(1, offsets.size - 1):
            lo, hi = offsets[step], offsets[step + 1]
            prev = alphas[offsets[step - 1]: offsets[step - 1] + hi - lo]
            if log_space:
                w = np.log(prev @ a) + logf_p[lo:hi]
                top[lo:hi] = w.max(axis=1)
                u = np.exp(w - top[lo:hi, None])
            else:
                u = (prev @ a) * g[lo:hi]
            c = u @ ones  # row sums; a matmul is cheaper than a reduction here
            alphas[lo:hi] = u / c[:, None]
            c_all[lo:hi] = c
        return alphas, top + np.log(c_all)


def forward_pass(params: HmmParams, history: AnnotatedHistory) -> ForwardBackwardCache:
    return _forward_pass(params, history, None)


def _forward_pass(params, history, logf):
    if history.m != params.m:
        raise ValueError(f"history has {history.m} observables, model expects {params.m}")
    lay = _Layout.of(history)
    if lay.states.max() >= params.n_states:
        raise ValueError(f"annotated state {lay.states.max()} out of range")
    if logf is None:
        logf = params.emissions.log_density_from_logs(*history.frame_logs())
    a = params.transitions
    T, N = logf.shape
    if _kernels.AVAILABLE:
        # any finite per-row reference works; the kernel recovers from overflow
        top = np.ascontiguousarray(logf[:, 0])
        with np.errstate(over="ignore"):
            g = np.exp(logf - top[:, None])
        alphas, log_c, chrono = _kernels.forward(
            a, logf, g, top, lay.chrono_starts, lay.chrono_lengths, lay.chrono_states
        )
        return ForwardBackwardCache(params, history, logf, alphas, log_c, chrono, _layout=lay)
    logf_p = logf[lay.perm]
    alphas_p, log_c_p = _forward_sweep(a, logf_p, lay.offsets, False)
    if not np.all(np.isfinite(log_c_p)):
        alphas_p, log_c_p = _forward_sweep(a, logf_p, lay.offsets, True)
    alphas = np.empty((T, N))
    alphas[lay.perm] = alphas_p
    log_c = np.empty(T)
    log_c[lay.perm] = log_c_p

    chrono = np.add.reduceat(log_c, lay.chrono_starts)
    closed = np.flatnonzero(lay.states >= 0)
    if closed.size:
        ends = lay.starts[closed] + lay.lengths[closed] - 1
        mass = alphas[ends, lay.states[closed]]
        with np.errstate(divide="ignore"):
            chrono[lay.order[closed]] += np.log(mass)
    return ForwardBackwardCache(params, history, logf, alphas, log_c, chrono, _layout=lay)


def backward_pass(cache: ForwardBackwardCache) -> ForwardBackwardCache:
    if not np.all(np.isfinite(cache.segment_log_likelihoods)):
        bad = np.flatnonzero(~np.isfinite(cache.segment_log_likelihoods))
        raise InfeasibleAnnotationError(
            f"annotated state unreachable in segment(s) {bad.tolist()}", bad.tolist()
        )
    lay = cache._layout
    if _kernels.AVAILABLE:
        g = _scaled_emissions(cache.log_emissions, cache.log_scales)
        cache.betas, cache._gamma, cache._xi_sum = _kernels.backward(
            cache.params.transitions, g, cache.alphas, lay.chrono_starts, lay.chrono_lengths, lay.chrono_states
        )
        return cache
    a_t = cache.params.transitions.T
    g = _scaled_emissions(cache.log_emissions, cache.log_scales)[lay.perm]
    T, N = cache.alphas.shape
    ends = lay.starts + lay.lengths - 1
    betas = np.zeros((T, N))
    open_ = lay.states < 0
    betas[ends[open_]] = 1.0
    closed = np.flatnonzero(~open_)
    betas[ends[closed], lay.states[closed]] = 1.0
    b = betas[lay.perm]
    off = lay.offsets
    for step in range(off.size - 3, -1, -1):
        k = off[step + 2] - off[step + 1]
        nxt = slice(off[step + 1], off[step + 2])
        b[off[step]: off[step] + k] = (g[nxt] * b[nxt]) @ a_t
    betas[lay.perm] = b
    cache.betas = betas
    return cache


def forward_backward(params: HmmParams, history: AnnotatedHistory) -> ForwardBackwardCache:
    return backward_pass(forward_pass(params, history))


def log_likelihood(params: HmmParams, history: AnnotatedHistory) -> float:
    """log P(frames, annotations | params); -inf when an annotation is impossible."""
    return forward_pass(params, history).log_likelihood


def total_likelihood(cache: ForwardBackwardCache) -> float:
    return cache.log_likelihood


def filter_posterior(cache: ForwardBackwardCache, t: int) -> np.ndarray:
    """P(S_t | frames of the current segment up to t, earlier annotations)."""
    return cache.alphas[t].copy()


def _require_betas(cache):
    if cache.betas is None:
        raise ValueError("backward pass has not been run on this cache")


def smoothed_posteriors(cache: ForwardBackwardCache) -> np.ndarray:
    _require_betas(cache)
    if cache._gamma is not None:
        return cache._gamma.copy()
    joint = cache.alphas * cache.betas
    return joint / joint.sum(axis=1, keepdims=True)


def _transition_times(cache) -> np.ndarray:
    """Times t whose successor t+1 lies in the same segment."""
    T = cache.history.T
    ok = np.ones(T, dtype=bool)
    ok[-1] = False
    ok[cache.history.boundary_times()] = False
    return np.flatnonzero(ok)


def pairwise_posterior(cache: ForwardBackwardCache, t: int) -> np.ndarray:
    """P(S_t = i, S_{t+1} = j | frames, annotations) as an N x N matrix."""
    _require_betas(cache)
    if not 0 <= t < cache.history.T - 1:
        raise IndexError(f"no transition out of frame {t}")
    if t in set(cache.history.boundary_times().tolist()):
        raise ValueError(f"frame {t} closes a segment; no transition crosses it")
    a = cache.params.transitions
    g = np.exp(cache.log_emissions[t + 1] - cache.log_scales[t + 1])
    xi = cache.alphas[t][:, None] * a * (g * cache.betas[t + 1])[None, :]
    return xi / xi.sum()


def pairwise_posteriors(cache: ForwardBackwardCache) -> tuple[np.ndarray, np.ndarray]:
    """All defined pairwise posteriors: ``(times, xi)`` with ``xi`` of shape (len(times), N, N)."""
    times = _transition_times(cache)
    if times.size == 0:
        n = cache.params.n_states
        return times, np.zeros((0, n, n))
    return times, np.stack([pairwise_posterior(cache, int(t)) for t in times])


def expected_transition_counts(cache: ForwardBackwardCache) -> np.ndarray:
    """Sum of pairwise posteriors over all within-segment transitions, N x N."""
    _require_betas(cache)
    if cache._xi_sum is not None:
        return cache._xi_sum.copy()
    a = cache.params.transitions
    # weight 0 drops transitions out of a segment's last frame
    T = cache.history.T
    keep = np.ones(T - 1)
    ends = cache.history.boundary_times()
    keep[ends[ends < T - 1]] = 0.0
    if not keep.any():
        return np.zeros_like(a)
    alphas, betas = cache.alphas, cache.betas
    z = np.einsum("ij,ij->i", alphas[:-1], betas[:-1])
    left = alphas[:-1] * (keep / np.where(keep > 0, z, 1.0))[:, None]
    right = _scaled_emissions(cache.log_emissions[1:], cache.log_scales[1:]) * betas[1:]
    return a * (left.T @ right)


def reestimate_transitions(cache: ForwardBackwardCache, pseudocounts=None) -> np.ndarray:
    """Expected transitions i->j over expected departures from i.

    Rows of states never occupied before a within-segment transition keep
    their current values. ``pseudocounts`` (N x N, non-negative) are added to
    the expected counts first, i.e. a Dirichlet prior on each row.
    """
    counts = expected_transition_counts(cache)
    if pseudocounts is not None:
        counts = counts + np.asarray(pseudocounts, dtype=float)
    prev = cache.params.transitions
    denom = counts.sum(axis=1)
    out = np.array(prev, dtype=float)
    used = denom > 0
    out[used] = counts[used] / denom[used, None]
    return out / out.sum(axis=1, keepdims=True)


EmissionEstimator = Callable[[np.ndarray, np.ndarray, ObservableModel], ObservableModel]


@dataclass
class TrainResult:
    params: HmmParams
    log_likelihoods: list[float]
    emission_rejections: int = 0


def train(
    params: HmmParams,
    history: AnnotatedHistory,
    max_iters: int = 3,
    tol: float = 1e-8,
    estimator: EmissionEstimator = estimate_beta_per_state,
    transition_pseudocounts=None,
) -> TrainResult:
    """Generalised EM with a likelihood guard on the moment-based emission update.

    Each iteration re-estimates the transitions and the beta shapes from the
    current posteriors. The new shapes are kept only if the joint likelihood
    does not drop; otherwise only the new transitions are taken. If even that
    loses likelihood (possible only through rounding) the parameters stay as
    they are and training stops. ``log_likelihoods`` starts with the value
    under the input parameters and gains one entry per completed iteration,
    so it is non-decreasing by construction.
    """
    if max_iters < 0:
        raise ValueError("max_iters must be >= 0")
    if not history.annotations:
        raise ValueError("training needs at least one annotated state")
    cache = forward_backward(params, history)
    current = cache.log_likelihood
    lls = [current]
    rejected = 0
    for it in range(max_iters):
        a_hat = reestimate_transitions(cache, transition_pseudocounts)
        f_hat = estimator(history.frames, smoothed_posteriors(cache), params.emissions)
        candidate = HmmParams(a_hat, f_hat)
        cand_cache = forward_pass(candidate, history)
        if cand_cache.log_likelihood < current:
            rejected += 1
            candidate = HmmParams(a_hat, params.emissions)
            # same emissions as the current cache, so its densities carry over
            cand_cache = _forward_pass(candidate, history, cache.log_emissions)
            if cand_cache.log_likelihood < current:
                log.debug("transition update lost %.3g nats; stopping", current - cand_cache.log_likelihood)
                break
        previous = current
        params, current = candidate, cand_cache.log_likelihood
        lls.append(current)
        if abs(current - previous) <= tol * abs(previous) or it == max_iters - 1:
            break
        cache = backward_pass(cand_cache)
    return TrainResult(params, lls, rejected)
