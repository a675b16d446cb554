"""Beta-distributed observables and their moment-based estimators."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import betaln

from .states import StateSpace

EPS = 1e-6
MIN_VARIANCE = 1e-12
MASS_FLOOR = 1e-6  # times T


def clamp(x):
    """Pull observables off the (0, 1) endpoints; reject anything outside [0, 1]."""
    arr = np.asarray(x, dtype=float)
    # NaN fails both comparisons, so this also rejects non-finite input
    if arr.size and not (arr.min() >= 0.0 and arr.max() <= 1.0):
        raise ValueError("observables must be finite and lie in [0, 1]")
    return np.clip(arr, EPS, 1.0 - EPS)


@dataclass(frozen=True)
class BetaShape:
    p: float
    q: float

    def __post_init__(self):
        if not (self.p > 0 and self.q > 0) or not (math.isfinite(self.p) and math.isfinite(self.q)):
            raise ValueError(f"beta shape parameters must be positive and finite, got ({self.p}, {self.q})")

    @property
    def mean(self) -> float:
        return self.p / (self.p + self.q)

    @property
    def variance(self) -> float:
        s = self.p + self.q
        return self.p * self.q / (s * s * (s + 1.0))


def beta_logpdf(x, shape: BetaShape) -> float:
    x = float(clamp(x))
    return (shape.p - 1.0) * math.log(x) + (shape.q - 1.0) * math.log1p(-x) - float(betaln(shape.p, shape.q))


def beta_pdf(x, shape: BetaShape) -> float:
    return math.exp(beta_logpdf(x, shape))


def shape_from_moments(mean: float, variance: float) -> BetaShape:
    """Invert the beta mean/variance relations. Raises if no valid shape exists."""
    if not 0.0 < mean < 1.0:
        raise ValueError(f"mean must lie in (0, 1), got {mean}")
    if not 0.0 < variance < mean * (1.0 - mean):
        raise ValueError(f"variance must lie in (0, mean*(1-mean)), got {variance}")
    common = mean * (1.0 - mean) / variance - 1.0
    return BetaShape(mean * common, (1.0 - mean) * common)


@dataclass(frozen=True)
class ObservableLayout:
    """Which tracker owns each observable dimension.

    Tracker dimensions come first in tracker order, followed by ``shared``
    dimensions that describe the object as a whole.
    """

    tracker_dims: tuple[int, ...]
    shared: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tracker_dims", tuple(int(d) for d in self.tracker_dims))
        if not self.tracker_dims or any(d < 0 for d in self.tracker_dims) or self.shared < 0:
            raise ValueError("layout needs at least one tracker and non-negative arities")
        if self.m < 1:
            raise ValueError("layout must declare at least one observable")

    @classmethod
    def uniform(cls, n: int, per_tracker: int = 1, shared: int = 0) -> "ObservableLayout":
        return cls((per_tracker,) * n, shared)

    @property
    def n(self) -> int:
        return len(self.tracker_dims)

    @property
    def m(self) -> int:
        return sum(self.tracker_dims) + self.shared

    def owners(self) -> np.ndarray:
        """Owning tracker per dimension, -1 for shared dimensions."""
        owners = [c for c, d in enumerate(self.tracker_dims) for _ in range(d)]
        return np.array(owners + [-1] * self.shared, dtype=int)

    def to_dict(self) -> dict:
        return {"tracker_dims": list(self.tracker_dims), "shared": self.shared}

    @classmethod
    def from_dict(cls, d: dict) -> "ObservableLayout":
        return cls(tuple(d["tracker_dims"]), int(d.get("shared", 0)))


class ObservableModel:
    """Beta shapes for every (state, dimension) cell, stored as two N x m arrays."""

    def __init__(self, p, q):
        p = np.array(p, dtype=float)
        q = np.array(q, dtype=float)
        if p.ndim != 2 or p.shape != q.shape:
            raise ValueError("p and q must be matching N x m arrays")
        if not (np.all(p > 0) and np.all(q > 0) and np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("all beta shapes must be positive and finite")
        p.setflags(write=False)
        q.setflags(write=False)
        self.p = p
        self.q = q
        # density pieces reused on every evaluation
        self._norm = betaln(p, q).sum(axis=1)
        self._pm1 = np.ascontiguousarray((p - 1.0).T)
        self._qm1 = np.ascontiguousarray((q - 1.0).T)

    @property
    def n_states(self) -> int:
        return self.p.shape[0]

    @property
    def m(self) -> int:
        return self.p.shape[1]

    def shape(self, state: int, dim: int) -> BetaShape:
        return BetaShape(float(self.p[state, dim]), float(self.q[state, dim]))

    def log_density(self, frames) -> np.ndarray:
        """Log emission density of every frame under every state, shape (T, N)."""
        x = np.atleast_2d(np.asarray(frames, dtype=float))
        if x.shape[1] != self.m:
            raise ValueError(f"frames have {x.shape[1]} observables, model expects {self.m}")
        x = clamp(x)
        return self.log_density_from_logs(np.log(x), np.log1p(-x))

    def log_density_from_logs(self, log_x: np.ndarray, log_1mx: np.ndarray) -> np.ndarray:
        """Same as :meth:`log_density` given precomputed log(x) and log(1 - x)."""
        return log_x @ self._pm1 + log_1mx @ self._qm1 - self._norm

    def __eq__(self, other):
        if not isinstance(other, ObservableModel):
            return NotImplemented
        return np.array_equal(self.p, other.p) and np.array_equal(self.q, other.q)

    def __repr__(self):
        return f"ObservableModel(N={self.n_states}, m={self.m})"


def default_observable_model(
    space: StateSpace,
    layout: ObservableLayout,
    correct: tuple[float, float] = (2.0, 1.0),
    failed: tuple[float, float] = (1.0, 2.0),
) -> ObservableModel:
    """Shape ``correct`` where the owning tracker is correct, ``failed`` otherwise.

    Shared dimensions follow the state's strict-majority bit.
    """
    if layout.n != space.n:
        raise ValueError(f"layout describes {layout.n} trackers, state space has {space.n}")
    owners = layout.owners()
    on = np.empty((space.size, layout.m), dtype=bool)
    majority = space.majority()
    for j, c in enumerate(owners):
        on[:, j] = majority if c < 0 else space.bits[:, c].astype(bool)
    p = np.where(on, correct[0], failed[0])
    q = np.where(on, correct[1], failed[1])
    return ObservableModel(p, q)


def _centred(frames: np.ndarray):
    # centring on the column mean keeps E[x^2] - mu^2 from cancelling badly
    centre = frames.mean(axis=0)
    xc = frames - centre
    return centre, xc, xc * xc


def _cell_sums(frames: np.ndarray, weights: np.ndarray, centred=None):
    """Posterior mass per state and centred weighted sums per (state, dim)."""
    centre, xc, xc2 = centred if centred is not None else _centred(frames)
    mass = weights.sum(axis=0)
    return mass, weights.T @ xc, weights.T @ xc2, centre


def _invert_guarded(mass, mu, var, floor, prev_p, prev_q):
    mu_ok = (mu > 0.0) & (mu < 1.0)
    ok = (mass >= floor) & (var >= MIN_VARIANCE) & (var < mu * (1.0 - mu)) & mu_ok
    with np.errstate(divide="ignore", invalid="ignore"):
        common = mu * (1.0 - mu) / var - 1.0
        p = mu * common
        q = (1.0 - mu) * common
    ok &= np.isfinite(p) & np.isfinite(q) & (p > 0) & (q > 0)
    return ok, np.where(ok, p, prev_p), np.where(ok, q, prev_q)


def _mass_floor(T: int, min_mass: float) -> float:
    return max(MASS_FLOOR * T, min_mass)


def _check_inputs(frames, posteriors, previous):
    x = clamp(np.atleast_2d(frames))
    w = np.asarray(posteriors, dtype=float)
    if w.shape != (x.shape[0], previous.n_states) or x.shape[1] != previous.m:
        raise ValueError("posteriors must be T x N matching the frames and model")
    return x, w


def estimate_beta_per_state(
    frames, posteriors, previous: ObservableModel, min_mass: float = 0.0
) -> ObservableModel:
    """Method-of-moments shapes from posterior-weighted observables.

    Cells whose moments admit no valid beta shape, whose variance is
    degenerate, or whose state carries too little posterior mass (below
    ``1e-6 * T`` or ``min_mass``, whichever is larger) keep the shapes from
    ``previous``.
    """
    x, w = _check_inputs(frames, posteriors, previous)
    return _per_state_from_sums(*_cell_sums(x, w), x.shape[0], min_mass, previous)


def _per_state_from_sums(mass, s1, s2, centre, T, min_mass, previous):
    safe = np.where(mass > 0, mass, 1.0)[:, None]
    m1 = s1 / safe
    var = np.maximum(s2 / safe - m1 * m1, 0.0)
    floor = _mass_floor(T, min_mass)
    _, p, q = _invert_guarded(
        np.broadcast_to(mass[:, None], m1.shape), m1 + centre, var, floor, previous.p, previous.q
    )
    return ObservableModel(p, q)


class TiedBetaEstimator:
    """Pooled moment estimator for fixed tie groups of (state, dim) cells.

    Each group pools the posterior-weighted sums of all its cells before
    inverting the moments, so every cell in the group gets one shared shape.
    Cells outside all groups are estimated on their own.
    """

    def __init__(self, tie_groups: Iterable[Sequence[tuple[int, int]]], n_states: int, m: int, min_mass: float = 0.0):
        seen: set[tuple[int, int]] = set()
        rows, cols = [], []
        n_groups = 0
        for g, group in enumerate(tie_groups):
            cells = [(int(i), int(j)) for i, j in group]
            if not cells:
                raise ValueError("tie groups must be non-empty")
            if seen.intersection(cells) or len(set(cells)) != len(cells):
                raise ValueError("tie groups must not overlap")
            for i, j in cells:
                if not (0 <= i < n_states and 0 <= j < m):
                    raise ValueError(f"tie group cell ({i}, {j}) out of range")
            seen.update(cells)
            rows.extend([g] * len(cells))
            cols.extend(i * m + j for i, j in cells)
            n_groups += 1
        self.n_groups = n_groups
        self.shape = (n_states, m)
        self.member = np.zeros((self.n_groups, n_states * m))
        self.member[rows, cols] = 1.0
        self.cells = np.array(cols, dtype=int)
        self.cell_group = np.array(rows, dtype=int)
        self.min_mass = min_mass
        # group of every cell; ungrouped cells point at group 0 but are masked by `member`
        self._full_group = np.zeros(n_states * m, dtype=int)
        self._full_group[self.cells] = self.cell_group
        # training calls this repeatedly on one frames array; keep its centred copy
        self._frames_ref = None
        self._centred = None

    def __call__(self, frames, posteriors, previous: ObservableModel) -> ObservableModel:
        if previous.p.shape != self.shape:
            raise ValueError("model shape does not match the tie groups")
        if frames is self._frames_ref:
            w = np.asarray(posteriors, dtype=float)
            x = self._centred[1]
            if w.shape != (x.shape[0], previous.n_states) or x.shape[1] != previous.m:
                raise ValueError("posteriors must be T x N matching the frames and model")
        else:
            x, w = _check_inputs(frames, posteriors, previous)
            centred = _centred(x)
            # only read-only arrays are safe to recognise by identity later
            if isinstance(frames, np.ndarray) and not frames.flags.writeable:
                self._frames_ref, self._centred = frames, centred
            else:
                self._frames_ref, self._centred = None, None
        mass, s1, s2, centre = _cell_sums(x, w, self._centred if self._frames_ref is frames else centred)
        N, m = self.shape
        if self.cells.size == N * m:
            per_state = previous  # every cell is tied; nothing is estimated alone
        else:
            per_state = _per_state_from_sums(mass, s1, s2, centre, x.shape[0], self.min_mass, previous)
        if not self.n_groups:
            return per_state
        cell_mass = np.repeat(mass, m)
        cell_centre = np.tile(centre, N)
        s1 = s1.ravel()
        s2 = s2.ravel()
        g_mass = self.member @ cell_mass
        safe = np.where(g_mass > 0, g_mass, 1.0)
        # pooled mean, then the pooled second moment about it, cell by cell
        g_mu = (self.member @ (s1 + cell_centre * cell_mass)) / safe
        shift = cell_centre - g_mu[self._full_group]
        g_var = (self.member @ (s2 + 2.0 * shift * s1 + shift * shift * cell_mass)) / safe
        g_var = np.maximum(g_var, 0.0)
        floor = _mass_floor(x.shape[0], self.min_mass)
        ok, gp, gq = _invert_guarded(g_mass, g_mu, g_var, floor, 1.0, 1.0)
        p = per_state.p.ravel().copy()
        q = per_state.q.ravel().copy()
        grp = self.cell_group
        take = ok[grp]
        # accepted groups overwrite their cells; rejected ones fall back to previous
        p[self.cells] = np.where(take, gp[grp], previous.p.ravel()[self.cells])
        q[self.cells] = np.where(take, gq[grp], previous.q.ravel()[self.cells])
        return ObservableModel(p.reshape(N, m), q.reshape(N, m))


def estimate_beta_pooled(
    frames,
    posteriors,
    previous: ObservableModel,
    tie_groups: Iterable[Sequence[tuple[int, int]]],
    min_mass: float = 0.0,
) -> ObservableModel:
    """Like :func:`estimate_beta_per_state`, but cells in a tie group share one shape."""
    est = TiedBetaEstimator(tie_groups, previous.n_states, previous.m, min_mass)
    return est(frames, posteriors, previous)


def tracker_tie_groups(space: StateSpace, layout: ObservableLayout) -> list[list[tuple[int, int]]]:
    """Tie groups making each dimension depend only on its owner's correctness bit.

    For every dimension there is one group of states where the owner is
    correct and one where it has failed. Shared dimensions split on the
    strict-majority bit instead.
    """
    groups = []
    majority = space.majority()
    for j, c in enumerate(layout.owners()):
        on = majority if c < 0 else space.bits[:, c].astype(bool)
        for flag in (True, False):
            states = np.flatnonzero(on == flag)
            if states.size:
                groups.append([(int(i), j) for i in states])
    return groups
