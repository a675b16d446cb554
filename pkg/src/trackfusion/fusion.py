"""Per-frame fusion of tracker channels with a detector.

Each frame the engine folds the channels' observables into the online
filtering distribution over correctness states. A detection that survives
the majority gate annotates the current state, triggers learning, and asks
the caller to reinitialise every channel on the detected box. Otherwise the
output is the mean box of the channels judged correct in the most probable
state.
"""
from __future__ import annotations

import copy
import logging
from functools import partial
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .emissions import ObservableLayout, TiedBetaEstimator, clamp, estimate_beta_per_state, tracker_tie_groups
from .hmm import (
    AnnotatedHistory,
    HmmParams,
    InfeasibleAnnotationError,
    default_transition_matrix,
    forward_pass,
    train,
)
from .states import StateSpace, build_state_space, most_probable_state

log = logging.getLogger(__name__)

TEMPLATE_UPDATE_FACTOR = 0.5


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box size must be non-negative, got {self.w}x{self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_seq(cls, seq) -> "BBox":
        x, y, w, h = (float(v) for v in seq)
        return cls(x, y, w, h)


def iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def average_bbox(boxes: Sequence[BBox]) -> BBox:
    if not boxes:
        raise ValueError("cannot average an empty set of boxes")
    arr = np.array([b.as_list() for b in boxes])
    return BBox.from_seq(arr.mean(axis=0))


@dataclass(frozen=True)
class TrackerReport:
    bbox: BBox
    observables: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "observables", tuple(float(v) for v in self.observables))


@dataclass(frozen=True)
class DetectionEvent:
    bbox: BBox
    present: bool = True


@dataclass(frozen=True)
class FusionConfig:
    layout: ObservableLayout
    correct_iou: float = 0.5
    gate_iou: float = 0.5
    window: str = "full"
    max_iters: int = 3
    tie_emissions: bool = True
    transition_prior: float = 10.0
    min_state_mass: float = 5.0

    def __post_init__(self):
        for name in ("correct_iou", "gate_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.window not in ("full", "segment"):
            raise ValueError(f"window must be 'full' or 'segment', got {self.window!r}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.transition_prior < 0:
            raise ValueError("transition_prior must be >= 0")

    @property
    def n(self) -> int:
        return self.layout.n


@dataclass(frozen=True)
class ReinitDirective:
    """Tells the caller to restart every channel on ``bbox``.

    ``template_update`` is the exponential blending factor channels apply to
    their appearance templates on a verified detection.
    """

    bbox: BBox
    frame: int
    next_segment_start: int
    template_update: float = TEMPLATE_UPDATE_FACTOR


@dataclass
class FusionOutput:
    frame: int
    bbox: BBox
    source: str  # "detector" or "fused"
    state: int
    posterior: np.ndarray
    marginals: np.ndarray
    detection: str = "none"  # none | accepted | rejected
    annotation: Optional[int] = None
    directive: Optional[ReinitDirective] = None


def annotate_state(reports: Sequence[TrackerReport], det: BBox, threshold: float) -> tuple[int, ...]:
    return tuple(int(iou(r.bbox, det) >= threshold) for r in reports)


def detection_gate(
    posterior,
    reports: Sequence[TrackerReport],
    det: BBox,
    config: FusionConfig,
    space: Optional[StateSpace] = None,
) -> bool:
    """False when a majority-correct best state contradicts the detection."""
    space = space or build_state_space(config.n)
    best = most_probable_state(posterior, space)
    bits = space.bits[best]
    if 2 * int(bits.sum()) <= space.n:
        return True
    mean = average_bbox([r.bbox for r, b in zip(reports, bits) if b])
    return iou(det, mean) >= config.gate_iou


class FusionEngine:
    def __init__(self, config: FusionConfig, params: Optional[HmmParams] = None):
        self.config = config
        self.space = build_state_space(config.n)
        self.params = params if params is not None else HmmParams.default(config.layout)
        if self.params.n != config.n or self.params.m != config.layout.m:
            raise ValueError("parameters do not match the observable layout")
        self._frames = np.empty((64, config.layout.m))
        self._annotations: list[tuple[int, int]] = []
        self.posterior = self._segment_start()
        self.frame = 0  # frames processed so far; the next frame is frame + 1
        self._at_segment_start = True
        self.learn_count = 0
        self.last_directive: Optional[ReinitDirective] = None
        self.last_train = None
        if config.tie_emissions:
            groups = tracker_tie_groups(self.space, config.layout)
            self._estimator = TiedBetaEstimator(
                groups, self.space.size, config.layout.m, config.min_state_mass
            )
        else:
            self._estimator = partial(estimate_beta_per_state, min_mass=config.min_state_mass)
        # virtual departures per state, spread like the initial matrix
        self._pseudocounts = (
            config.transition_prior * default_transition_matrix(config.n) if config.transition_prior > 0 else None
        )

    def _segment_start(self) -> np.ndarray:
        p = np.zeros(self.space.size)
        p[0] = 1.0
        return p

    @property
    def history(self) -> AnnotatedHistory:
        frames = self._frames[: self.frame]
        frames.flags.writeable = False
        # frames were clamped on arrival and annotations are appended in order
        return AnnotatedHistory._trusted(frames, tuple(self._annotations))

    def marginals(self, posterior=None) -> np.ndarray:
        posterior = self.posterior if posterior is None else posterior
        return posterior @ self.space.bits

    def assemble_frame(self, reports: Sequence[TrackerReport], shared: Sequence[float] = ()) -> np.ndarray:
        layout = self.config.layout
        if len(reports) != layout.n:
            raise ValueError(f"expected {layout.n} tracker reports, got {len(reports)}")
        parts = []
        for c, (r, d) in enumerate(zip(reports, layout.tracker_dims)):
            if len(r.observables) != d:
                raise ValueError(f"tracker {c} reported {len(r.observables)} observables, layout says {d}")
            parts.extend(r.observables)
        shared = tuple(shared or ())
        if len(shared) != layout.shared:
            raise ValueError(f"expected {layout.shared} shared observables, got {len(shared)}")
        parts.extend(shared)
        return clamp(np.array(parts, dtype=float))

    def _advance(self, x: np.ndarray) -> np.ndarray:
        logf = self.params.emissions.log_density(x[None, :])[0]
        if self._at_segment_start:
            return self._segment_start()
        with np.errstate(divide="ignore"):
            w = np.log(self.posterior @ self.params.transitions) + logf
        top = w.max()
        if not np.isfinite(top):
            raise FloatingPointError(f"frame {self.frame + 1}: filtering distribution degenerated")
        u = np.exp(w - top)
        return u / u.sum()

    def step(
        self,
        reports: Sequence[TrackerReport],
        detection: Optional[DetectionEvent] = None,
        shared: Sequence[float] = (),
    ) -> FusionOutput:
        x = self.assemble_frame(reports, shared)
        posterior = self._advance(x)
        best = most_probable_state(posterior, self.space)
        t = self.frame + 1

        if t > self._frames.shape[0]:
            grown = np.empty((2 * self._frames.shape[0], self._frames.shape[1]))
            grown[: self.frame] = self._frames[: self.frame]
            self._frames = grown
        self._frames[t - 1] = x
        self.frame = t
        self.posterior = posterior
        self._at_segment_start = False
        self.last_directive = None
        marg = self.marginals(posterior)

        status = "none"
        if detection is not None and detection.present:
            if detection_gate(posterior, reports, detection.bbox, self.config, self.space):
                bits = annotate_state(reports, detection.bbox, self.config.correct_iou)
                annotated = self.space.index_of(bits)
                self._annotations.append((t - 1, annotated))
                self._learn()
                self._at_segment_start = True
                self.posterior = self._segment_start()
                directive = ReinitDirective(detection.bbox, t, t + 1)
                self.last_directive = directive
                return FusionOutput(
                    t, detection.bbox, "detector", best, posterior, marg,
                    "accepted", annotated, directive,
                )
            status = "rejected"

        bits = self.space.bits[best]
        box = average_bbox([r.bbox for r, b in zip(reports, bits) if b])
        return FusionOutput(t, box, "fused", best, posterior, marg, status)

    def _learning_history(self) -> AnnotatedHistory:
        history = self.history
        if self.config.window == "segment":
            history = history.last_segment()
        return history

    def _learn(self):
        if self.config.max_iters == 0:
            return
        history = self._learning_history()
        try:
            result = train(self.params, history, self.config.max_iters, estimator=self._estimator, transition_pseudocounts=self._pseudocounts)
        except InfeasibleAnnotationError:
            # an annotation the model cannot reach (e.g. a one-frame segment
            # whose observed state is not all-correct) is left out of learning
            cache = forward_pass(self.params, history)
            keep = np.flatnonzero(np.isfinite(cache.segment_log_likelihoods))
            kept = history.select_segments(keep) if keep.size else None
            if kept is None or not kept.annotations:
                log.debug("frame %d: no feasible annotated segment to learn from", self.frame)
                return
            result = train(self.params, kept, self.config.max_iters, estimator=self._estimator, transition_pseudocounts=self._pseudocounts)
        self.params = result.params
        self.learn_count += 1
        self.last_train = result

    def reinit_protocol(self) -> Optional[ReinitDirective]:
        """Directive issued by the latest frame, or None if no detection was accepted."""
        return self.last_directive

    def snapshot(self) -> dict:
        """Everything that determines future behaviour, for equality checks."""
        return {
            "params": copy.deepcopy(self.params),
            "frames": self._frames[: self.frame].copy(),
            "annotations": list(self._annotations),
            "posterior": self.posterior.copy(),
            "frame": self.frame,
            "at_segment_start": self._at_segment_start,
            "learn_count": self.learn_count,
        }
