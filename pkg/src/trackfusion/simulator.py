"""Synthetic tracking scenarios.

A target moves along a piecewise-linear path. Each simulated channel either
follows it with pixel noise and draws observables from its "correct" beta
shapes, or has failed: it then drifts at constant velocity and draws from
its "failed" shapes. A statistical detector fires true positives near the
target with a fixed recall and false positives away from it.

All randomness comes from one ``numpy.random.Generator`` backed by PCG64
seeded with ``ScenarioConfig.seed``.

Scenario defaults are chosen to exercise the fusion logic, not to match the
failure statistics of any real tracker.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .emissions import ObservableLayout
from .fusion import BBox, DetectionEvent, FusionConfig, FusionEngine, FusionOutput, TrackerReport, iou


@dataclass
class ChannelConfig:
    correct_shapes: list = field(default_factory=lambda: [(5.0, 2.0)])
    failed_shapes: list = field(default_factory=lambda: [(2.0, 5.0)])
    failure_rate: float = 0.005
    recover_on_reinit_only: bool = True
    recovery_rate: float = 0.0
    noise: float = 1.5
    drift_speed: float = 4.0

    def validate(self):
        if len(self.correct_shapes) != len(self.failed_shapes):
            raise ValueError("correct and failed shapes must cover the same observables")
        for p, q in list(self.correct_shapes) + list(self.failed_shapes):
            if not (p > 0 and q > 0):
                raise ValueError(f"invalid beta shape ({p}, {q})")
        _prob("failure_rate", self.failure_rate)
        _prob("recovery_rate", self.recovery_rate)
        if self.noise < 0 or self.drift_speed < 0:
            raise ValueError("noise and drift speed must be non-negative")


@dataclass
class DetectorConfig:
    recall: float = 0.30
    fp_rate: float = 0.0046
    noise: float = 1.0
    exclusion: float = 2.0  # FP centres avoid this multiple of the target box

    def validate(self):
        _prob("recall", self.recall)
        _prob("fp_rate", self.fp_rate)
        if self.noise < 0 or self.exclusion < 0:
            raise ValueError("detector noise and exclusion must be non-negative")


@dataclass
class MotionConfig:
    waypoints: list = field(default_factory=lambda: [(160.0, 120.0), (480.0, 160.0), (420.0, 360.0), (200.0, 320.0)])
    size: tuple = (60.0, 80.0)
    image: tuple = (640.0, 480.0)
    laps: float = 2.0

    def validate(self):
        if len(self.waypoints) < 1:
            raise ValueError("need at least one waypoint")
        if min(self.size) <= 0 or min(self.image) <= 0:
            raise ValueError("sizes must be positive")


@dataclass
class ScenarioConfig:
    channels: list = field(default_factory=lambda: [
        ChannelConfig([(6.0, 2.0), (4.0, 2.0)], [(2.0, 5.0), (2.0, 3.0)], failure_rate=0.004),
        ChannelConfig([(5.0, 2.0), (3.0, 2.0)], [(2.0, 4.0), (2.0, 2.5)], failure_rate=0.006),
        ChannelConfig([(4.0, 2.0), (4.0, 3.0)], [(2.0, 3.0), (2.0, 4.0)], failure_rate=0.008),
    ])
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    frames: int = 1000
    seed: int = 0

    @property
    def n(self) -> int:
        return len(self.channels)

    @property
    def layout(self) -> ObservableLayout:
        return ObservableLayout(tuple(len(c.correct_shapes) for c in self.channels))

    def validate(self):
        if not self.channels:
            raise ValueError("scenario needs at least one channel")
        if self.frames < 1:
            raise ValueError(f"frame count must be >= 1, got {self.frames}")
        for c in self.channels:
            c.validate()
        self.detector.validate()
        self.motion.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        base = cls()
        channels = d.pop("channels", None)
        detector = d.pop("detector", None)
        motion = d.pop("motion", None)
        unknown = set(d) - {"frames", "seed"}
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        out = replace(base, **d)
        if channels is not None:
            out.channels = [_build(ChannelConfig, c) for c in channels]
        if detector is not None:
            out.detector = _build(DetectorConfig, detector)
        if motion is not None:
            m = dict(motion)
            if "waypoints" in m:
                m["waypoints"] = [tuple(w) for w in m["waypoints"]]
            for k in ("size", "image"):
                if k in m:
                    m[k] = tuple(m[k])
            out.motion = _build(MotionConfig, m)
        return out.validate()


def _build(cls, d):
    try:
        obj = cls(**d)
    except TypeError as exc:
        raise ValueError(f"bad {cls.__name__}: {exc}") from None
    if hasattr(obj, "correct_shapes"):
        obj.correct_shapes = [tuple(s) for s in obj.correct_shapes]
        obj.failed_shapes = [tuple(s) for s in obj.failed_shapes]
    return obj


def _prob(name, v):
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name} must be a probability, got {v}")


@dataclass
class TraceRecord:
    frame: int
    reports: list
    gt_bbox: Optional[BBox] = None
    correct: Optional[list] = None
    detection: Optional[DetectionEvent] = None
    detection_tp: Optional[bool] = None
    shared: tuple = ()


def ground_truth_path(motion: MotionConfig, frames: int) -> np.ndarray:
    """Box (x, y, w, h) per frame along a closed polyline through the waypoints."""
    pts = np.array(motion.waypoints, dtype=float)
    w, h = motion.size
    if len(pts) == 1:
        centres = np.repeat(pts, frames, axis=0)
    else:
        loop = np.vstack([pts, pts[:1]])
        seg = np.linalg.norm(np.diff(loop, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        s = np.linspace(0.0, motion.laps * cum[-1], frames, endpoint=False) % cum[-1]
        centres = np.column_stack([np.interp(s, cum, loop[:, 0]), np.interp(s, cum, loop[:, 1])])
    return np.column_stack([centres[:, 0] - w / 2, centres[:, 1] - h / 2, np.full(frames, w), np.full(frames, h)])


class _Channel:
    def __init__(self, cfg: ChannelConfig):
        self.cfg = cfg
        self.failed = False
        self.box = None
        self.velocity = np.zeros(2)

    def advance(self, gt: np.ndarray, rng: np.random.Generator):
        cfg = self.cfg
        if self.failed:
            if not cfg.recover_on_reinit_only and rng.random() < cfg.recovery_rate:
                self.failed = False
        elif rng.random() < cfg.failure_rate:
            self.failed = True
            angle = rng.uniform(0.0, 2.0 * math.pi)
            self.velocity = cfg.drift_speed * np.array([math.cos(angle), math.sin(angle)])
            if self.box is None:
                self.box = gt.copy()
        if self.failed:
            self.box = self.box.copy()
            self.box[:2] += self.velocity + rng.normal(0.0, cfg.noise, 2)
        else:
            self.box = gt.copy()
            self.box[:2] += rng.normal(0.0, cfg.noise, 2)
        shapes = cfg.failed_shapes if self.failed else cfg.correct_shapes
        obs = tuple(float(rng.beta(p, q)) for p, q in shapes)
        return TrackerReport(BBox.from_seq(self.box), obs)

    def reinit(self, box: BBox, gt: np.ndarray, rng: np.random.Generator):
        if iou(box, BBox.from_seq(gt)) >= 0.5:
            self.failed = False
        else:
            # restarted on clutter: it stays off target until the next restart
            self.failed = True
            angle = rng.uniform(0.0, 2.0 * math.pi)
            self.velocity = 0.25 * self.cfg.drift_speed * np.array([math.cos(angle), math.sin(angle)])
        self.box = np.array(box.as_list(), dtype=float)


class Simulator:
    """Frame-by-frame scenario that can be steered by reinitialisation directives."""

    def __init__(self, config: ScenarioConfig):
        self.config = config.validate()
        self.rng = np.random.Generator(np.random.PCG64(config.seed))
        self.gt = ground_truth_path(config.motion, config.frames)
        self.channels = [_Channel(c) for c in config.channels]
        self.t = 0

    def __len__(self):
        return self.config.frames

    def next_record(self) -> TraceRecord:
        if self.t >= self.config.frames:
            raise StopIteration
        gt = self.gt[self.t]
        gt_box = BBox.from_seq(gt)
        reports = [ch.advance(gt, self.rng) for ch in self.channels]
        correct = [iou(r.bbox, gt_box) >= 0.5 for r in reports]
        detection, tp = self._detect(gt)
        self.t += 1
        return TraceRecord(self.t, reports, gt_box, correct, detection, tp)

    def _detect(self, gt: np.ndarray):
        det = self.config.detector
        u_tp, u_fp = self.rng.random(2)
        if u_tp < det.recall:
            box = gt.copy()
            box[:2] += self.rng.normal(0.0, det.noise, 2)
            return DetectionEvent(BBox.from_seq(box)), True
        if u_fp < det.fp_rate:
            return DetectionEvent(self._false_positive(gt)), False
        return None, None

    def _false_positive(self, gt: np.ndarray) -> BBox:
        W, H = self.config.motion.image
        w, h = gt[2], gt[3]
        cx, cy = gt[0] + w / 2, gt[1] + h / 2
        ex, ey = self.config.detector.exclusion * w, self.config.detector.exclusion * h
        for _ in range(1000):
            x = self.rng.uniform(0.0, max(W - w, 0.0))
            y = self.rng.uniform(0.0, max(H - h, 0.0))
            if abs(x + w / 2 - cx) >= ex / 2 + w / 2 or abs(y + h / 2 - cy) >= ey / 2 + h / 2:
                return BBox(x, y, w, h)
        # image too small to respect the exclusion zone: push it past the zone
        return BBox(cx + ex / 2 + w / 2, gt[1], w, h)

    def reinitialize(self, box: BBox):
        """Restart every channel on ``box`` (applies to the next frame)."""
        gt = self.gt[max(self.t - 1, 0)]
        for ch in self.channels:
            ch.reinit(box, gt, self.rng)


def generate_scenario(config: ScenarioConfig) -> list[TraceRecord]:
    """Open-loop trace: channels are restarted on every true-positive detection."""
    sim = Simulator(config)
    out = []
    for _ in range(config.frames):
        rec = sim.next_record()
        out.append(rec)
        if rec.detection is not None and rec.detection_tp:
            sim.reinitialize(rec.detection.bbox)
    return out


@dataclass
class ClosedLoopRun:
    trace: list
    outputs: list
    engine: FusionEngine


def run_closed_loop(config: ScenarioConfig, fusion: Optional[FusionConfig] = None, params=None) -> ClosedLoopRun:
    """Run the engine inside the scenario, feeding its directives back to the channels."""
    sim = Simulator(config)
    fusion = fusion or FusionConfig(config.layout)
    engine = FusionEngine(fusion, params)
    trace, outputs = [], []
    for _ in range(config.frames):
        rec = sim.next_record()
        out = engine.step(rec.reports, rec.detection, rec.shared)
        trace.append(rec)
        outputs.append(out)
        if out.directive is not None:
            sim.reinitialize(out.directive.bbox)
    return ClosedLoopRun(trace, outputs, engine)


def replay(trace: Sequence[TraceRecord], fusion: FusionConfig, params=None) -> list[FusionOutput]:
    """Stream a fixed trace through a fresh engine."""
    engine = FusionEngine(fusion, params)
    return [engine.step(r.reports, r.detection, r.shared) for r in trace]
