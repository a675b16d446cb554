"""A false detection far from three agreeing trackers is rejected.

The rejected frame leaves the engine exactly where a frame without any
detection would have left it. A detection on the trackers is accepted and
restarts the chain.
"""
import numpy as np

from trackfusion import BBox, DetectionEvent, FusionConfig, FusionEngine, ObservableLayout, TrackerReport

target = BBox(100, 100, 40, 40)
clutter = BBox(420, 300, 40, 40)
reports = [TrackerReport(target, (0.9,)) for _ in range(3)]

cfg = FusionConfig(ObservableLayout.uniform(3))
with_fp, without = FusionEngine(cfg), FusionEngine(cfg)
for _ in range(15):
    with_fp.step(reports)
    without.step(reports)

out = with_fp.step(reports, DetectionEvent(clutter))
without.step(reports)
print("false detection:", out.detection, "-> output", out.bbox, "from", out.source)
same = all(
    np.array_equal(a, b) if isinstance(a, np.ndarray) else a == b
    for a, b in zip(with_fp.snapshot().values(), without.snapshot().values())
)
print("engine state identical to a frame without detection:", same)

out = with_fp.step(reports, DetectionEvent(BBox(102, 99, 40, 40)))
print("true detection:", out.detection, "-> output", out.bbox, "from", out.source)
print("restart directive:", out.directive)
