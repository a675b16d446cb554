from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fusion import BBox, iou


@dataclass
class Evaluation:
    recall: float
    mean_iou: float
    overlaps: np.ndarray


def overlap_series(boxes: Sequence[BBox], truth: Sequence[BBox]) -> np.ndarray:
    if len(boxes) != len(truth):
        raise ValueError(f"{len(boxes)} outputs for {len(truth)} ground-truth frames")
    return np.array([iou(b, g) for b, g in zip(boxes, truth)], dtype=float)


def evaluate_boxes(boxes: Sequence[BBox], truth: Sequence[BBox], overlap_threshold: float = 0.5) -> Evaluation:
    """Recall is the fraction of frames whose overlap exceeds the threshold."""
    ov = overlap_series(boxes, truth)
    if ov.size == 0:
        return Evaluation(0.0, 0.0, ov)
    return Evaluation(float(np.mean(ov > overlap_threshold)), float(ov.mean()), ov)


def evaluate_trace(outputs, trace, overlap_threshold: float = 0.5) -> Evaluation:
    truth = [r.gt_bbox for r in trace]
    if any(g is None for g in truth):
        raise ValueError("trace lacks ground truth")
    boxes = [o.bbox if hasattr(o, "bbox") else o for o in outputs]
    return evaluate_boxes(boxes, truth, overlap_threshold)


def channel_recalls(trace, overlap_threshold: float = 0.5) -> np.ndarray:
    """Recall of each channel's own boxes on the trace."""
    n = len(trace[0].reports)
    return np.array([
        evaluate_boxes([r.reports[c].bbox for r in trace], [r.gt_bbox for r in trace], overlap_threshold).recall
        for c in range(n)
    ])
