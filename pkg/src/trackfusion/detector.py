"""Statistical core of a feature-matching detector.

Nothing here touches images: descriptor distances, inlier flags and feature
counts come from whatever frontend extracts and matches features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

RATIO_LIMIT = 0.8
SIGNIFICANCE = 1e-3


@dataclass(frozen=True)
class FeatureMatchStats:
    """Distance distribution of a template feature to non-corresponding features."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def normal_cdf(x: float, mu: float = 0.0, sigma: float = 1.0) -> float:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    # erfc keeps full relative precision deep in the lower tail
    return 0.5 * math.erfc(-(x - mu) / (sigma * math.sqrt(2.0)))


@dataclass(frozen=True)
class CorrespondenceDecision:
    accepted: bool
    ratio: float
    cdf: float
    degenerate: bool = False

    def __bool__(self):
        return self.accepted


def correspondence_test(d_fg: float, d_bg: float, stats: FeatureMatchStats) -> CorrespondenceDecision:
    """Second-nearest-neighbour ratio test plus a significance test on the match distance.

    ``d_fg`` is the distance to the nearest foreground (template) feature and
    ``d_bg`` the distance to the nearest background feature.
    """
    if d_fg < 0:
        raise ValueError("distances must be non-negative")
    if d_bg <= 0:
        return CorrespondenceDecision(False, math.inf, math.nan, degenerate=True)
    ratio = d_fg / d_bg
    cdf = normal_cdf(d_fg, stats.mu, stats.sigma)
    return CorrespondenceDecision(ratio < RATIO_LIMIT and cdf < SIGNIFICANCE, ratio, cdf)


def inlier_cost(weights: Sequence[float], inliers: Sequence[bool]) -> float:
    if len(weights) != len(inliers):
        raise ValueError("weights and inlier flags differ in length")
    return float(sum(w for w, ok in zip(weights, inliers) if ok))


def detection_threshold(max_features_in_target: int) -> float:
    """Weighted-inlier support needed to accept a detection, clamped to [5, 10]."""
    if max_features_in_target < 0:
        raise ValueError("feature count must be non-negative")
    return max(5.0, min(0.03 * max_features_in_target, 10.0))


def feature_type_weights(template_counts: Mapping[str, int]) -> dict[str, float]:
    """One weight per feature type, inversely proportional to its template feature count."""
    out = {}
    for kind, count in template_counts.items():
        if count < 1:
            raise ValueError(f"feature type {kind!r} has no template features")
        out[kind] = 1.0 / count
    return out
