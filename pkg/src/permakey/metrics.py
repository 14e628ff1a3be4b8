"""Keypoint quality metrics against ground-truth sprite scenes: coverage,
distractor capture rate, and cross-seed stability via optimal matching."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import FRAME_HW

# "within one sigma" of a keypoint center
DEFAULT_THRESHOLD = math.exp(-0.5)


class EmptyMaskError(ValueError):
    """A ground-truth instance mask has no pixels."""


def pixel_grid_coords(hw: int = FRAME_HW):
    """Normalized [-1, 1] coordinates of pixel centers: (ys, xs)."""
    ys = np.linspace(-1.0, 1.0, hw)
    xs = np.linspace(-1.0, 1.0, hw)
    return ys, xs


def _gaussian_at_mask(center, sigma, mask):
    """Max over the mask's pixels of the keypoint's Gaussian window."""
    ys, xs = pixel_grid_coords(mask.shape[0])
    iy, ix = np.nonzero(mask)
    d2 = (xs[ix] - center[0]) ** 2 + (ys[iy] - center[1]) ** 2
    return float(np.exp(-d2 / (2.0 * sigma * sigma)).max())


def keypoint_coverage(centers, sigma, instance_masks,
                      threshold=DEFAULT_THRESHOLD) -> float:
    """Fraction of ground-truth sprites whose mask is overlapped by some
    keypoint window at value >= threshold. centers: (K, 2) in [-1, 1]."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if not instance_masks:
        raise ValueError("no instance masks given")
    covered = 0
    for mask in instance_masks:
        if not np.any(mask):
            raise EmptyMaskError("instance mask is empty")
        if len(centers) and any(
            _gaussian_at_mask(c, sigma, mask) >= threshold for c in centers
        ):
            covered += 1
    return covered / len(instance_masks)


def distractor_capture_rate(centers, sigma, distractor_mask,
                            threshold=DEFAULT_THRESHOLD) -> float:
    """Fraction of keypoints whose window reaches the distractor mask at
    value >= threshold (i.e. centers within ~one sigma of the bar)."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if not np.any(distractor_mask) or len(centers) == 0:
        return 0.0
    hits = sum(
        1 for c in centers
        if _gaussian_at_mask(c, sigma, distractor_mask) >= threshold
    )
    return hits / len(centers)


def matched_distance(a, b) -> float:
    """Mean Euclidean distance under the minimum-cost perfect matching of
    two equal-size keypoint sets (optimal assignment)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if a.shape != b.shape:
        raise ValueError("keypoint sets differ in size")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


@dataclass
class StabilityReport:
    per_frame: list  # mean matched distance per frame (averaged over pairs)
    mean: float


def stability_across_seeds(runs) -> StabilityReport:
    """runs: list (one per seed) of per-frame (K, 2) center arrays.

    For every frame and every unordered run pair, computes the optimal
    matching distance; reports the per-frame mean and the global mean.
    """
    if len(runs) < 2:
        raise ValueError("need at least two runs")
    n_frames = len(runs[0])
    ks = {np.asarray(r[0]).shape[0] for r in runs}
    if len(ks) != 1:
        raise ValueError(f"runs disagree on K: {sorted(ks)}")
    per_frame = []
    for f in range(n_frames):
        dists = []
        for i in range(len(runs)):
            for j in range(i + 1, len(runs)):
                dists.append(matched_distance(runs[i][f], runs[j][f]))
        per_frame.append(float(np.mean(dists)))
    return StabilityReport(per_frame, float(np.mean(per_frame)))


@dataclass
class CoverageReport:
    per_frame: list
    mean: float
    std: float

    @classmethod
    def from_values(cls, values):
        arr = np.asarray(values, dtype=np.float64)
        return cls(arr.tolist(), float(arr.mean()), float(arr.std()))
