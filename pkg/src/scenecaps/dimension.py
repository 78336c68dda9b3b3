"""Contracted box-counting dimension of sampled point clouds.

Counts occupied grid boxes across a shrinking epsilon schedule after
allowing every point a bounded snap towards already occupied boxes, then
reads the dimension off the least-squares slope of log N against
log(1/eps).  Used to count the effective degrees of freedom of attribute
spaces (rigid vs. elastic, static vs. dynamic, joint DOF) and to audit the
parameterization of capsules.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_EPS_SCHEDULE = (1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0)


def _occupied_boxes(points: np.ndarray, eps: float, margin: float) -> int:
    """Number of occupied eps-boxes after the bounded snap.

    With margin <= eps/2 a point can only ever leave its own box when it
    sits exactly on a box boundary; those are absorbed into the smallest
    (lexicographically) occupied neighbour, which keeps the count invariant
    under permutations of the input.
    """
    boxes = np.floor(points / eps).astype(np.int64)
    occupied = {tuple(b) for b in boxes}

    # Offsets from each point to its own box centre; a snap candidate in a
    # neighbouring box requires |offset| >= eps - margin along some axis.
    centers = (boxes + 0.5) * eps
    offsets = points - centers
    reach = np.abs(offsets) >= (eps - margin) - 1e-12
    movable = np.nonzero(reach.any(axis=1))[0]

    assigned = {tuple(b) for b in boxes}
    if movable.size:
        assigned = set()
        fixed = np.ones(len(points), dtype=bool)
        fixed[movable] = False
        for b in boxes[fixed]:
            assigned.add(tuple(b))
        for i in movable:
            # A neighbour's centre is within the margin only when the
            # point reaches the boundary along that axis, and only on the
            # offset's side; everywhere else the step alone exceeds it.
            steps = [
                (0, int(np.sign(offsets[i, j]))) if reach[i, j] else (0,)
                for j in range(points.shape[1])
            ]
            candidates = []
            for d in itertools.product(*steps):
                nb = tuple(boxes[i] + d)
                if nb not in occupied:
                    continue
                center = (np.asarray(nb) + 0.5) * eps
                if np.linalg.norm(points[i] - center) <= margin + 1e-12:
                    candidates.append(nb)
            assigned.add(min(candidates) if candidates else tuple(boxes[i]))
    return len(assigned)


def cbc_dimension(
    points,
    eps_schedule: Sequence[float] = DEFAULT_EPS_SCHEDULE,
    contraction_margin: float | None = None,
) -> float:
    """Contracted box-counting dimension of a point cloud, clamped to >= 0."""
    cloud = np.asarray(points, dtype=float)
    if cloud.ndim == 1:
        cloud = cloud[:, None]
    if cloud.size == 0:
        raise ValueError("cbc_dimension requires at least one point")
    if not np.all(np.isfinite(cloud)):
        raise ValueError("point cloud contains non-finite values")
    schedule = sorted(set(float(e) for e in eps_schedule), reverse=True)
    if contraction_margin is None:
        contraction_margin = min(schedule) / 2.0
    if contraction_margin > min(schedule) / 2.0 + 1e-12:
        raise ValueError("contraction margin must not exceed half the smallest eps")

    counts = [_occupied_boxes(cloud, eps, contraction_margin) for eps in schedule]
    xs = np.log([1.0 / e for e in schedule])
    ys = np.log(counts)
    slope = float(np.polyfit(xs, ys, 1)[0])
    return max(0.0, slope)


def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Translate to the origin and scale the largest extent to 1."""
    cloud = np.asarray(points, dtype=float)
    if cloud.ndim == 1:
        cloud = cloud[:, None]
    lo = cloud.min(axis=0)
    extent = float((cloud.max(axis=0) - lo).max())
    if extent < 1e-12:
        return np.zeros_like(cloud)
    return (cloud - lo) / extent


def cbc_dimension_mc(
    sampler: Callable[[np.random.Generator, int], np.ndarray],
    points_per_run: int = 400,
    runs: int = 32,
    rng: np.random.Generator | None = None,
    bin_width: float = 0.25,
) -> float:
    """Monte-Carlo dimension: mode of per-run estimates over random sub-boxes.

    The sampler receives an RNG and a sample count and returns the decoded
    image of one random sub-box of the input space.  Each run's cloud is
    normalised to its bounding box before counting; the returned value is
    the mean of the estimates falling into the most populated histogram bin.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    estimates = []
    for _ in range(runs):
        cloud = np.asarray(sampler(rng, points_per_run), dtype=float)
        if cloud.ndim == 1:
            cloud = cloud[:, None]
        norm = normalize_cloud(cloud)
        if not norm.any():
            estimates.append(0.0)
            continue
        estimates.append(cbc_dimension(norm))
    estimates = np.asarray(estimates)
    bins = np.floor(estimates / bin_width).astype(int)
    values, counts = np.unique(bins, return_counts=True)
    modal = values[np.argmax(counts)]
    return float(estimates[bins == modal].mean())
