"""Training targets: dense per-location targets for the localization head and
proposal-to-ground-truth matching for the action head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, Detection, _as_boxes, box_area, centerness_target, pairwise_iou

POSITIVE_IOU = 0.5


@dataclass(frozen=True)
class PyramidLevel:
    name: str
    stride: int
    reg_range: tuple[float, float]


@dataclass(frozen=True)
class PyramidSpec:
    levels: tuple[PyramidLevel, ...]

    def __post_init__(self):
        strides = [lv.stride for lv in self.levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError("strides must be strictly increasing")
        if self.levels[0].reg_range[0] != 0 or self.levels[-1].reg_range[1] != np.inf:
            raise ValueError("regression ranges must cover [0, inf)")
        for a, b in zip(self.levels, self.levels[1:]):
            if a.reg_range[1] != b.reg_range[0]:
                raise ValueError("regression ranges must be contiguous")

    @property
    def strides(self) -> list[int]:
        return [lv.stride for lv in self.levels]

    def feature_sizes(self, height: int, width: int) -> list[tuple[int, int]]:
        return [(-(-height // s), -(-width // s)) for s in self.strides]


DEFAULT_PYRAMID = PyramidSpec(
    (
        PyramidLevel("P3", 4, (0.0, 16.0)),
        PyramidLevel("P4", 8, (16.0, 32.0)),
        PyramidLevel("P5", 16, (32.0, np.inf)),
    )
)


def level_locations(stride: int, h: int, w: int) -> np.ndarray:
    """(h*w, 2) array of (x, y) pixel centres of a feature map, row-major."""
    xs = np.arange(w, dtype=np.float64) * stride + stride / 2
    ys = np.arange(h, dtype=np.float64) * stride + stride / 2
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass
class FcosTargets:
    """Targets for every location of every pyramid level, concatenated
    level after level. ``regression`` and ``centerness`` are zero where
    ``actorness`` is 0."""

    locations: np.ndarray  # (L, 2)
    strides: np.ndarray  # (L,)
    actorness: np.ndarray  # (L,) in {0, 1}
    regression: np.ndarray  # (L, 4) l, t, r, b
    centerness: np.ndarray  # (L,)
    gt_index: np.ndarray  # (L,), -1 on negatives
    level_slices: list[slice]

    @property
    def num_positive(self) -> int:
        return int(self.actorness.sum())

    def decode(self) -> np.ndarray:
        """Boxes implied by the regression targets at every location."""
        x, y = self.locations[:, 0], self.locations[:, 1]
        l, t, r, b = self.regression.T
        return np.stack([x - l, y - t, x + r, y + b], axis=1)


def assign_fcos_targets(
    gts,
    spec: PyramidSpec = DEFAULT_PYRAMID,
    image_size: tuple[int, int] = (64, 64),
    radius_strides: float = 1.5,
) -> FcosTargets:
    """Center-sampled FCOS assignment.

    ``image_size`` is ``(height, width)``. A location is positive for a box
    when it lies inside the box, within ``radius_strides * stride`` of the box
    centre on both axes, and the box's largest regression distance falls in the
    level's range. Ties between boxes go to the smaller one. A box left with
    no positive location is given the nearest unclaimed location of the finest
    level.
    """
    if radius_strides <= 0:
        raise ValueError("radius_strides must be positive")
    gts = _as_boxes(gts) if len(gts) else np.zeros((0, 4))
    h, w = image_size
    locs, strides, ranges, slices = [], [], [], []
    start = 0
    for level, (fh, fw) in zip(spec.levels, spec.feature_sizes(h, w)):
        pts = level_locations(level.stride, fh, fw)
        locs.append(pts)
        strides.append(np.full(len(pts), level.stride, dtype=np.float64))
        ranges.append(np.tile(level.reg_range, (len(pts), 1)))
        slices.append(slice(start, start + len(pts)))
        start += len(pts)
    locs = np.concatenate(locs)
    strides = np.concatenate(strides)
    ranges = np.concatenate(ranges)
    n_loc = len(locs)

    actorness = np.zeros(n_loc, dtype=np.float64)
    regression = np.zeros((n_loc, 4), dtype=np.float64)
    centerness = np.zeros(n_loc, dtype=np.float64)
    gt_index = np.full(n_loc, -1, dtype=np.int64)
    if len(gts) == 0:
        return FcosTargets(locs, strides, actorness, regression, centerness, gt_index, slices)

    x, y = locs[:, 0:1], locs[:, 1:2]
    l = x - gts[None, :, 0]
    t = y - gts[None, :, 1]
    r = gts[None, :, 2] - x
    b = gts[None, :, 3] - y
    dist = np.stack([l, t, r, b], axis=-1)  # (L, M, 4)
    inside = dist.min(axis=-1) > 0
    cx = 0.5 * (gts[:, 0] + gts[:, 2])
    cy = 0.5 * (gts[:, 1] + gts[:, 3])
    radius = radius_strides * strides[:, None]
    near_center = (np.abs(x - cx[None]) < radius) & (np.abs(y - cy[None]) < radius)
    max_d = dist.max(axis=-1)
    in_range = (max_d > ranges[:, 0:1]) & (max_d <= ranges[:, 1:2])
    candidate = inside & near_center & in_range

    areas = np.broadcast_to(box_area(gts)[None, :], candidate.shape)
    masked = np.where(candidate, areas, np.inf)
    best = masked.argmin(axis=1)
    pos = np.isfinite(masked[np.arange(n_loc), best])
    gt_index[pos] = best[pos]

    fine = slices[0]
    for j in np.argsort(box_area(gts)):
        if np.any(gt_index == j):
            continue
        d2 = (locs[fine, 0] - cx[j]) ** 2 + (locs[fine, 1] - cy[j]) ** 2
        order = np.argsort(d2, kind="stable") + fine.start
        free = [k for k in order if gt_index[k] < 0 or _only_claim_elsewhere(gt_index, k)]
        gt_index[free[0] if free else order[0]] = j

    pos = gt_index >= 0
    actorness[pos] = 1.0
    regression[pos] = dist[np.nonzero(pos)[0], gt_index[pos]]
    ok = pos & (regression.min(axis=1) > 0)
    if ok.any():
        rg = regression[ok]
        centerness[ok] = centerness_target(rg[:, 0], rg[:, 1], rg[:, 2], rg[:, 3])
    return FcosTargets(locs, strides, actorness, regression, centerness, gt_index, slices)


def _only_claim_elsewhere(gt_index: np.ndarray, k: int) -> bool:
    # a location may be stolen only if its current owner keeps another positive
    owner = gt_index[k]
    return np.count_nonzero(gt_index == owner) > 1


def match_proposals_arrays(proposal_boxes, gt_boxes, iou_thresh: float = POSITIVE_IOU):
    """Returns ``(positive_mask, matched_gt)`` for arrays of boxes."""
    proposal_boxes = np.asarray(proposal_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(proposal_boxes)
    if n == 0 or len(gt_boxes) == 0:
        return np.zeros(n, dtype=bool), np.full(n, -1, dtype=np.int64)
    ious = pairwise_iou(proposal_boxes, gt_boxes)
    best = ious.argmax(axis=1)  # first maximum, i.e. lower gt index on ties
    positive = ious[np.arange(n), best] >= iou_thresh
    return positive, np.where(positive, best, -1)


def match_proposals(
    proposals: Sequence[Detection | Box],
    gts: Sequence[tuple[Box, np.ndarray]],
    iou_thresh: float = POSITIVE_IOU,
):
    """Label proposals from their best-overlapping ground truth.

    Returns ``(positives, ignored)`` where ``positives`` is a list of
    ``(proposal_index, label_vector)`` and ``ignored`` the set of remaining
    indices. Ignored proposals carry no action-classification loss.
    """
    boxes = [p.box if isinstance(p, Detection) else p for p in proposals]
    positive, matched = match_proposals_arrays(
        _as_boxes(boxes) if boxes else np.zeros((0, 4)),
        _as_boxes([g[0] for g in gts]) if gts else np.zeros((0, 4)),
        iou_thresh,
    )
    positives = [
        (i, np.asarray(gts[matched[i]][1])) for i in range(len(boxes)) if positive[i]
    ]
    ignored = {i for i in range(len(boxes)) if not positive[i]}
    return positives, ignored
