"""Axis-aligned box arithmetic, overlap measures, NMS and the centerness target.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates. Areas are
``(x2 - x1) * (y2 - y1)`` with no +1 convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {coords}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(*(float(v) for v in a))


@dataclass
class Detection:
    """A localized actor with its actorness and per-class action scores."""

    box: Box
    actorness: float
    class_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64)
        if not 0.0 <= self.actorness <= 1.0:
            raise ValueError(f"actorness {self.actorness} outside [0, 1]")
        if self.class_scores.size and (
            self.class_scores.min() < 0.0 or self.class_scores.max() > 1.0
        ):
            raise ValueError("class scores must lie in [0, 1]")


def _as_boxes(boxes) -> np.ndarray:
    if isinstance(boxes, Box):
        return boxes.as_array()[None]
    arr = np.asarray(
        [b.as_array() if isinstance(b, Box) else b for b in boxes], dtype=np.float64
    )
    return arr.reshape(-1, 4)


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix of shape ``(len(a), len(b))``."""
    a, b = _as_boxes(a), _as_boxes(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return inter / union


def pairwise_giou(a, b) -> np.ndarray:
    a, b = _as_boxes(a), _as_boxes(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    ewh = erb - elt
    enclosing = ewh[..., 0] * ewh[..., 1]
    return inter / union - (enclosing - union) / enclosing


def iou(a: Box, b: Box) -> float:
    return float(pairwise_iou(a, b)[0, 0])


def giou(a: Box, b: Box) -> float:
    return float(pairwise_giou(a, b)[0, 0])


def nms_indices(boxes, scores, iou_thresh: float) -> np.ndarray:
    """Greedy suppression; returns kept indices sorted by descending score.

    Equal scores keep input order (stable sort).
    """
    boxes = _as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    ious = pairwise_iou(boxes, boxes) if len(boxes) else np.zeros((0, 0))
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_thresh
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    if not dets:
        return []
    keep = nms_indices([d.box for d in dets], [d.actorness for d in dets], iou_thresh)
    return [dets[i] for i in keep]


def centerness_target(l, t, r, b):
    """sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)); works on scalars or arrays."""
    l, t, r, b = (np.asarray(v, dtype=np.float64) for v in (l, t, r, b))
    if np.any((l < 0) | (t < 0) | (r < 0) | (b < 0)):
        raise ValueError("distances must be nonnegative")
    lr_max = np.maximum(l, r)
    tb_max = np.maximum(t, b)
    if np.any(lr_max <= 0) or np.any(tb_max <= 0):
        raise ValueError("location is not inside any box")
    out = np.sqrt((np.minimum(l, r) / lr_max) * (np.minimum(t, b) / tb_max))
    return float(out) if out.ndim == 0 else out


def clip_boxes(boxes: np.ndarray, width: float, height: float, min_size: float = 1e-3):
    """Clip to the image and keep every box non-degenerate."""
    boxes = np.array(boxes, dtype=np.float64, copy=True).reshape(-1, 4)
    boxes[:, 0] = np.clip(boxes[:, 0], 0.0, width - min_size)
    boxes[:, 1] = np.clip(boxes[:, 1], 0.0, height - min_size)
    boxes[:, 2] = np.clip(boxes[:, 2], boxes[:, 0] + min_size, width)
    boxes[:, 3] = np.clip(boxes[:, 3], boxes[:, 1] + min_size, height)
    return boxes
