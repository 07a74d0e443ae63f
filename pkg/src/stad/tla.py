"""Pseudo-labels for unannotated frames.

Temporal label assignment matches the teacher's detections on an unlabeled
frame against the pooled annotations of the two neighbouring keyframes with a
Hungarian solve over a classification + box-regression cost. The threshold and
interpolation baselines live here too.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import losses
from .data import as_label_matrix
from .fileio import atomic_open
from .geometry import Box, Detection, _as_boxes

# teacher decode for labeling: the test-time settings
TEACHER_SCORE_THRESH = 0.4
TEACHER_NMS_IOU = 0.3
TEACHER_MAX_N = 10


def hungarian(cost) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column.

    Shortest augmenting paths with dual potentials, O(n^2 m). Requires
    ``rows <= cols``; returns ``assign`` with ``assign[i]`` the column of row i.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = cost.shape
    if n > m:
        raise ValueError("need at least as many columns as rows")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost must be finite")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: row (1-based) on column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1  # lowest column index on ties
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            assign[owner[j] - 1] = j - 1
    return assign


def assignment_cost(cost, assign) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(cost[np.arange(len(assign)), assign].sum())


def cost_terms(det_boxes, det_scores, gt_boxes, gt_labels, image_size):
    """The three matching terms as (N, M) arrays: BCE, smooth-L1 on
    image-normalized boxes, and GIoU loss."""
    h, w = image_size
    norm = torch.tensor([w, h, w, h], dtype=torch.float64)
    db = torch.as_tensor(np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4))
    ds = torch.as_tensor(np.asarray(det_scores, dtype=np.float64))
    gb = torch.as_tensor(np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4))
    gl = torch.as_tensor(np.asarray(gt_labels, dtype=np.float64).reshape(len(gb), -1))
    with torch.no_grad():
        bce = losses.bce_multilabel(ds[:, None, :], gl[None, :, :])
        l1 = losses.smooth_l1(db[:, None, :] / norm, gb[None, :, :] / norm)
        gi = losses.giou_loss(db[:, None, :], gb[None, :, :])
    return bce.numpy(), l1.numpy(), gi.numpy()


def cost_matrix_arrays(det_boxes, det_scores, gt_boxes, gt_labels, image_size) -> np.ndarray:
    det_scores = np.asarray(det_scores, dtype=np.float64)
    n = len(det_scores)
    if n == 0:
        raise ValueError("need at least one detection")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    m = len(gt_boxes)
    cost = np.empty((n, max(n, m)))
    if m:
        bce, l1, gi = cost_terms(det_boxes, det_scores, gt_boxes, gt_labels, image_size)
        cost[:, :m] = bce + l1 + gi
    if n > m:
        background = losses.bce_multilabel(torch.as_tensor(det_scores), torch.zeros_like(torch.as_tensor(det_scores)))
        cost[:, m:] = background.numpy()[:, None]
    return cost


def build_cost_matrix(
    dets: Sequence[Detection],
    gts: Sequence[tuple[Box, np.ndarray]],
    image_size: tuple[int, int] = (64, 64),
) -> np.ndarray:
    """``(N, max(N, M))`` matrix; columns past ``M`` are background and carry
    only the classification term against an all-zero label."""
    boxes = _as_boxes([d.box for d in dets]) if dets else np.zeros((0, 4))
    scores = np.asarray([d.class_scores for d in dets], dtype=np.float64)
    gt_boxes = _as_boxes([g[0] for g in gts]) if gts else np.zeros((0, 4))
    c = scores.shape[1] if scores.ndim == 2 else 0
    gt_labels = np.asarray([g[1] for g in gts], dtype=np.float64).reshape(len(gt_boxes), c)
    return cost_matrix_arrays(boxes, scores, gt_boxes, gt_labels, image_size)


@dataclass
class PseudoLabelSet:
    """Pseudo boxes with multi-hot labels; ``background`` rows have all-zero
    labels and only feed the localization loss."""

    boxes: np.ndarray  # (N, 4)
    labels: np.ndarray  # (N, C)
    background: np.ndarray  # (N,) bool
    assigned: np.ndarray = field(default=None)  # (N,) pooled-GT index, -1 for background
    costs: np.ndarray = field(default=None)  # (N,) matched cost
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        n = len(self.boxes)
        self.labels = as_label_matrix(self.labels, n)
        self.background = np.asarray(self.background, dtype=bool).reshape(n)
        if self.assigned is None:
            self.assigned = np.full(n, -1, dtype=np.int64)
        if self.costs is None:
            self.costs = np.full(n, np.nan)

    def __len__(self):
        return len(self.boxes)

    @classmethod
    def empty(cls, num_classes: int, **provenance) -> "PseudoLabelSet":
        return cls(np.zeros((0, 4)), np.zeros((0, num_classes)), np.zeros(0, bool), provenance=provenance)

    def to_record(self, clip_id: str, center_time: float) -> dict:
        return {
            "clip_id": clip_id,
            "center_time": center_time,
            "boxes": self.boxes.tolist(),
            "labels": self.labels.astype(int).tolist(),
            "background": self.background.tolist(),
            "assigned": self.assigned.tolist(),
            "costs": [None if np.isnan(c) else float(c) for c in self.costs],
            "provenance": self.provenance,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PseudoLabelSet":
        n = len(rec["boxes"])
        c = len(rec["labels"][0]) if n else 0
        return cls(
            np.asarray(rec["boxes"], dtype=np.float64).reshape(n, 4),
            np.asarray(rec["labels"], dtype=np.float64).reshape(n, c),
            np.asarray(rec["background"], dtype=bool),
            np.asarray(rec["assigned"], dtype=np.int64),
            np.asarray([np.nan if x is None else x for x in rec["costs"]], dtype=np.float64),
            rec.get("provenance", {}),
        )


def pooled_ground_truth(left, right) -> tuple[np.ndarray, np.ndarray]:
    """Left entries followed by right entries; duplicates of one entity kept."""
    boxes = np.concatenate([left.boxes, right.boxes]).reshape(-1, 4)
    labels = np.concatenate([left.labels, right.labels])
    return boxes, labels


def tla_from_detections(
    det_boxes,
    det_scores,
    left,
    right,
    image_size: tuple[int, int] = (64, 64),
    provenance: dict | None = None,
) -> PseudoLabelSet:
    """Assign each detection a neighbour-keyframe label or background."""
    det_scores = np.asarray(det_scores, dtype=np.float64)
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    prov = dict(provenance or {}, left_time=left.frame_time, right_time=right.frame_time)
    num_classes = left.labels.shape[1] if left.labels.size else right.labels.shape[1] if right.labels.size else det_scores.shape[-1]
    if len(det_boxes) == 0:
        return PseudoLabelSet.empty(num_classes, **prov)
    gt_boxes, gt_labels = pooled_ground_truth(left, right)
    m = len(gt_boxes)
    cost = cost_matrix_arrays(det_boxes, det_scores, gt_boxes, gt_labels, image_size)
    assign = hungarian(cost)
    real = assign < m
    labels = np.zeros((len(det_boxes), num_classes))
    labels[real] = gt_labels[assign[real]]
    return PseudoLabelSet(
        det_boxes.copy(),
        labels,
        ~real,
        np.where(real, assign, -1),
        cost[np.arange(len(assign)), assign],
        prov,
    )


def teacher_detections(teacher, clip: torch.Tensor):
    """Test-time decode of one clip ``(ch, T, H, W)``: boxes, actorness, class scores."""
    dets = teacher.detect(clip[None], TEACHER_SCORE_THRESH, TEACHER_NMS_IOU, TEACHER_MAX_N)[0]
    c = teacher.cfg.num_classes
    boxes = _as_boxes([d.box for d in dets]) if dets else np.zeros((0, 4))
    actorness = np.asarray([d.actorness for d in dets], dtype=np.float64)
    scores = np.asarray([d.class_scores for d in dets], dtype=np.float64).reshape(-1, c)
    return boxes, actorness, scores


def tla_assign(clip: torch.Tensor, left, right, teacher, image_size=None, provenance=None) -> PseudoLabelSet:
    """Label the teacher's detections on ``clip`` from its neighbour keyframes."""
    if not left.frame_time < right.frame_time:
        raise ValueError("left keyframe must precede right keyframe")
    size = image_size or (teacher.cfg.height, teacher.cfg.width)
    boxes, _, scores = teacher_detections(teacher, clip)
    return tla_from_detections(boxes, scores, left, right, size, provenance)


def _threshold(det_boxes, det_scores, taus, provenance=None) -> PseudoLabelSet:
    det_scores = np.asarray(det_scores, dtype=np.float64)
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    labels = (det_scores >= np.asarray(taus, dtype=np.float64)[None, :]).astype(np.float64)
    return PseudoLabelSet(det_boxes.copy(), labels, labels.sum(axis=1) == 0, provenance=dict(provenance or {}))


def hard_threshold_labels(det_boxes, det_scores, tau: float = 0.5, provenance=None) -> PseudoLabelSet:
    """Keep class c where its score reaches ``tau``; nothing left means background."""
    det_scores = np.asarray(det_scores, dtype=np.float64)
    c = det_scores.shape[-1] if det_scores.ndim == 2 else 0
    return _threshold(det_boxes, det_scores.reshape(-1, c), np.full(c, tau), provenance)


def per_class_threshold_labels(det_boxes, det_scores, taus, provenance=None) -> PseudoLabelSet:
    return _threshold(det_boxes, det_scores, taus, provenance)


def calibrate_class_thresholds(scores: Sequence[np.ndarray], is_tp: Sequence[np.ndarray], target_precision: float = 0.5) -> np.ndarray:
    """Per class, the lowest candidate score whose above-threshold precision
    reaches ``target_precision``. Classes that never get there receive a
    threshold above 1, so they are never pseudo-labeled."""
    taus = np.full(len(scores), 1.0 + 1e-6)
    for c, (s, tp) in enumerate(zip(scores, is_tp)):
        s = np.asarray(s, dtype=np.float64)
        tp = np.asarray(tp, dtype=np.float64)
        if s.size == 0:
            continue
        order = np.argsort(-s, kind="stable")
        s, tp = s[order], tp[order]
        # precision of "score >= s[k]" counts every tie with s[k]
        last = np.searchsorted(-s, -s, side="right") - 1
        precision = np.cumsum(tp)[last] / (last + 1)
        ok = np.flatnonzero(precision >= target_precision)
        if ok.size:
            taus[c] = s[ok].min()
    return taus


def interpolation_labels(left, right, t: float) -> PseudoLabelSet:
    """Boxes linearly interpolated at time ``t`` for entities annotated in both
    keyframes, with the union of their labels. Other entities are dropped."""
    tl, tr = left.frame_time, right.frame_time
    a = (t - tl) / (tr - tl)
    rid = {int(e): k for k, e in enumerate(right.entity_ids)}
    boxes, labels = [], []
    for k, e in enumerate(left.entity_ids):
        j = rid.get(int(e))
        if j is None:
            continue
        if a == 0.0:
            boxes.append(left.boxes[k].copy())
        else:
            boxes.append(left.boxes[k] + a * (right.boxes[j] - left.boxes[k]))
        labels.append(np.maximum(left.labels[k], right.labels[j]))
    c = left.labels.shape[1] if left.labels.ndim == 2 else 0
    return PseudoLabelSet(
        np.reshape(boxes, (-1, 4)), np.reshape(labels, (-1, c)), np.zeros(len(boxes), bool),
        provenance={"left_time": tl, "right_time": tr},
    )


def neighbour_classes(left, right) -> np.ndarray:
    """Boolean mask of classes present in either keyframe."""
    stacked = np.concatenate([left.labels, right.labels])
    return stacked.sum(axis=0) > 0 if len(stacked) else np.zeros(left.labels.shape[1], bool)


def temporal_restriction(pseudo: PseudoLabelSet, left, right) -> PseudoLabelSet:
    """Zero classes absent from both neighbour keyframes."""
    allowed = neighbour_classes(left, right)
    labels = pseudo.labels * allowed[None, :]
    bg = pseudo.background | (labels.sum(axis=1) == 0)
    return PseudoLabelSet(pseudo.boxes.copy(), labels, bg, pseudo.assigned.copy(), pseudo.costs.copy(), dict(pseudo.provenance))


def write_pseudo_labels(path, records: Sequence[dict]) -> None:
    with atomic_open(path) as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_pseudo_labels(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
