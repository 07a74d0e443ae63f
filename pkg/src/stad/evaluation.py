"""Frame-level mean average precision at IoU 0.5."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .fileio import atomic_open
from .geometry import Box, Detection, _as_boxes, pairwise_iou

ACTION_SCORE_THRESH = 0.002
MAX_ACTORS = 10


@dataclass
class EvalResult:
    ap: np.ndarray  # (C,), nan for classes without ground truth
    map: float
    num_gt: int
    num_detections: int
    num_matched: int

    def as_dict(self) -> dict:
        return {
            "ap": [None if np.isnan(a) else float(a) for a in self.ap],
            "mAP": self.map,
            "num_gt": self.num_gt,
            "num_detections": self.num_detections,
            "num_matched": self.num_matched,
        }


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP of a ranked list of TP flags."""
    tp = np.asarray(tp, dtype=np.float64)
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def triples_from_detections(dets: Mapping[str, Sequence[Detection]]):
    """Flatten per-frame detections to (frame, box, class, score) records,
    skipping zero scores."""
    out = []
    for frame, ds in dets.items():
        for d in ds:
            for c, s in enumerate(d.class_scores):
                if s > 0:
                    out.append((frame, d.box.as_array(), c, float(s)))
    return out


def frame_map(
    detections: Mapping[str, Sequence[Detection]] | Sequence[tuple],
    gts: Mapping[str, Sequence[tuple[Box, np.ndarray]]],
    num_classes: int | None = None,
    iou_thresh: float = 0.5,
) -> EvalResult:
    """``detections`` maps frame id to detections carrying per-class scores,
    or is already a list of ``(frame, box, class, score)`` triples. Each
    triple is scored independently; a triple is a true positive when it
    overlaps an unmatched same-class ground truth at ``iou_thresh`` or more,
    taking the highest-IoU one."""
    triples = triples_from_detections(detections) if isinstance(detections, Mapping) else list(detections)
    gt_boxes: dict[str, np.ndarray] = {}
    gt_labels: dict[str, np.ndarray] = {}
    for frame, entries in gts.items():
        if entries:
            gt_boxes[frame] = _as_boxes([e[0] for e in entries])
            gt_labels[frame] = np.asarray([e[1] for e in entries], dtype=np.float64)
    if num_classes is None:
        sizes = [v.shape[1] for v in gt_labels.values()] + [t[2] + 1 for t in triples]
        num_classes = max(sizes) if sizes else 0
    total_gt = int(sum(v.sum() for v in gt_labels.values()))
    if total_gt == 0:
        raise ValueError("no ground truth: frame-mAP undefined")

    ap = np.full(num_classes, np.nan)
    matched_total = 0
    for c in range(num_classes):
        n_gt = int(sum(v[:, c].sum() for v in gt_labels.values()))
        if n_gt == 0:
            continue
        cls = [t for t in triples if t[2] == c]
        order = np.argsort([-t[3] for t in cls], kind="stable")
        used = {f: np.zeros(len(b), dtype=bool) for f, b in gt_boxes.items()}
        tp = np.zeros(len(cls))
        for rank, k in enumerate(order):
            frame, box, _, _ = cls[k]
            if frame not in gt_boxes:
                continue
            ious = pairwise_iou(np.asarray(box)[None], gt_boxes[frame])[0]
            ok = (gt_labels[frame][:, c] > 0) & ~used[frame] & (ious >= iou_thresh)
            if ok.any():
                j = int(np.argmax(np.where(ok, ious, -1.0)))
                used[frame][j] = True
                tp[rank] = 1.0
        matched_total += int(tp.sum())
        ap[c] = average_precision(tp, n_gt)
    return EvalResult(ap, float(np.nanmean(ap)), total_gt, len(triples), matched_total)


def cap_detections(dets: Sequence[Detection], score_thresh=ACTION_SCORE_THRESH, max_actors=MAX_ACTORS):
    """Test-time output caps: top actors by actorness, low action scores zeroed."""
    kept = sorted(dets, key=lambda d: -d.actorness)[:max_actors]
    out = []
    for d in kept:
        s = np.where(d.class_scores >= score_thresh, d.class_scores, 0.0)
        out.append(Detection(d.box, d.actorness, s))
    return out


def write_detections(path, triples) -> None:
    with atomic_open(path) as fh:
        for frame, box, c, s in triples:
            fh.write(json.dumps({"frame": frame, "box": [float(v) for v in box], "class": int(c), "score": float(s)}) + "\n")


def read_detections(path) -> list[tuple]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out.append((r["frame"], np.asarray(r["box"], dtype=np.float64), int(r["class"]), float(r["score"])))
    return out
