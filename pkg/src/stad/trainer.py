"""Two-stage training: supervised burn-in, then teacher-student training on
labeled plus pseudo-labeled clips with an EMA teacher."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import losses
from .assignment import assign_fcos_targets, match_proposals_arrays
from .data import Affine, DatasetIndex, KeyframeAnnotation, apply_affine_clip, extract_clip, random_affine, sample_batches
from .evaluation import ACTION_SCORE_THRESH, MAX_ACTORS, EvalResult, cap_detections, frame_map
from .geometry import Box, pairwise_iou
from .model import ActionDetector, ModelConfig, decode_batch, save_checkpoint
from .tla import (
    TEACHER_NMS_IOU,
    TEACHER_SCORE_THRESH,
    PseudoLabelSet,
    calibrate_class_thresholds,
    hard_threshold_labels,
    interpolation_labels,
    per_class_threshold_labels,
    teacher_detections,
    temporal_restriction,
    tla_from_detections,
)

log = logging.getLogger(__name__)

STRATEGIES = ("tla", "hard", "per-class", "interp", "ema", "none")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Burn-in schedule and the loss/proposal settings shared by both stages."""

    iterations: int = 2000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_iters: int = 100
    lambda_cls: float = 10.0
    proposal_mode: str = "dense"  # dense | sparse | gt
    train_score_thresh: float = 0.3
    train_max_proposals: int = 100
    train_nms_iou: float = 0.3
    radius_strides: float = 1.5
    augment: bool = True
    grad_clip: float = 10.0


@dataclass
class SSADConfig:
    iterations: int = 1000
    batch_size: int = 16
    ratio: float = 1.0
    lr: float = 0.01
    warmup_iters: int = 0
    lambda_unsup: float = 0.5
    ema_decay: float = 0.999
    strategy: str = "tla"
    hard_tau: float = 0.5
    target_precision: float = 0.5


@dataclass
class LossReport:
    l_al: float = 0.0
    l_ac: float = 0.0
    l_sup: float = 0.0
    l_unsup: float = 0.0
    total: float = 0.0
    pos_locations: int = 0
    pos_proposals: int = 0
    unsup_pos_locations: int = 0
    unsup_pos_proposals: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DetectionLoss:
    """Differentiable pieces of one loss evaluation."""

    l_al: torch.Tensor
    l_ac: torch.Tensor
    total: torch.Tensor
    focal: float
    giou: float
    centerness: float
    pos_locations: int
    pos_proposals: int


@dataclass
class TrainState:
    student: ActionDetector
    teacher: ActionDetector | None
    optimizer: torch.optim.Optimizer
    ema_decay: float
    iteration: int = 0
    stage: str = "burn_in"
    seed: int = 0
    rng_labeled: np.random.Generator = None
    rng_unlabeled: np.random.Generator = None
    class_thresholds: np.ndarray | None = None
    history: list[dict] = field(default_factory=list)


# --------------------------------------------------------------------------
# data access


class ClipSource:
    """Clip extraction with an audit counter on unlabeled reads."""

    def __init__(self, videos: dict[str, np.ndarray], index: DatasetIndex, clip_frames: int = 8):
        self.videos = videos
        self.index = index
        self.clip_frames = clip_frames
        self.unlabeled_reads = 0
        self.labeled_reads = 0

    def labeled(self, i: int, aff: Affine | None = None):
        c = self.index.labeled[i]
        self.labeled_reads += 1
        clip = extract_clip(self.videos[c.video], c.frame, self.clip_frames)
        ann = c.annotation
        if aff is None or aff.identity:
            return clip, ann.boxes.copy(), ann.labels.copy()
        h, w = clip.shape[1:]
        boxes, keep = aff.apply(ann.boxes, w, h)
        return apply_affine_clip(clip, aff), boxes[keep], ann.labels[keep]

    def unlabeled(self, i: int, aff: Affine | None = None):
        c = self.index.unlabeled[i]
        self.unlabeled_reads += 1
        clip = extract_clip(self.videos[c.video], c.frame, self.clip_frames)
        t = c.frame / self.index.fps
        if aff is None or aff.identity:
            return clip, c.left, c.right, t
        h, w = clip.shape[1:]
        return apply_affine_clip(clip, aff), _warp(c.left, aff, w, h), _warp(c.right, aff, w, h), t


def _warp(ann: KeyframeAnnotation, aff: Affine, w: int, h: int) -> KeyframeAnnotation:
    boxes, keep = aff.apply(ann.boxes, w, h)
    return KeyframeAnnotation(ann.frame_time, boxes[keep], ann.labels[keep], ann.entity_ids[keep])


def to_tensor(clips: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack (T, H, W) clips into a (B, 1, T, H, W) float tensor."""
    return torch.from_numpy(np.stack(clips)[:, None].astype(np.float32))


def _aff(rng, cfg: TrainConfig, h: int, w: int) -> Affine:
    return random_affine(rng, h, w) if cfg.augment else Affine()


# --------------------------------------------------------------------------
# losses


def detection_loss(
    model: ActionDetector,
    clips: torch.Tensor,
    boxes: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    cfg: TrainConfig,
    background: Sequence[np.ndarray] | None = None,
) -> DetectionLoss:
    """Localization loss on every target box plus action loss on matched
    proposals. Targets flagged in ``background`` feed localization only."""
    mc = model.cfg
    feats, preds = model(clips)
    B = clips.shape[0]
    tg = [assign_fcos_targets(b, model.pyramid, (mc.height, mc.width), cfg.radius_strides) for b in boxes]
    act_t = torch.as_tensor(np.stack([t.actorness for t in tg]), dtype=preds.actorness.dtype)
    pos = act_t > 0
    n_pos = int(pos.sum())
    focal = losses.focal_loss(torch.sigmoid(preds.actorness), act_t).sum() / max(1, n_pos)
    if n_pos:
        gt_boxes = torch.as_tensor(np.stack([t.decode() for t in tg]), dtype=preds.regression.dtype)
        ctr_t = torch.as_tensor(np.stack([t.centerness for t in tg]), dtype=preds.centerness.dtype)
        giou = losses.giou_loss(preds.boxes()[pos], gt_boxes[pos]).mean()
        ctr = losses.centerness_loss(torch.sigmoid(preds.centerness[pos]), ctr_t[pos]).mean()
    else:
        giou = ctr = preds.regression.sum() * 0.0
    l_al = focal + giou + ctr

    if cfg.proposal_mode == "gt":
        props = [np.asarray(b, dtype=np.float64).reshape(-1, 4) for b in boxes]
    else:
        props, _ = decode_batch(
            preds, cfg.train_score_thresh, cfg.train_max_proposals,
            cfg.proposal_mode == "sparse", cfg.train_nms_iou, mc.width, mc.height,
        )
    roi_boxes, roi_labels = [], []
    for i in range(B):
        gb = np.asarray(boxes[i], dtype=np.float64).reshape(-1, 4)
        positive, matched = match_proposals_arrays(props[i], gb)
        if background is not None and len(gb):
            positive &= ~np.asarray(background[i], dtype=bool)[np.maximum(matched, 0)]
        roi_boxes.append(torch.as_tensor(props[i][positive], dtype=torch.float32))
        roi_labels.append(np.asarray(labels[i], dtype=np.float64).reshape(len(gb), mc.num_classes)[matched[positive]])
    n_prop = sum(len(r) for r in roi_boxes)
    if n_prop:
        logits = model.action_head(feats.c5, roi_boxes)
        target = torch.as_tensor(np.concatenate(roi_labels), dtype=logits.dtype)
        l_ac = losses.bce_multilabel(torch.sigmoid(logits), target).mean()
    else:
        l_ac = feats.c5.sum() * 0.0
    total = l_al + cfg.lambda_cls * l_ac
    return DetectionLoss(l_al, l_ac, total, focal.item(), giou.item(), ctr.item(), n_pos, n_prop)


def supervised_loss(model, clips, annotations, cfg: TrainConfig) -> DetectionLoss:
    """``annotations`` is a list of (boxes, labels) per clip."""
    return detection_loss(model, clips, [a[0] for a in annotations], [a[1] for a in annotations], cfg)


def unsupervised_loss(model, clips, pseudo: Sequence[PseudoLabelSet], cfg: TrainConfig) -> DetectionLoss | None:
    """Same form as the supervised loss with pseudo targets. Clips with an
    empty pseudo set are skipped; returns None when nothing is left."""
    keep = [i for i, p in enumerate(pseudo) if len(p)]
    if not keep:
        return None
    sel = clips[keep] if len(keep) < len(pseudo) else clips
    return detection_loss(
        model, sel, [pseudo[i].boxes for i in keep], [pseudo[i].labels for i in keep], cfg,
        background=[pseudo[i].background for i in keep],
    )


# --------------------------------------------------------------------------
# optimisation helpers


def cosine_lr(base: float, it: int, total: int, warmup: int = 0) -> float:
    if warmup and it < warmup:
        return base * (it + 1) / warmup
    t = min(1.0, (it - warmup) / max(1, total - warmup))
    return 0.5 * base * (1.0 + math.cos(math.pi * t))


def make_optimizer(model, lr, momentum, weight_decay) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)


@torch.no_grad()
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, m: float) -> torch.nn.Module:
    """teacher <- m * teacher + (1 - m) * student, parameters and float buffers."""
    ts, ss = teacher.state_dict(), student.state_dict()
    for k, tv in ts.items():
        sv = ss[k]
        if tv.dtype.is_floating_point:
            tv.mul_(m).add_(sv, alpha=1.0 - m)
        else:
            tv.copy_(sv)
    return teacher


def _step(state: TrainState, loss: torch.Tensor, lr: float, grad_clip: float):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()} at iteration {state.iteration} ({state.stage})")
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    # parameters outside this step's graph still get momentum and weight decay
    for p in state.student.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(state.student.parameters(), grad_clip)
    state.optimizer.step()


class MetricsLog:
    """Append-only JSON-lines log of per-iteration metrics."""

    def __init__(self, path=None):
        self.fh = open(path, "a") if path else None

    def write(self, rec: dict):
        if self.fh:
            self.fh.write(json.dumps(rec) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


# --------------------------------------------------------------------------
# burn-in


def new_state(model_cfg: ModelConfig, cfg: TrainConfig, seed: int) -> TrainState:
    torch.manual_seed(seed)
    student = ActionDetector(model_cfg)
    opt = make_optimizer(student, cfg.lr, cfg.momentum, cfg.weight_decay)
    return TrainState(
        student, None, opt, ema_decay=0.0, seed=seed,
        rng_labeled=np.random.default_rng([seed, 0]),
        rng_unlabeled=np.random.default_rng([seed, 1]),
    )


def burn_in(
    source: ClipSource,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    seed: int = 0,
    log_path=None,
    state: TrainState | None = None,
    callback: Callable[[TrainState, LossReport], None] | None = None,
) -> TrainState:
    """Supervised training on labeled clips only."""
    model_cfg = model_cfg or ModelConfig()
    state = state or new_state(model_cfg, cfg, seed)
    h, w = model_cfg.height, model_cfg.width
    stream = sample_batches(source.index, 1.0, cfg.batch_size, state.rng_labeled, burn_in=True)
    metrics = MetricsLog(log_path)
    state.student.train()
    try:
        while state.iteration < cfg.iterations:
            lab, _ = next(stream)
            items = [source.labeled(i, _aff(state.rng_labeled, cfg, h, w)) for i in lab]
            clips = to_tensor([x[0] for x in items])
            out = supervised_loss(state.student, clips, [(x[1], x[2]) for x in items], cfg)
            lr = cosine_lr(cfg.lr, state.iteration, cfg.iterations, cfg.warmup_iters)
            _step(state, out.total, lr, cfg.grad_clip)
            state.iteration += 1
            rep = LossReport(out.l_al.item(), out.l_ac.item(), out.total.item(), 0.0, out.total.item(),
                             out.pos_locations, out.pos_proposals)
            metrics.write({"iteration": state.iteration, "stage": "burn_in", "lr": lr, **rep.as_dict()})
            if callback:
                callback(state, rep)
    finally:
        metrics.close()
    if source.unlabeled_reads:
        raise RuntimeError("burn-in read unlabeled clips")
    return state


# --------------------------------------------------------------------------
# semi-supervised stage


def start_ssad(state: TrainState, cfg: TrainConfig, ssad: SSADConfig) -> TrainState:
    """Copy the burned-in weights into teacher and student and reset the optimizer."""
    student = copy.deepcopy(state.student)
    teacher = copy.deepcopy(state.student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    opt = make_optimizer(student, ssad.lr, cfg.momentum, cfg.weight_decay)
    return TrainState(
        student, teacher, opt, ssad.ema_decay, iteration=0, stage="ssad", seed=state.seed,
        rng_labeled=np.random.default_rng([state.seed, 2]),
        rng_unlabeled=np.random.default_rng([state.seed, 3]),
        class_thresholds=state.class_thresholds,
    )


def pseudo_label(state: TrainState, clip: np.ndarray, left, right, t: float, ssad: SSADConfig) -> PseudoLabelSet:
    """Pseudo targets for one unlabeled clip under the configured strategy."""
    prov = {"teacher_iteration": state.iteration, "strategy": ssad.strategy}
    if ssad.strategy == "interp":
        p = interpolation_labels(left, right, t)
        p.provenance.update(prov)
        return p
    size = (state.teacher.cfg.height, state.teacher.cfg.width)
    boxes, _, scores = teacher_detections(state.teacher, torch.from_numpy(clip[None].astype(np.float32)))
    if ssad.strategy == "tla":
        return tla_from_detections(boxes, scores, left, right, size, prov)
    if ssad.strategy == "hard":
        p = hard_threshold_labels(boxes, scores, ssad.hard_tau, prov)
    elif ssad.strategy == "per-class":
        if state.class_thresholds is None:
            raise ValueError("per-class strategy needs calibrated thresholds")
        p = per_class_threshold_labels(boxes, scores, state.class_thresholds, prov)
    else:
        raise ValueError(f"strategy {ssad.strategy!r} produces no pseudo-labels")
    return temporal_restriction(p, left, right)


def ssad_step(
    state: TrainState,
    source: ClipSource,
    lab: Sequence[int],
    unl: Sequence[int],
    cfg: TrainConfig,
    ssad: SSADConfig,
) -> LossReport:
    """One student update on ``lab`` + ``unl`` followed by the EMA teacher update."""
    h, w = state.student.cfg.height, state.student.cfg.width
    items = [source.labeled(i, _aff(state.rng_labeled, cfg, h, w)) for i in lab]
    clips = to_tensor([x[0] for x in items])
    sup = supervised_loss(state.student, clips, [(x[1], x[2]) for x in items], cfg)
    total = sup.total
    rep = LossReport(sup.l_al.item(), sup.l_ac.item(), sup.total.item(), pos_locations=sup.pos_locations,
                     pos_proposals=sup.pos_proposals)
    if unl and ssad.strategy not in ("ema", "none"):
        uitems = [source.unlabeled(i, _aff(state.rng_unlabeled, cfg, h, w)) for i in unl]
        pseudo = [pseudo_label(state, c, l, r, t, ssad) for c, l, r, t in uitems]
        uns = unsupervised_loss(state.student, to_tensor([x[0] for x in uitems]), pseudo, cfg)
        if uns is not None:
            total = total + ssad.lambda_unsup * uns.total
            rep.l_unsup = uns.total.item()
            rep.unsup_pos_locations = uns.pos_locations
            rep.unsup_pos_proposals = uns.pos_proposals
    lr = cosine_lr(ssad.lr, state.iteration, ssad.iterations, ssad.warmup_iters)
    _step(state, total, lr, cfg.grad_clip)
    ema_update(state.teacher, state.student, state.ema_decay)
    state.iteration += 1
    rep.total = total.item()
    return rep


def run_ssad(
    state: TrainState,
    source: ClipSource,
    cfg: TrainConfig,
    ssad: SSADConfig,
    log_path=None,
    callback: Callable[[TrainState, LossReport], None] | None = None,
) -> TrainState:
    """Semi-supervised stage from a burned-in state (copied, not mutated)."""
    if ssad.strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {ssad.strategy!r}")
    if state.stage != "ssad":
        state = start_ssad(state, cfg, ssad)
    if ssad.strategy == "per-class" and state.class_thresholds is None:
        state.class_thresholds = calibrate_thresholds(state.teacher, source, ssad.target_precision)
    burn = ssad.strategy in ("ema", "none")
    stream = sample_batches(source.index, ssad.ratio, ssad.batch_size, state.rng_labeled,
                            burn_in=False, rng_unlabeled=state.rng_unlabeled)
    if burn:
        # no unlabeled data: keep the labeled share of the batch
        n_lab = int(round(ssad.batch_size * ssad.ratio / (1.0 + ssad.ratio)))
        stream = sample_batches(source.index, 1.0, n_lab, state.rng_labeled, burn_in=True)
    metrics = MetricsLog(log_path)
    state.student.train()
    try:
        while state.iteration < ssad.iterations:
            lab, unl = next(stream)
            rep = ssad_step(state, source, lab, unl, cfg, ssad)
            lr = cosine_lr(ssad.lr, state.iteration - 1, ssad.iterations, ssad.warmup_iters)
            metrics.write({"iteration": state.iteration, "stage": "ssad", "lr": lr, **rep.as_dict()})
            if callback:
                callback(state, rep)
    finally:
        metrics.close()
    return state


# --------------------------------------------------------------------------
# evaluation and calibration


@torch.no_grad()
def predict(
    model: ActionDetector,
    source: ClipSource,
    batch_size: int = 32,
    score_thresh: float = TEACHER_SCORE_THRESH,
    nms_iou: float = TEACHER_NMS_IOU,
    max_actors: int = MAX_ACTORS,
    action_thresh: float = ACTION_SCORE_THRESH,
):
    """Test-time detections for every labeled clip of ``source``: frame id -> detections."""
    model.eval()
    out = {}
    idx = list(range(len(source.index.labeled)))
    for s in range(0, len(idx), batch_size):
        chunk = idx[s:s + batch_size]
        items = [source.labeled(i) for i in chunk]
        dets = model.detect(to_tensor([x[0] for x in items]), score_thresh, nms_iou, max_actors)
        for i, d in zip(chunk, dets):
            c = source.index.labeled[i]
            out[f"{c.video}/{c.frame}"] = cap_detections(d, action_thresh, max_actors)
    return out


def ground_truth(index: DatasetIndex) -> dict:
    return {
        f"{c.video}/{c.frame}": [(Box.from_array(b), l) for b, l in zip(c.annotation.boxes, c.annotation.labels)]
        for c in index.labeled
    }


def evaluate(model: ActionDetector, source: ClipSource, iou_thresh: float = 0.5, **predict_kw) -> EvalResult:
    was_training = model.training
    dets = predict(model, source, **predict_kw)
    if was_training:
        model.train()
    return frame_map(dets, ground_truth(source.index), model.cfg.num_classes, iou_thresh)


@torch.no_grad()
def calibrate_thresholds(model: ActionDetector, source: ClipSource, target_precision: float = 0.5) -> np.ndarray:
    """Per-class score thresholds from the model's detections on labeled data."""
    dets = predict(model, source)
    C = model.cfg.num_classes
    scores = [[] for _ in range(C)]
    tps = [[] for _ in range(C)]
    for c in source.index.labeled:
        frame = f"{c.video}/{c.frame}"
        ann = c.annotation
        for d in dets[frame]:
            ious = pairwise_iou(d.box.as_array()[None], ann.boxes)[0] if len(ann) else np.zeros(0)
            for k in range(C):
                hit = bool(np.any((ious >= 0.5) & (ann.labels[:, k] > 0))) if len(ann) else False
                scores[k].append(d.class_scores[k])
                tps[k].append(hit)
    return calibrate_class_thresholds([np.asarray(s) for s in scores], [np.asarray(t) for t in tps], target_precision)


def checkpoint(state: TrainState, path, model_cfg: ModelConfig, which: str = "student", extra: dict | None = None):
    model = state.student if which == "student" else state.teacher
    save_checkpoint(path, model, {
        "config_hash": model_cfg.digest(), "iteration": state.iteration, "stage": state.stage,
        "model": which, **(extra or {}),
    })
