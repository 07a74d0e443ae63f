"""Differentiable loss terms for the localization head, the action head and
the pseudo-label matching cost.

All functions accept tensors (or python scalars) and broadcast over leading
dimensions. Box arguments have a trailing dimension of 4 in ``(x1, y1, x2, y2)``
order. Per-element losses are returned unreduced unless stated otherwise.
"""

from __future__ import annotations

import torch

EPS = 1e-6
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
SMOOTH_L1_BETA = 1.0


def _t(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(EPS, 1.0 - EPS)


def focal_loss(pred_prob, target, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    """Alpha-balanced binary focal loss, elementwise."""
    p = _clamp(_t(pred_prob))
    y = _t(target, p)
    pos = alpha * (1.0 - p) ** gamma * -torch.log(p)
    neg = (1.0 - alpha) * p**gamma * -torch.log(1.0 - p)
    return y * pos + (1.0 - y) * neg


def binary_cross_entropy(pred_prob, target):
    """Elementwise BCE; ``target`` may be soft."""
    p = _clamp(_t(pred_prob))
    y = _t(target, p)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))


def bce_multilabel(pred_probs, target):
    """Mean over the trailing class axis of per-class BCE."""
    return binary_cross_entropy(pred_probs, target).mean(dim=-1)


def centerness_loss(pred_prob, target):
    return binary_cross_entropy(pred_prob, target)


def giou(pred, gt):
    pred, gt = _t(pred), _t(gt)
    gt = gt.to(pred.dtype)
    px1, py1, px2, py2 = pred.unbind(-1)
    gx1, gy1, gx2, gy2 = gt.unbind(-1)
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    iw = (torch.minimum(px2, gx2) - torch.maximum(px1, gx1)).clamp(min=0)
    ih = (torch.minimum(py2, gy2) - torch.maximum(py1, gy1)).clamp(min=0)
    inter = iw * ih
    union = area_p + area_g - inter
    ew = torch.maximum(px2, gx2) - torch.minimum(px1, gx1)
    eh = torch.maximum(py2, gy2) - torch.minimum(py1, gy1)
    enclosing = ew * eh
    return inter / union - (enclosing - union) / enclosing


def giou_loss(pred, gt):
    return 1.0 - giou(pred, gt)


def smooth_l1(pred, gt, beta: float = SMOOTH_L1_BETA):
    """Sum over the 4 coordinates. Callers normalize boxes by image size first."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    pred, gt = _t(pred), _t(gt)
    d = (pred - gt.to(pred.dtype)).abs()
    per = torch.where(d < beta, 0.5 * d**2 / beta, d - 0.5 * beta)
    return per.sum(dim=-1)
