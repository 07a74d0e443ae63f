"""The detector network: a small 3D-convolutional trunk, a keyframe feature
pyramid, a dense anchor-free localization head and an ROI action head."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import roi_align

from .assignment import DEFAULT_PYRAMID, PyramidSpec, level_locations
from .fileio import atomic_open
from .geometry import Box, Detection, clip_boxes, nms_indices


@dataclass
class ModelConfig:
    frames: int = 8
    height: int = 64
    width: int = 64
    in_channels: int = 1
    num_classes: int = 6
    widths: tuple[int, ...] = (16, 32, 64, 128)
    fpn_width: int = 64
    roi_size: int = 7
    prior_prob: float = 0.01

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


@dataclass
class BackboneFeatures:
    c3: torch.Tensor  # (B, C, H/4, W/4), keyframe slice
    c4: torch.Tensor  # (B, C, H/8, W/8), keyframe slice
    c5: torch.Tensor  # (B, C, T, H/16, W/16)


@dataclass
class DensePredictions:
    """Head outputs concatenated over pyramid levels (level-major, row-major)."""

    actorness: torch.Tensor  # (B, L) logits
    regression: torch.Tensor  # (B, L, 4) l, t, r, b in pixels, positive
    centerness: torch.Tensor  # (B, L) logits
    locations: torch.Tensor  # (L, 2) x, y pixel centres
    level_slices: list[slice] = field(default_factory=list)

    @property
    def num_locations(self) -> int:
        return self.locations.shape[0]

    def boxes(self) -> torch.Tensor:
        x, y = self.locations[:, 0], self.locations[:, 1]
        l, t, r, b = self.regression.unbind(-1)
        return torch.stack([x - l, y - t, x + r, y + b], dim=-1)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch // 4), ch)


class Backbone(nn.Module):
    """Four conv stages, spatial stride 2 each, temporal stride 1."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        stages = []
        cin = cfg.in_channels
        for cout in cfg.widths:
            stages.append(
                nn.Sequential(
                    nn.Conv3d(cin, cout, 3, stride=(1, 2, 2), padding=1, bias=False),
                    _norm(cout),
                    nn.ReLU(inplace=True),
                )
            )
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.key = cfg.frames // 2

    def forward(self, clips: torch.Tensor) -> BackboneFeatures:
        outs = []
        x = clips
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return BackboneFeatures(
            c3=outs[1][:, :, self.key], c4=outs[2][:, :, self.key], c5=outs[3]
        )


class FPN(nn.Module):
    def __init__(self, c3_ch: int, c4_ch: int, width: int):
        super().__init__()
        self.lateral3 = nn.Conv2d(c3_ch, width, 1)
        self.lateral4 = nn.Conv2d(c4_ch, width, 1)
        self.down5 = nn.Conv2d(width, width, 3, stride=2, padding=1)

    def forward(self, c3, c4):
        p4 = self.lateral4(c4)
        p3 = self.lateral3(c3) + F.interpolate(p4, size=c3.shape[-2:], mode="nearest")
        p5 = self.down5(p4)
        return p3, p4, p5


class LocalizationHead(nn.Module):
    """Shared across levels. Distances are ``stride * exp(scale_k * x)``."""

    def __init__(self, width: int, num_levels: int, prior_prob: float):
        super().__init__()
        self.tower = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1), _norm(width), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1), _norm(width), nn.ReLU(inplace=True),
        )
        self.actorness = nn.Conv2d(width, 1, 1)
        self.regression = nn.Conv2d(width, 4, 1)
        self.centerness = nn.Conv2d(width, 1, 1)
        self.scales = nn.Parameter(torch.ones(num_levels))
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)
        nn.init.constant_(self.actorness.bias, -math.log((1 - prior_prob) / prior_prob))

    def forward(self, feats, strides):
        act, reg, ctr = [], [], []
        for k, (p, s) in enumerate(zip(feats, strides)):
            h = self.tower(p)
            act.append(self.actorness(h).flatten(1))
            r = self.regression(h) * self.scales[k]
            r = s * torch.exp(r.clamp(max=8.0))
            reg.append(r.flatten(2).transpose(1, 2))
            ctr.append(self.centerness(h).flatten(1))
        return torch.cat(act, 1), torch.cat(reg, 1), torch.cat(ctr, 1)


class ActionHead(nn.Module):
    """Temporal mean pool, ROI-align, spatial mean pool, one linear layer."""

    def __init__(self, channels: int, num_classes: int, roi_size: int, stride: int):
        super().__init__()
        self.roi_size = roi_size
        self.scale = 1.0 / stride
        self.fc = nn.Linear(channels, num_classes)
        nn.init.xavier_uniform_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def roi_features(self, c5: torch.Tensor, boxes: list[torch.Tensor]) -> torch.Tensor:
        pooled = c5.mean(dim=2)
        rois = [b.to(pooled.dtype).reshape(-1, 4) for b in boxes]
        if sum(len(r) for r in rois) == 0:
            return pooled.new_zeros((0, pooled.shape[1]))
        feats = roi_align(
            pooled, rois, output_size=self.roi_size, spatial_scale=self.scale,
            sampling_ratio=1, aligned=True,
        )
        return feats.mean(dim=(2, 3))

    def forward(self, c5: torch.Tensor, boxes: list[torch.Tensor]) -> torch.Tensor:
        return self.fc(self.roi_features(c5, boxes))


class ActionDetector(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, pyramid: PyramidSpec = DEFAULT_PYRAMID):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.pyramid = pyramid
        w = self.cfg.widths
        self.backbone = Backbone(self.cfg)
        self.fpn = FPN(w[1], w[2], self.cfg.fpn_width)
        self.loc_head = LocalizationHead(self.cfg.fpn_width, len(pyramid.levels), self.cfg.prior_prob)
        self.action_head = ActionHead(w[3], self.cfg.num_classes, self.cfg.roi_size, 16)
        sizes = pyramid.feature_sizes(self.cfg.height, self.cfg.width)
        locs, slices, start = [], [], 0
        for s, (fh, fw) in zip(pyramid.strides, sizes):
            pts = level_locations(s, fh, fw)
            locs.append(pts)
            slices.append(slice(start, start + len(pts)))
            start += len(pts)
        self.register_buffer("locations", torch.as_tensor(np.concatenate(locs), dtype=torch.float32), persistent=False)
        self.level_slices = slices

    def check_input(self, clips: torch.Tensor):
        c = self.cfg
        expected = (c.in_channels, c.frames, c.height, c.width)
        if clips.dim() != 5 or tuple(clips.shape[1:]) != expected:
            raise ValueError(f"clip shape {tuple(clips.shape)} does not match (B, {expected})")

    def forward(self, clips: torch.Tensor) -> tuple[BackboneFeatures, DensePredictions]:
        """``clips`` is ``(B, ch, T, H, W)`` with values in [0, 1]."""
        self.check_input(clips)
        feats = self.backbone(clips)
        pyramid = self.fpn(feats.c3, feats.c4)
        act, reg, ctr = self.loc_head(pyramid, self.pyramid.strides)
        return feats, DensePredictions(act, reg, ctr, self.locations, self.level_slices)

    @torch.no_grad()
    def detect(self, clips: torch.Tensor, score_thresh=0.4, nms_iou=0.3, max_n=10) -> list[list[Detection]]:
        """Test-time inference: decode, NMS, classify surviving boxes."""
        feats, preds = self(clips)
        boxes, scores = decode_batch(preds, score_thresh, max_n, True, nms_iou, self.cfg.width, self.cfg.height)
        probs = torch.sigmoid(self.action_head(feats.c5, [torch.as_tensor(b) for b in boxes]))
        probs = probs.double().numpy()
        out, k = [], 0
        for b, s in zip(boxes, scores):
            out.append([
                Detection(Box.from_array(b[i]), float(s[i]), probs[k + i]) for i in range(len(b))
            ])
            k += len(b)
        return out


def decode_batch(
    preds: DensePredictions,
    score_thresh: float,
    max_n: int,
    apply_nms: bool,
    nms_iou: float = 0.3,
    width: float = 64,
    height: float = 64,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-clip (boxes, scores) arrays; score = actorness * centerness."""
    scores = (torch.sigmoid(preds.actorness) * torch.sigmoid(preds.centerness)).detach()
    boxes = preds.boxes().detach()
    out_b, out_s = [], []
    for i in range(scores.shape[0]):
        keep = torch.nonzero(scores[i] >= score_thresh).flatten()
        s = scores[i, keep].double().numpy()
        b = clip_boxes(boxes[i, keep].double().numpy(), width, height)
        order = np.argsort(-s, kind="stable")
        b, s = b[order], s[order]
        if apply_nms and len(b):
            kept = nms_indices(b, s, nms_iou)
            b, s = b[kept], s[kept]
        out_b.append(b[:max_n])
        out_s.append(s[:max_n])
    return out_b, out_s


def decode_proposals(
    preds: DensePredictions,
    score_thresh: float,
    max_n: int,
    apply_nms: bool,
    nms_iou: float = 0.3,
    image_size: tuple[int, int] = (64, 64),
) -> list[Detection]:
    """Decode the first clip of ``preds`` into detections (no class scores)."""
    if not (0 < score_thresh < 1 and 0 < nms_iou < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    h, w = image_size
    boxes, scores = decode_batch(preds, score_thresh, max_n, apply_nms, nms_iou, w, h)
    return [Detection(Box.from_array(b), float(s)) for b, s in zip(boxes[0], scores[0])]


def save_checkpoint(path, model: nn.Module, manifest: dict) -> None:
    """Write parameters and a JSON manifest into one ``.npz`` archive atomically."""
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = dict(manifest)
    meta["shapes"] = {k: list(v.shape) for k, v in arrays.items()}
    arrays["__manifest__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with atomic_open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, model: nn.Module | None = None) -> tuple[dict, dict]:
    """Returns ``(manifest, state)``; loads into ``model`` when given."""
    with np.load(path) as z:
        manifest = json.loads(bytes(z["__manifest__"]).decode())
        state = {k: torch.from_numpy(z[k].copy()) for k in z.files if k != "__manifest__"}
    for k, shape in manifest.get("shapes", {}).items():
        if list(state[k].shape) != shape:
            raise ValueError(f"shape mismatch for {k}")
    if model is not None:
        model.load_state_dict(state)
    return manifest, state
