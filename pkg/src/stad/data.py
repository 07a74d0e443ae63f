"""Synthetic sparse-annotated videos, AVA-style CSV I/O and batch sampling.

The synthetic benchmark renders rectangular actors on a noisy background.
Actions are motion patterns (left, right, up, down, oscillate) held over
temporal segments plus one appearance class (large-size), so most classes can
only be told apart with temporal context. Keyframes are annotated once every
``keyframe_interval`` frames; frames in between form the unlabeled pool.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .fileio import atomic_open, atomic_write_text

log = logging.getLogger(__name__)

CLASS_NAMES = ("move-left", "move-right", "move-up", "move-down", "oscillate", "large-size")
LEFT, RIGHT, UP, DOWN, OSCILLATE, LARGE = range(6)


def as_label_matrix(labels, n: int) -> np.ndarray:
    """(n, C) float array; an empty 2-D input keeps its class count."""
    arr = np.asarray(labels, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[0] == n:
        return arr
    return arr.reshape(n, -1) if n else arr.reshape(0, arr.shape[-1] if arr.ndim == 2 else 0)


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_videos: int = 200
    num_test_videos: int = 60
    frames: int = 24
    height: int = 64
    width: int = 64
    num_classes: int = 6
    fps: int = 8
    keyframe_interval: int = 8
    clip_frames: int = 8
    max_actors: int = 3
    actor_size: tuple[float, float] = (10.0, 18.0)
    large_size: tuple[float, float] = (24.0, 30.0)
    speed: tuple[float, float] = (0.8, 1.6)
    segment_frames: tuple[int, int] = (6, 20)
    motion_probs: tuple[float, ...] = (0.40, 0.27, 0.15, 0.10, 0.08)
    diagonal_prob: float = 0.25
    large_prob: float = 0.08
    noise: float = 0.08
    label_dropout: float = 0.05


@dataclass
class KeyframeAnnotation:
    """Boxes in pixels, multi-hot labels and entity ids of one keyframe."""

    frame_time: float
    boxes: np.ndarray  # (M, 4)
    labels: np.ndarray  # (M, C) in {0, 1}
    entity_ids: np.ndarray  # (M,)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = as_label_matrix(self.labels, len(self.boxes))
        self.entity_ids = np.asarray(self.entity_ids, dtype=np.int64).reshape(-1)
        if len(set(self.entity_ids.tolist())) != len(self.entity_ids):
            raise ValueError("entity ids must be unique within a keyframe")

    def __len__(self):
        return len(self.boxes)

    def __eq__(self, other):
        return (
            isinstance(other, KeyframeAnnotation)
            and self.frame_time == other.frame_time
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.entity_ids, other.entity_ids)
        )


@dataclass
class LabeledClip:
    video: str
    frame: int
    annotation: KeyframeAnnotation


@dataclass
class UnlabeledClip:
    video: str
    frame: int
    left: KeyframeAnnotation
    right: KeyframeAnnotation


@dataclass
class DatasetIndex:
    labeled: list[LabeledClip] = field(default_factory=list)
    unlabeled: list[UnlabeledClip] = field(default_factory=list)
    fps: int = 8

    @classmethod
    def from_keyframes(cls, keyframes: dict[str, list[tuple[int, KeyframeAnnotation]]], fps: int):
        """Labeled clips at each keyframe, unlabeled clips strictly between
        consecutive keyframes of the same video."""
        index = cls(fps=fps)
        for video in sorted(keyframes):
            kfs = sorted(keyframes[video], key=lambda kv: kv[0])
            for frame, ann in kfs:
                index.labeled.append(LabeledClip(video, frame, ann))
            for (f0, a0), (f1, a1) in zip(kfs, kfs[1:]):
                for f in range(f0 + 1, f1):
                    index.unlabeled.append(UnlabeledClip(video, f, a0, a1))
        return index

    def keyframes(self) -> dict[str, list[tuple[int, KeyframeAnnotation]]]:
        out: dict[str, list] = {}
        for c in self.labeled:
            out.setdefault(c.video, []).append((c.frame, c.annotation))
        return out


@dataclass
class Actor:
    entity_id: int
    boxes: np.ndarray  # (F, 4)
    labels: np.ndarray  # (F, C)
    intensity: float


@dataclass
class SyntheticScene:
    actors: list[Actor]
    frames: int
    fps: int
    canvas: tuple[int, int]


@dataclass
class SyntheticDataset:
    config: DataConfig
    seed: int
    videos: dict[str, np.ndarray]  # name -> (F, H, W) uint8
    scenes: dict[str, SyntheticScene]
    train: DatasetIndex
    test: DatasetIndex


def _choose_motion(rng: np.random.Generator, cfg: DataConfig) -> list[int]:
    probs = np.asarray(cfg.motion_probs, dtype=np.float64)
    primary = int(rng.choice(5, p=probs / probs.sum()))
    labels = [primary]
    if primary in (LEFT, RIGHT) and rng.random() < cfg.diagonal_prob:
        labels.append(UP if rng.random() < 0.5 else DOWN)
    return labels


def _velocity(labels: list[int], speed: float) -> tuple[float, float]:
    vx = -speed if LEFT in labels else speed if RIGHT in labels else 0.0
    vy = -speed if UP in labels else speed if DOWN in labels else 0.0
    return vx, vy


_FLIP = {LEFT: RIGHT, RIGHT: LEFT, UP: DOWN, DOWN: UP}


def simulate_actor(rng: np.random.Generator, cfg: DataConfig, entity_id: int) -> Actor:
    """Piecewise-constant actions over random segments; a motion that would
    leave the canvas is reflected and relabeled from that frame on."""
    H, W = cfg.height, cfg.width
    large = rng.random() < cfg.large_prob
    lo, hi = cfg.large_size if large else cfg.actor_size
    w, h = rng.uniform(lo, hi), rng.uniform(lo, hi)
    if w > W - 2 or h > H - 2:
        raise ConfigError("actor larger than canvas")
    cx, cy = rng.uniform(w / 2 + 1, W - w / 2 - 1), rng.uniform(h / 2 + 1, H - h / 2 - 1)
    boxes = np.zeros((cfg.frames, 4))
    labels = np.zeros((cfg.frames, cfg.num_classes))
    f = 0
    phase = 0.0
    while f < cfg.frames:
        motion = _choose_motion(rng, cfg)
        speed = rng.uniform(*cfg.speed)
        seg_end = min(cfg.frames, f + int(rng.integers(cfg.segment_frames[0], cfg.segment_frames[1] + 1)))
        anchor = (cx, cy)
        while f < seg_end:
            if motion[0] == OSCILLATE:
                phase += np.pi / 2
                ox = 3.0 * np.sin(phase)
                x, y = anchor[0] + ox, anchor[1]
                x = float(np.clip(x, w / 2, W - w / 2))
            else:
                vx, vy = _velocity(motion, speed)
                x, y = cx + vx, cy + vy
                if not (w / 2 <= x <= W - w / 2) or not (h / 2 <= y <= H - h / 2):
                    motion = [
                        _FLIP[m] if (m in (LEFT, RIGHT) and not w / 2 <= x <= W - w / 2)
                        or (m in (UP, DOWN) and not h / 2 <= y <= H - h / 2) else m
                        for m in motion
                    ]
                    vx, vy = _velocity(motion, speed)
                    x, y = cx + vx, cy + vy
            cx, cy = float(np.clip(x, w / 2, W - w / 2)), float(np.clip(y, h / 2, H - h / 2))
            boxes[f] = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            labels[f, motion] = 1.0
            if large:
                labels[f, LARGE] = 1.0
            f += 1
        if motion[0] == OSCILLATE:
            cx = anchor[0]
    return Actor(entity_id, boxes, labels, float(rng.uniform(0.65, 1.0)))


def rasterize(box, height: int, width: int) -> np.ndarray:
    """Boolean mask of pixels whose centres fall inside ``box``."""
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    mx = (xs >= box[0]) & (xs < box[2])
    my = (ys >= box[1]) & (ys < box[3])
    return my[:, None] & mx[None, :]


def render_scene(scene: SyntheticScene, rng: np.random.Generator, noise: float) -> np.ndarray:
    """(F, H, W) uint8 frames."""
    H, W = scene.canvas
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    gx, gy, base = rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), rng.uniform(0.2, 0.35)
    background = base + gx * xx + gy * yy
    out = np.empty((scene.frames, H, W), dtype=np.uint8)
    stripes = (np.arange(W) // 2) % 2
    for f in range(scene.frames):
        img = background + rng.normal(0.0, noise, size=(H, W))
        for actor in scene.actors:
            m = rasterize(actor.boxes[f], H, W)
            img[m] = actor.intensity - 0.15 * stripes[None, :].repeat(H, 0)[m]
        out[f] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return out


def _annotation(scene: SyntheticScene, frame: int, rng, dropout: float) -> KeyframeAnnotation:
    boxes, labels, ids = [], [], []
    for a in scene.actors:
        lab = a.labels[frame].copy()
        pos = np.flatnonzero(lab)
        if dropout > 0 and len(pos) > 1 and rng.random() < dropout:
            lab[rng.choice(pos)] = 0.0
        boxes.append(a.boxes[frame])
        labels.append(lab)
        ids.append(a.entity_id)
    C = scene.actors[0].labels.shape[1] if scene.actors else 0
    return KeyframeAnnotation(frame / scene.fps, np.reshape(boxes, (-1, 4)), np.reshape(labels, (-1, C)), ids)


def keyframe_indices(cfg: DataConfig) -> list[int]:
    k = cfg.keyframe_interval
    return list(range(k // 2, cfg.frames, k))


def generate_synthetic(cfg: DataConfig | None = None, seed: int = 0) -> SyntheticDataset:
    """Deterministic in ``seed``. Test videos carry complete labels."""
    cfg = cfg or DataConfig()
    if min(cfg.actor_size[1], cfg.large_size[1]) >= min(cfg.height, cfg.width) - 2:
        raise ConfigError("actor larger than canvas")
    if cfg.num_classes != len(CLASS_NAMES):
        raise ConfigError(f"synthetic benchmark defines {len(CLASS_NAMES)} classes")
    rng = np.random.default_rng(seed)
    videos, scenes = {}, {}
    splits = {"train": {}, "test": {}}
    for split, n in (("train", cfg.num_videos), ("test", cfg.num_test_videos)):
        for v in range(n):
            name = f"{split}_{v:04d}"
            n_act = int(rng.integers(1, cfg.max_actors + 1))
            actors = [simulate_actor(rng, cfg, e) for e in range(n_act)]
            scene = SyntheticScene(actors, cfg.frames, cfg.fps, (cfg.height, cfg.width))
            scenes[name] = scene
            videos[name] = render_scene(scene, rng, cfg.noise)
            dropout = cfg.label_dropout if split == "train" else 0.0
            splits[split][name] = [
                (f, _annotation(scene, f, rng, dropout)) for f in keyframe_indices(cfg)
            ]
    return SyntheticDataset(
        cfg, seed, videos, scenes,
        DatasetIndex.from_keyframes(splits["train"], cfg.fps),
        DatasetIndex.from_keyframes(splits["test"], cfg.fps),
    )


def class_histogram(index: DatasetIndex, num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for c in index.labeled:
        counts += c.annotation.labels.sum(axis=0).astype(np.int64)
    return counts


# --------------------------------------------------------------------------
# clips and augmentation


def extract_clip(video: np.ndarray, frame: int, length: int = 8) -> np.ndarray:
    """``length`` frames with ``frame`` at index ``length // 2``, zero-padded
    beyond the video ends. Returns float32 in [0, 1], shape (T, H, W)."""
    n = video.shape[0]
    out = np.zeros((length,) + video.shape[1:], dtype=np.float32)
    start = frame - length // 2
    for k in range(length):
        f = start + k
        if 0 <= f < n:
            out[k] = video[f]
    return out / 255.0


@dataclass
class Affine:
    """Resize by ``(sx, sy)`` then crop at integer offset ``(ox, oy)``."""

    sx: float = 1.0
    sy: float = 1.0
    ox: int = 0
    oy: int = 0

    @property
    def identity(self) -> bool:
        return self.sx == 1.0 and self.sy == 1.0 and self.ox == 0 and self.oy == 0

    def apply(self, boxes, width: int, height: int, min_size: float = 2.0):
        """Transformed boxes clipped to the crop, and a mask of boxes that
        keep at least ``min_size`` pixels on both sides."""
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        b = b * np.array([self.sx, self.sy, self.sx, self.sy])
        b = b - np.array([self.ox, self.oy, self.ox, self.oy], dtype=np.float64)
        b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, width)
        b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, height)
        keep = ((b[:, 2] - b[:, 0]) >= min_size) & ((b[:, 3] - b[:, 1]) >= min_size)
        return b, keep


def random_affine(rng: np.random.Generator, height: int, width: int, band: float = 0.25) -> Affine:
    """Upscale the shorter side by a random factor in ``[1, 1 + band]`` and
    take a random crop back to ``(height, width)``."""
    short = min(height, width)
    target = int(rng.integers(short, int(round(short * (1 + band))) + 1))
    s = target / short
    nh, nw = int(round(height * s)), int(round(width * s))
    oy = int(rng.integers(0, nh - height + 1))
    ox = int(rng.integers(0, nw - width + 1))
    return Affine(nw / width, nh / height, ox, oy)


def apply_affine_clip(clip: np.ndarray, aff: Affine) -> np.ndarray:
    """``clip`` is (T, H, W)."""
    if aff.identity:
        return clip
    T, H, W = clip.shape
    size = (int(round(H * aff.sy)), int(round(W * aff.sx)))
    big = F.interpolate(torch.from_numpy(clip)[:, None], size=size, mode="bilinear", align_corners=False)
    return big[:, 0, aff.oy:aff.oy + H, aff.ox:aff.ox + W].numpy().copy()


# --------------------------------------------------------------------------
# sampling


def sample_batches(
    index: DatasetIndex,
    ratio: float,
    batch_size: int,
    rng: np.random.Generator,
    burn_in: bool = False,
    rng_unlabeled: np.random.Generator | None = None,
) -> Iterator[tuple[list[int], list[int]]]:
    """Endless stream of (labeled indices, unlabeled indices).

    ``ratio`` is labeled:unlabeled, so 1.0 splits a batch evenly. In burn-in
    mode the whole batch is labeled and the unlabeled pool is never touched.
    Each pool is reshuffled per epoch, so every clip is drawn once per epoch.
    """
    if burn_in:
        n_lab, n_unl = batch_size, 0
    else:
        n_lab = int(round(batch_size * ratio / (1.0 + ratio)))
        n_unl = batch_size - n_lab
    rng_u = rng_unlabeled if rng_unlabeled is not None else rng
    lab_stream = _epoch_stream(len(index.labeled), rng)
    unl_stream = _epoch_stream(len(index.unlabeled), rng_u) if n_unl else None
    while True:
        lab = [next(lab_stream) for _ in range(n_lab)]
        unl = [next(unl_stream) for _ in range(n_unl)] if unl_stream else []
        yield lab, unl


def _epoch_stream(n: int, rng: np.random.Generator) -> Iterator[int]:
    if n == 0:
        raise ValueError("cannot sample from an empty pool")
    while True:
        yield from rng.permutation(n).tolist()


# --------------------------------------------------------------------------
# AVA-style CSV


def write_ava_csv(path, index: DatasetIndex, image_size: tuple[int, int]) -> None:
    """One row per (box, positive class); action ids are 1-based."""
    h, w = image_size
    norm = np.array([w, h, w, h], dtype=np.float64)
    with atomic_open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for clip in index.labeled:
            ann = clip.annotation
            for box, lab, eid in zip(ann.boxes, ann.labels, ann.entity_ids):
                nb = box / norm
                for c in np.flatnonzero(lab):
                    writer.writerow(
                        [clip.video, repr(float(ann.frame_time))]
                        + [repr(float(v)) for v in nb]
                        + [int(c) + 1, int(eid)]
                    )


def load_ava_csv(path, image_size: tuple[int, int] = (64, 64), num_classes: int = 6, fps: int = 8) -> DatasetIndex:
    """Parse ``video_id,timestamp,x1,y1,x2,y2,action_id,entity_id`` rows.

    Coordinates are normalized to [0, 1]; out-of-range values are clamped with
    a warning. Rows sharing (video, timestamp, entity) merge into one
    multi-hot entry.
    """
    h, w = image_size
    scale = np.array([w, h, w, h], dtype=np.float64)
    groups: dict[tuple[str, float], dict[int, list]] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 8:
                raise ValueError(f"{path}: row {lineno}: expected 8 fields, got {len(row)}")
            try:
                video = row[0].strip()
                ts = float(row[1])
                coords = np.array([float(v) for v in row[2:6]])
                action = int(row[6])
                entity = int(row[7])
            except ValueError as exc:
                raise ValueError(f"{path}: row {lineno}: {exc}") from None
            if not 1 <= action <= num_classes:
                raise ValueError(f"{path}: row {lineno}: action id {action} out of range")
            if np.any((coords < 0) | (coords > 1)):
                log.warning("%s: row %d: coordinates outside [0, 1] clamped", path, lineno)
                coords = np.clip(coords, 0.0, 1.0)
            box = coords * scale
            entry = groups.setdefault((video, ts), {}).setdefault(entity, [box, np.zeros(num_classes)])
            entry[1][action - 1] = 1.0
    keyframes: dict[str, list] = {}
    for (video, ts), entities in groups.items():
        ids = list(entities)
        ann = KeyframeAnnotation(
            ts,
            np.reshape([entities[e][0] for e in ids], (-1, 4)),
            np.reshape([entities[e][1] for e in ids], (-1, num_classes)),
            ids,
        )
        keyframes.setdefault(video, []).append((int(round(ts * fps)), ann))
    return DatasetIndex.from_keyframes(keyframes, fps)


# --------------------------------------------------------------------------
# persistence


def save_dataset(ds: SyntheticDataset, out_dir, extra: dict | None = None) -> Path:
    """Raw uint8 frames per video, annotation CSVs and a JSON manifest."""
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    cfg = ds.config
    for name, frames in ds.videos.items():
        frames.tofile(out / "videos" / f"{name}.u8")
    write_ava_csv(out / "train.csv", ds.train, (cfg.height, cfg.width))
    write_ava_csv(out / "test.csv", ds.test, (cfg.height, cfg.width))
    manifest = {
        "seed": ds.seed,
        "dtype": "uint8",
        "fps": cfg.fps,
        "shape": [cfg.frames, cfg.height, cfg.width],
        "videos": sorted(ds.videos),
        "config": asdict(cfg),
        **(extra or {}),
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2))
    return out


@dataclass
class LoadedDataset:
    config: DataConfig
    seed: int
    videos: dict[str, np.ndarray]
    train: DatasetIndex
    test: DatasetIndex


def load_dataset(path) -> LoadedDataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    raw = manifest["config"]
    cfg = DataConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    shape = tuple(manifest["shape"])
    videos = {
        name: np.fromfile(root / "videos" / f"{name}.u8", dtype=np.uint8).reshape(shape)
        for name in manifest["videos"]
    }
    size = (cfg.height, cfg.width)
    return LoadedDataset(
        cfg, manifest["seed"], videos,
        load_ava_csv(root / "train.csv", size, cfg.num_classes, cfg.fps),
        load_ava_csv(root / "test.csv", size, cfg.num_classes, cfg.fps),
    )
