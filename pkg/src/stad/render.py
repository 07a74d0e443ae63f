"""PNG overlays of pseudo-labels on the centre frame, for inspection."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import CLASS_NAMES

SCALE = 4


def render_pseudo_labels(out_dir: Path, videos: dict, clips, records) -> list[Path]:
    """One image per record; background boxes in grey, labeled boxes in green."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for clip, rec in zip(clips, records):
        frame = videos[clip.video][clip.frame]
        img = Image.fromarray(frame).convert("RGB")
        img = img.resize((img.width * SCALE, img.height * SCALE), Image.NEAREST)
        draw = ImageDraw.Draw(img)
        for box, labels, bg in zip(rec["boxes"], rec["labels"], rec["background"]):
            xy = [v * SCALE for v in box]
            draw.rectangle(xy, outline=(128, 128, 128) if bg else (0, 220, 0), width=2)
            names = ",".join(CLASS_NAMES[k] for k in np.flatnonzero(labels))
            draw.text((xy[0] + 2, xy[1] + 1), names or "bg", fill=(255, 255, 0))
        path = out_dir / f"{clip.video}_{clip.frame:04d}.png"
        img.save(path)
        paths.append(path)
    return paths
