"""Static overlay rendering: predictions, ground truth, heatmaps as PNGs."""

from __future__ import annotations

import os
import tempfile

import numpy as np
from PIL import Image, ImageDraw

from .skeleton import LabelingResult
from .targets import LabeledCase

PRED_COLOR = (255, 64, 64)
TRUTH_COLOR = (64, 255, 64)


def _to_rgb(image: np.ndarray) -> Image.Image:
    gray = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    arr = (gray * 255.0).astype(np.uint8)
    return Image.merge("RGB", [Image.fromarray(arr)] * 3)


def blend_heatmap(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.6) -> Image.Image:
    """Alpha-blend a [0,1] heatmap as red over the grayscale image."""
    base = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    hm = np.clip(np.asarray(heatmap, dtype=np.float32), 0.0, 1.0)
    a = alpha * hm
    rgb = np.stack([base * (1 - a) + a, base * (1 - a), base * (1 - a)], axis=-1)
    return Image.fromarray((rgb * 255.0).astype(np.uint8), mode="RGB")


def render_overlay(
    image: np.ndarray,
    pred: LabelingResult | None = None,
    truth: LabeledCase | None = None,
    heatmap: np.ndarray | None = None,
) -> Image.Image:
    """Mark predicted discs as crosses and true discs as circles."""
    img = blend_heatmap(image, heatmap) if heatmap is not None else _to_rgb(image)
    draw = ImageDraw.Draw(img)
    if truth is not None:
        for pos in truth.disc_positions:
            if pos is None:
                continue
            r, c = pos
            draw.ellipse([c - 4, r - 4, c + 4, r + 4], outline=TRUTH_COLOR, width=1)
    if pred is not None:
        for pos in pred.positions:
            if pos is None:
                continue
            r, c = pos
            draw.line([c - 4, r, c + 4, r], fill=PRED_COLOR, width=1)
            draw.line([c, r - 4, c, r + 4], fill=PRED_COLOR, width=1)
    return img


def save_png_atomic(img: Image.Image, path: str | os.PathLike) -> None:
    path = os.fspath(path)
    dirname = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".png.tmp")
    os.close(fd)
    try:
        img.save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
