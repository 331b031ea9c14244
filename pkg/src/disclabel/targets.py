"""Network inputs and V-channel Gaussian ground-truth heatmaps.

A labeled case pairs a normalized sagittal image with up to V annotated
disc positions; invisible discs carry no position and are filtered out
of the loss downstream via the visibility flags.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .ndat import read_ndat, write_ndat

DEFAULT_NUM_DISCS = 11
DEFAULT_RADIUS = 10


@dataclass
class LabeledCase:
    """One 2D image with per-disc annotations.

    Attributes:
        image: H x W float array, values in [0, 1] after normalization.
        spacing_mm: physical pixel size as (row_mm, col_mm).
        disc_positions: V entries of (row, col) or None for missing discs.
        visibility: V booleans; False exactly where the position is None.
    """

    image: np.ndarray
    spacing_mm: tuple[float, float]
    disc_positions: list[tuple[float, float] | None]
    visibility: list[bool] = field(default_factory=list)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 2:
            raise ValueError(f"case image must be 2D, got shape {self.image.shape}")
        derived = [p is not None for p in self.disc_positions]
        if not self.visibility:
            self.visibility = derived
        elif list(self.visibility) != derived:
            raise ValueError("visibility flags disagree with missing disc positions")

    @property
    def num_discs(self) -> int:
        return len(self.disc_positions)


@dataclass
class HeatmapStack:
    """V probability-like maps plus per-channel visibility flags."""

    maps: np.ndarray  # (V, H, W) float32 in [0, 1]
    visibility: np.ndarray  # (V,) bool

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float32)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.maps.ndim != 3 or self.maps.shape[0] != self.visibility.shape[0]:
            raise ValueError(
                f"heatmap stack shape {self.maps.shape} inconsistent with visibility {self.visibility.shape}"
            )


def average_slices(volume: np.ndarray, center_index: int, count: int = 6) -> np.ndarray:
    """Average ``count`` slices of a (D, H, W) volume centered at ``center_index``.

    The window is clamped at the volume borders, so thin volumes average
    whatever slices exist inside the window.
    """
    volume = np.asarray(volume, dtype=np.float32)
    if volume.ndim != 3 or volume.shape[0] < 1:
        raise ValueError(f"volume must be (D,H,W) with D >= 1, got shape {volume.shape}")
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    lo = max(0, center_index - (count - 1) // 2)
    hi = min(volume.shape[0], center_index + count // 2 + 1)
    if hi <= lo:
        lo, hi = max(0, min(center_index, volume.shape[0] - 1)), max(1, min(center_index + 1, volume.shape[0]))
    return volume[lo:hi].mean(axis=0)


def normalize01(image: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1] as (x - min)/(max - min); constant images map to zeros."""
    image = np.asarray(image, dtype=np.float32)
    lo = float(image.min())
    hi = float(image.max())
    if hi == lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def make_target(case: LabeledCase, radius: int = DEFAULT_RADIUS, sigma: float | None = None) -> HeatmapStack:
    """Build the V-channel Gaussian target stack for one case.

    Each visible channel holds a Gaussian bump of peak value 1.0 centered
    at the annotated pixel, truncated to zero beyond ``radius`` pixels.
    Invisible channels are identically zero.

    Args:
        case: the labeled case; annotations must lie inside the image.
        radius: truncation radius in pixels.
        sigma: Gaussian width; defaults to radius/3 so the bump
            effectively vanishes at the truncation boundary.
    """
    if sigma is None:
        sigma = radius / 3.0
    h, w = case.image.shape
    v = case.num_discs
    maps = np.zeros((v, h, w), dtype=np.float32)
    rr = np.arange(h, dtype=np.float32)
    cc = np.arange(w, dtype=np.float32)
    for i, pos in enumerate(case.disc_positions):
        if pos is None:
            continue
        r0, c0 = int(round(pos[0])), int(round(pos[1]))
        if not (0 <= r0 < h and 0 <= c0 < w):
            raise ValueError(f"disc {i} annotation {pos} lies outside the {h}x{w} image")
        d2 = (rr[:, None] - r0) ** 2 + (cc[None, :] - c0) ** 2
        bump = np.exp(-d2 / (2.0 * sigma * sigma))
        bump[d2 > radius * radius] = 0.0
        maps[i] = bump
    return HeatmapStack(maps=maps, visibility=np.array(case.visibility, dtype=bool))


def resize_bilinear(image: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2D image to (H, W), pixel-center aligned."""
    image = np.asarray(image, dtype=np.float32)
    ih, iw = image.shape
    oh, ow = out_shape
    if (ih, iw) == (oh, ow):
        return image.copy()
    rows = np.clip((np.arange(oh) + 0.5) * ih / oh - 0.5, 0, ih - 1)
    cols = np.clip((np.arange(ow) + 0.5) * iw / ow - 0.5, 0, iw - 1)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, ih - 1)
    c1 = np.minimum(c0 + 1, iw - 1)
    fr = (rows - r0).astype(np.float32)[:, None]
    fc = (cols - c0).astype(np.float32)[None, :]
    top = image[np.ix_(r0, c0)] * (1 - fc) + image[np.ix_(r0, c1)] * fc
    bot = image[np.ix_(r1, c0)] * (1 - fc) + image[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def resize_case(case: LabeledCase, out_shape: tuple[int, int]) -> LabeledCase:
    """Resize a case to ``out_shape``, scaling annotations and spacing with it."""
    ih, iw = case.image.shape
    oh, ow = out_shape
    sr, sc = oh / ih, ow / iw
    positions: list[tuple[float, float] | None] = []
    for pos in case.disc_positions:
        if pos is None:
            positions.append(None)
        else:
            positions.append(((pos[0] + 0.5) * sr - 0.5, (pos[1] + 0.5) * sc - 0.5))
    return LabeledCase(
        image=resize_bilinear(case.image, out_shape),
        spacing_mm=(case.spacing_mm[0] / sr, case.spacing_mm[1] / sc),
        disc_positions=positions,
    )


def save_case(case: LabeledCase, image_path: str | os.PathLike) -> None:
    """Write a case as an NDAT image plus a JSON annotation sidecar."""
    write_ndat(image_path, case.image)
    sidecar = {
        "spacing_mm": [float(case.spacing_mm[0]), float(case.spacing_mm[1])],
        "discs": [
            [float(p[0]), float(p[1])] if p is not None else None for p in case.disc_positions
        ],
    }
    side_path = os.fspath(image_path) + ".json"
    tmp = side_path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    os.replace(tmp, side_path)


def load_case(image_path: str | os.PathLike) -> LabeledCase:
    """Load a case written by :func:`save_case`."""
    image = read_ndat(image_path)
    with open(os.fspath(image_path) + ".json") as fh:
        sidecar = json.load(fh)
    positions = [tuple(p) if p is not None else None for p in sidecar["discs"]]
    return LabeledCase(
        image=image,
        spacing_mm=tuple(sidecar["spacing_mm"]),
        disc_positions=positions,
    )
