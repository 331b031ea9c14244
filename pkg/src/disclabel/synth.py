"""Deterministic synthetic spine images with exact ground truth.

Each case draws bright anisotropic disc blobs (wider than tall) along a
smoothly curved column, a parallel dimmer column of larger blobs that
mimics vertebral bodies (so false-positive suppression has something to
suppress), plus background texture and noise. Generation is pure in
(seed, index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .targets import DEFAULT_NUM_DISCS, LabeledCase, normalize01

# discs 1 and 5 anchor and scale the skeleton prior, so the generator
# never drops them
_PROTECTED_DISCS = (0, 4)


@dataclass
class SynthConfig:
    image_size: tuple[int, int] = (64, 64)
    num_discs: int = DEFAULT_NUM_DISCS
    spacing_px: float = 9.0
    spacing_jitter_px: float = 1.0
    curvature_px: float = 3.0
    blob_intensity: float = 1.0
    blob_sigma: tuple[float, float] = (1.2, 2.4)  # (row, col): wider than tall
    distractor_intensity: float = 0.55
    distractor_offset_px: float = 10.0
    noise_level: float = 0.03
    missing_prob: float = 0.0
    spacing_mm: tuple[float, float] = (1.0, 1.0)
    seed: int = 0

    def validate(self) -> None:
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ValueError(f"image size too small: {self.image_size}")
        if self.num_discs < 2:
            raise ValueError(f"need at least 2 discs, got {self.num_discs}")
        if not (0.0 <= self.missing_prob < 1.0):
            raise ValueError(f"missing_prob must be in [0,1), got {self.missing_prob}")


def _add_blob(image: np.ndarray, r: float, c: float, sigma_r: float, sigma_c: float, amp: float) -> None:
    h, w = image.shape
    rr = np.arange(h, dtype=np.float64)[:, None]
    cc = np.arange(w, dtype=np.float64)[None, :]
    image += amp * np.exp(-((rr - r) ** 2 / (2 * sigma_r**2) + (cc - c) ** 2 / (2 * sigma_c**2)))


def generate_case(cfg: SynthConfig, index: int) -> LabeledCase:
    """Generate one labeled case, deterministic per (cfg.seed, index)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.image_size
    v = cfg.num_discs

    margin = 3.0 + 3.0 * max(cfg.blob_sigma)
    span = (v - 1) * cfg.spacing_px
    r0 = (h - span) / 2.0
    if r0 < margin or r0 + span > h - margin:
        raise ValueError(
            f"{v} discs at spacing {cfg.spacing_px}px do not fit a {h}px-tall image with margin {margin:.1f}"
        )

    phase = rng.uniform(0.0, 2.0 * np.pi)
    jitter = rng.uniform(-cfg.spacing_jitter_px, cfg.spacing_jitter_px, size=v)
    col_jitter = rng.uniform(-cfg.spacing_jitter_px, cfg.spacing_jitter_px, size=v) * 0.5
    dropped = rng.random(v) < cfg.missing_prob
    dropped[list(_PROTECTED_DISCS)] = False

    rows = r0 + np.arange(v) * cfg.spacing_px + jitter
    t = np.arange(v) / max(1, v - 1)
    cols = w / 2.0 + cfg.curvature_px * np.sin(np.pi * t + phase) + col_jitter

    if rows.min() < 1 or rows.max() > h - 2 or cols.min() < 1 or cols.max() > w - 2:
        raise ValueError("generated disc positions fall outside the image bounds")

    image = np.zeros((h, w), dtype=np.float64)
    sr, sc = cfg.blob_sigma

    # vertebral-body distractor column: larger, dimmer blobs between disc levels
    side = 1.0 if rng.random() < 0.5 else -1.0
    for i in range(v - 1):
        mid_r = (rows[i] + rows[i + 1]) / 2.0
        mid_c = (cols[i] + cols[i + 1]) / 2.0 + side * cfg.distractor_offset_px
        if 0 <= mid_c <= w - 1:
            _add_blob(image, mid_r, mid_c, sr * 2.0, sc * 1.6, cfg.distractor_intensity)

    for i in range(v):
        if not dropped[i]:
            _add_blob(image, rows[i], cols[i], sr, sc, cfg.blob_intensity)

    if cfg.noise_level > 0:
        image += rng.normal(0.0, cfg.noise_level, size=(h, w))

    positions: list[tuple[float, float] | None] = [
        None if dropped[i] else (float(rows[i]), float(cols[i])) for i in range(v)
    ]
    return LabeledCase(
        image=normalize01(image),
        spacing_mm=cfg.spacing_mm,
        disc_positions=positions,
    )


def generate_dataset(cfg: SynthConfig, count: int) -> list[LabeledCase]:
    return [generate_case(cfg, i) for i in range(count)]
