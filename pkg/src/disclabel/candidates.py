"""Per-disc candidate peaks from predicted heatmaps.

Greedy non-maximum suppression: repeatedly take the global maximum above
threshold, suppress a disk around it, stop at the candidate cap. An
optional 3x3 center-of-mass refinement gives sub-pixel peak positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Candidate:
    row: float
    col: float
    score: float


@dataclass
class PeakParams:
    threshold: float = 0.3
    min_separation_px: int = 10
    max_candidates: int = 5
    subpixel: bool = True

    def validate(self) -> None:
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must be in (0,1), got {self.threshold}")
        if self.min_separation_px < 1 or self.max_candidates < 1:
            raise ValueError(f"min_separation_px and max_candidates must be positive: {self}")


@dataclass
class CandidateSet:
    """Candidates per disc, each list sorted by descending score."""

    per_disc: list[list[Candidate]]

    @property
    def num_discs(self) -> int:
        return len(self.per_disc)

    def to_json_obj(self) -> list[dict]:
        return [
            {"disc": i, "row": c.row, "col": c.col, "score": c.score}
            for i, cands in enumerate(self.per_disc)
            for c in cands
        ]

    @classmethod
    def from_json_obj(cls, obj: list[dict], num_discs: int) -> "CandidateSet":
        per_disc: list[list[Candidate]] = [[] for _ in range(num_discs)]
        for entry in obj:
            per_disc[entry["disc"]].append(Candidate(entry["row"], entry["col"], entry["score"]))
        for cands in per_disc:
            cands.sort(key=lambda c: -c.score)
        return cls(per_disc)


def _refine_subpixel(heatmap: np.ndarray, r: int, c: int) -> tuple[float, float]:
    """3x3 center of mass around (r, c); negative mass is clamped to zero."""
    h, w = heatmap.shape
    r0, r1 = max(0, r - 1), min(h, r + 2)
    c0, c1 = max(0, c - 1), min(w, c + 2)
    window = np.maximum(heatmap[r0:r1, c0:c1], 0.0)
    total = window.sum()
    if total <= 0:
        return float(r), float(c)
    rows = np.arange(r0, r1, dtype=np.float64)
    cols = np.arange(c0, c1, dtype=np.float64)
    return (
        float((window.sum(axis=1) @ rows) / total),
        float((window.sum(axis=0) @ cols) / total),
    )


def local_maxima(
    heatmap: np.ndarray,
    threshold: float = 0.3,
    min_separation_px: int = 10,
    max_candidates: int = 5,
    subpixel: bool = True,
) -> list[Candidate]:
    """Extract peaks from one 2D map by greedy non-maximum suppression.

    Repeatedly takes the global maximum at or above ``threshold``,
    records it, and suppresses every pixel within ``min_separation_px``
    (Euclidean, inclusive) of it, until ``max_candidates`` peaks are
    found or no value clears the threshold. Ties break toward the first
    position in row-major order.
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.ndim != 2:
        raise ValueError(f"heatmap must be 2D, got shape {heatmap.shape}")
    work = heatmap.copy()
    h, w = work.shape
    rr = np.arange(h)[:, None]
    cc = np.arange(w)[None, :]
    sep2 = float(min_separation_px) ** 2
    out: list[Candidate] = []
    while len(out) < max_candidates:
        flat = work.argmax()
        r, c = int(flat // w), int(flat % w)
        score = float(work[r, c])
        if score < threshold:
            break
        if subpixel:
            pr, pc = _refine_subpixel(heatmap, r, c)
        else:
            pr, pc = float(r), float(c)
        out.append(Candidate(row=pr, col=pc, score=float(heatmap[r, c])))
        work[(rr - r) ** 2 + (cc - c) ** 2 <= sep2] = -np.inf
    return out


def extract_all(stack: np.ndarray, params: PeakParams | None = None) -> CandidateSet:
    """Apply :func:`local_maxima` to every channel of a (V,H,W) stack.

    Channels with no peak above threshold get an empty list, which
    downstream search treats as an unavailable disc.
    """
    params = params or PeakParams()
    params.validate()
    stack = np.asarray(stack)
    if stack.ndim != 3:
        raise ValueError(f"heatmap stack must be (V,H,W), got shape {stack.shape}")
    return CandidateSet(
        per_disc=[
            local_maxima(
                channel,
                threshold=params.threshold,
                min_separation_px=params.min_separation_px,
                max_candidates=params.max_candidates,
                subpixel=params.subpixel,
            )
            for channel in stack
        ]
    )
