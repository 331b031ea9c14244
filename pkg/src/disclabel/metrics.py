"""Evaluation metrics: distance to target, FPR and FNR at a mm tolerance.

A prediction for a disc counts as a false positive when it lands at
least ``tol_mm`` (Euclidean, in physical units) from that disc's ground
truth; the ground truth disc is then also a false negative. Matched
pairs contribute their absolute superior-inferior (row axis) distance in
mm, with the full 2D distance kept as a secondary column. FPR is a
percentage of emitted predictions, FNR a percentage of ground-truth
discs; means and standard deviations pool the matched pairs only.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

from .skeleton import LabelingResult
from .targets import LabeledCase

DEFAULT_TOL_MM = 5.0


@dataclass
class CaseScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    si_distances_mm: list[float] = field(default_factory=list)
    l2_distances_mm: list[float] = field(default_factory=list)

    @property
    def num_predictions(self) -> int:
        return self.tp + self.fp

    @property
    def num_ground_truth(self) -> int:
        return self.tp + self.fn


@dataclass
class EvalReport:
    mean_distance_mm: float
    std_distance_mm: float
    mean_l2_mm: float
    std_l2_mm: float
    fpr_pct: float
    fnr_pct: float
    tp: int
    fp: int
    fn: int
    num_cases: int


def match_and_score(pred: LabelingResult, gt: LabeledCase, tol_mm: float = DEFAULT_TOL_MM) -> CaseScore:
    """Score one case's predictions against its ground truth annotations."""
    mr, mc = gt.spacing_mm
    if mr is None or mc is None or mr <= 0 or mc <= 0:
        raise ValueError(f"ground truth case lacks a valid pixel spacing: {gt.spacing_mm}")
    if len(pred.positions) != gt.num_discs:
        raise ValueError(
            f"prediction has {len(pred.positions)} discs, ground truth has {gt.num_discs}"
        )
    score = CaseScore()
    for p, g in zip(pred.positions, gt.disc_positions):
        if p is None and g is None:
            continue
        if p is None:
            score.fn += 1
            continue
        if g is None:
            score.fp += 1
            continue
        d2 = math.hypot((p[0] - g[0]) * mr, (p[1] - g[1]) * mc)
        if d2 >= tol_mm:
            score.fp += 1
            score.fn += 1
        else:
            score.tp += 1
            score.si_distances_mm.append(abs(p[0] - g[0]) * mr)
            score.l2_distances_mm.append(d2)
    return score


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return 0.0, 0.0
    n = len(values)
    mean = sum(values) / n
    var = sum((x - mean) ** 2 for x in values) / n
    return mean, math.sqrt(var)


def aggregate(reports: list[CaseScore]) -> EvalReport:
    """Pool per-case scores into one report (matched distances pooled)."""
    if not reports:
        raise ValueError("cannot aggregate an empty list of case scores")
    si = [d for r in reports for d in r.si_distances_mm]
    l2 = [d for r in reports for d in r.l2_distances_mm]
    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    preds = tp + fp
    gts = tp + fn
    mean_si, std_si = _mean_std(si)
    mean_l2, std_l2 = _mean_std(l2)
    return EvalReport(
        mean_distance_mm=mean_si,
        std_distance_mm=std_si,
        mean_l2_mm=mean_l2,
        std_l2_mm=std_l2,
        fpr_pct=100.0 * fp / preds if preds else 0.0,
        fnr_pct=100.0 * fn / gts if gts else 0.0,
        tp=tp,
        fp=fp,
        fn=fn,
        num_cases=len(reports),
    )


# ---------------------------------------------------------------------------
# report rendering (CSV / JSON / Markdown)
# ---------------------------------------------------------------------------

_HEADER_NOTE = (
    "FPR = % of emitted predictions >= tol from their disc's ground truth; "
    "FNR = % of ground-truth discs without a prediction within tol; "
    "distance pools matched pairs, superior-inferior axis, mm"
)


def report_rows(named_reports: list[tuple[str, EvalReport]]) -> list[dict]:
    return [
        {
            "method": name,
            "distance_mm": round(r.mean_distance_mm, 6),
            "distance_std_mm": round(r.std_distance_mm, 6),
            "l2_mm": round(r.mean_l2_mm, 6),
            "l2_std_mm": round(r.std_l2_mm, 6),
            "fnr_pct": round(r.fnr_pct, 6),
            "fpr_pct": round(r.fpr_pct, 6),
            "tp": r.tp,
            "fp": r.fp,
            "fn": r.fn,
            "cases": r.num_cases,
        }
        for name, r in named_reports
    ]


def render_csv(named_reports: list[tuple[str, EvalReport]]) -> str:
    rows = report_rows(named_reports)
    header = list(rows[0].keys())
    lines = ["# " + _HEADER_NOTE, ",".join(header)]
    for row in rows:
        lines.append(",".join(str(row[k]) for k in header))
    return "\n".join(lines) + "\n"


def render_json(named_reports: list[tuple[str, EvalReport]]) -> str:
    return json.dumps({"note": _HEADER_NOTE, "rows": report_rows(named_reports)}, indent=2, sort_keys=True) + "\n"


def render_markdown(named_reports: list[tuple[str, EvalReport]]) -> str:
    lines = [
        "| Method | Distance to target (mm) | FNR (%) | FPR (%) |",
        "|---|---|---|---|",
    ]
    for name, r in named_reports:
        lines.append(
            f"| {name} | {r.mean_distance_mm:.2f}(±{r.std_distance_mm:.2f}) | {r.fnr_pct:.2f} | {r.fpr_pct:.2f} |"
        )
    lines.append("")
    lines.append(f"_{_HEADER_NOTE}_")
    return "\n".join(lines) + "\n"


def write_report(named_reports: list[tuple[str, EvalReport]], out_dir: str | os.PathLike) -> None:
    """Emit report.csv / report.json / report.md atomically into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    for fname, text in [
        ("report.csv", render_csv(named_reports)),
        ("report.json", render_json(named_reports)),
        ("report.md", render_markdown(named_reports)),
    ]:
        path = os.path.join(os.fspath(out_dir), fname)
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
