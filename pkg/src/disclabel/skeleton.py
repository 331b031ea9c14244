"""Relational disc-position prior and skeleton-constrained candidate search.

The skeleton is the average normalized relative geometry of the disc
column over the training labels: every case is shifted so the first disc
sits at the origin and scaled by the distance from disc 1 to disc 5,
then averaged per disc. At labeling time a search tree over per-disc
candidates (levels = discs, nodes = candidates) is explored for the
ordering-feasible assignment whose normalized geometry is closest to the
skeleton; discs without candidates contribute nothing to the error.

Assignment comparison is lexicographic: more present discs first, then
lower skeleton error, then higher total candidate score, then smallest
candidate indices. Branch-and-bound pruning on partial error never
changes the returned optimum; a brute-force enumerator with identical
semantics serves as the test oracle.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

from .candidates import CandidateSet
from .targets import LabeledCase

SCALE_DISC = 4  # disc 5, zero-based: the anchor-to-here distance defines unit scale
ZERO_ERROR_EPS = 1e-9

_ABSENT_LEX = 1 << 30  # sorts after any real candidate index


@dataclass
class Skeleton:
    """Normalized relative disc positions; points[0] is the origin."""

    points: list[tuple[float, float]]

    @property
    def num_discs(self) -> int:
        return len(self.points)

    def save(self, path: str | os.PathLike) -> None:
        obj = {"V": self.num_discs, "points": [[float(r), float(c)] for r, c in self.points]}
        tmp = os.fspath(path) + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Skeleton":
        with open(path) as fh:
            obj = json.load(fh)
        points = [tuple(p) for p in obj["points"]]
        if len(points) != obj["V"]:
            raise ValueError(f"skeleton file {path}: V={obj['V']} but {len(points)} points")
        return cls(points=points)


@dataclass
class Assignment:
    """One candidate choice per disc (None = disc left absent)."""

    chosen: list[int | None]
    positions: list[tuple[float, float] | None]
    scores: list[float | None]
    error: float
    present_count: int
    total_score: float
    feasible: bool = True
    stats: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, num_discs: int, feasible: bool = True) -> "Assignment":
        return cls(
            chosen=[None] * num_discs,
            positions=[None] * num_discs,
            scores=[None] * num_discs,
            error=0.0,
            present_count=0,
            total_score=0.0,
            feasible=feasible,
        )


@dataclass
class LabelingResult:
    """Final ordered disc positions with per-disc confidence and availability."""

    positions: list[tuple[float, float] | None]
    scores: list[float | None]
    skeleton_error: float | None = None
    feasible: bool = True

    @property
    def availability(self) -> list[bool]:
        return [p is not None for p in self.positions]

    def to_json_obj(self) -> dict:
        return {
            "discs": [
                {
                    "disc": i,
                    "present": p is not None,
                    "row": None if p is None else float(p[0]),
                    "col": None if p is None else float(p[1]),
                    "score": None if s is None else float(s),
                }
                for i, (p, s) in enumerate(zip(self.positions, self.scores))
            ],
            "skeleton_error": self.skeleton_error,
            "feasible": self.feasible,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "LabelingResult":
        positions: list[tuple[float, float] | None] = []
        scores: list[float | None] = []
        for entry in obj["discs"]:
            if entry["present"]:
                positions.append((entry["row"], entry["col"]))
                scores.append(entry["score"])
            else:
                positions.append(None)
                scores.append(None)
        return cls(
            positions=positions,
            scores=scores,
            skeleton_error=obj.get("skeleton_error"),
            feasible=obj.get("feasible", True),
        )


# ---------------------------------------------------------------------------
# normalization and the error function
# ---------------------------------------------------------------------------


def _dist(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _fallback_scale(
    points: list[tuple[float, float] | None],
    reference: list[tuple[float, float]],
    present: list[int],
) -> float:
    """Scale matching the summed consecutive-present spacing to the reference's."""
    num = 0.0
    den = 0.0
    for a, b in zip(present[:-1], present[1:]):
        num += _dist(points[a], points[b])
        den += _dist(reference[a], reference[b])
    if den <= 0.0 or num <= 0.0:
        raise ValueError("cannot derive a fallback scale: degenerate spacing")
    return num / den


def normalize_points(
    points: list[tuple[float, float] | None],
    reference: Skeleton | None = None,
) -> list[tuple[float, float] | None]:
    """Shift to the first present disc and scale by the disc1-disc5 distance.

    When disc 5 (or disc 1) is absent the scale falls back to matching
    the summed spacing of consecutive present discs against the same
    statistic of ``reference``; without a reference that case is an error.
    Absent entries stay absent.
    """
    present = [i for i, p in enumerate(points) if p is not None]
    if len(present) < 2:
        raise ValueError(f"need at least 2 present points to normalize, got {len(present)}")
    anchor = points[present[0]]
    if points[0] is not None and len(points) > SCALE_DISC and points[SCALE_DISC] is not None:
        scale = _dist(points[0], points[SCALE_DISC])
        if scale <= 0.0:
            raise ValueError("disc 1 and disc 5 coincide; scale undefined")
    elif reference is not None:
        scale = _fallback_scale(points, reference.points, present)
    else:
        raise ValueError(
            "scale reference missing: disc 1 and disc 5 must both be present "
            "(or pass a reference skeleton for the fallback)"
        )
    return [
        None if p is None else ((p[0] - anchor[0]) / scale, (p[1] - anchor[1]) / scale)
        for p in points
    ]


def skeleton_error(
    skeleton: Skeleton,
    normalized_positions: list[tuple[float, float] | None],
) -> float:
    """Sum of per-disc Euclidean distances to the skeleton prior.

    ``normalized_positions`` must already be normalized (anchored at the
    first present disc); the skeleton is re-anchored to the same disc.
    Absent discs contribute exactly zero.
    """
    present = [i for i, p in enumerate(normalized_positions) if p is not None]
    if not present:
        return 0.0
    sa = skeleton.points[present[0]]
    err = 0.0
    for j in present:
        pr, pc = normalized_positions[j]
        sr, sc = skeleton.points[j]
        err += math.hypot(pr - (sr - sa[0]), pc - (sc - sa[1]))
    return err


def build_skeleton(cases: list[LabeledCase]) -> Skeleton:
    """Average the normalized disc geometry over a training set.

    Every case must have discs 1 and 5 annotated (anchor and scale).
    Each disc is averaged over the cases where it is visible; a disc
    visible in no case is an error. The averaged geometry is re-scaled so
    the disc1-disc5 distance is exactly 1 again.
    """
    if not cases:
        raise ValueError("cannot build a skeleton from an empty training set")
    v = cases[0].num_discs
    sums = [[0.0, 0.0] for _ in range(v)]
    counts = [0] * v
    for k, case in enumerate(cases):
        if case.num_discs != v:
            raise ValueError(f"case {k} has {case.num_discs} discs, expected {v}")
        if case.disc_positions[0] is None or case.disc_positions[SCALE_DISC] is None:
            raise ValueError(f"case {k} lacks disc 1 or disc 5; cannot anchor/scale")
        norm = normalize_points(case.disc_positions)
        for i, p in enumerate(norm):
            if p is not None:
                sums[i][0] += p[0]
                sums[i][1] += p[1]
                counts[i] += 1
    for i, c in enumerate(counts):
        if c == 0:
            raise ValueError(f"disc {i + 1} is visible in zero training cases")
    mean = [(s[0] / c, s[1] / c) for s, c in zip(sums, counts)]
    # restore the unit disc1-disc5 distance lost by averaging directions
    unit = _dist(mean[0], mean[SCALE_DISC])
    anchor = mean[0]
    return Skeleton(points=[((r - anchor[0]) / unit, (c - anchor[1]) / unit) for r, c in mean])


# ---------------------------------------------------------------------------
# assignment evaluation and search
# ---------------------------------------------------------------------------


def _assignment_positions(candidates: CandidateSet, chosen: list[int | None]):
    positions: list[tuple[float, float] | None] = []
    scores: list[float | None] = []
    for j, idx in enumerate(chosen):
        if idx is None:
            positions.append(None)
            scores.append(None)
        else:
            cand = candidates.per_disc[j][idx]
            positions.append((cand.row, cand.col))
            scores.append(cand.score)
    return positions, scores


def evaluate_assignment(
    candidates: CandidateSet,
    skeleton: Skeleton,
    chosen: list[int | None],
) -> float:
    """Canonical skeleton error of one assignment (used by all searchers)."""
    positions, _ = _assignment_positions(candidates, chosen)
    present = [i for i, p in enumerate(positions) if p is not None]
    if len(present) < 2:
        return 0.0
    normalized = normalize_points(positions, reference=skeleton)
    return skeleton_error(skeleton, normalized)


def _assignment_key(error: float, present: int, total_score: float, chosen: list[int | None]):
    lex = tuple(_ABSENT_LEX if idx is None else idx for idx in chosen)
    return (-present, error, -total_score, lex)


def _make_assignment(candidates: CandidateSet, skeleton: Skeleton, chosen: list[int | None], stats: dict) -> Assignment:
    positions, scores = _assignment_positions(candidates, chosen)
    present = sum(1 for p in positions if p is not None)
    total_score = sum(s for s in scores if s is not None)
    return Assignment(
        chosen=list(chosen),
        positions=positions,
        scores=scores,
        error=evaluate_assignment(candidates, skeleton, chosen),
        present_count=present,
        total_score=total_score,
        stats=stats,
    )


def brute_force_best(
    candidates: CandidateSet,
    skeleton: Skeleton,
    num_discs_hint: int | None = None,
    cap: int = 10**6,
) -> Assignment:
    """Exhaustively enumerate ordering-feasible assignments; global optimum.

    The test oracle for :func:`search_best`. Raises if the combination
    count (including per-disc absence) exceeds ``cap``; shrink the
    instance instead of raising the cap.
    """
    v = candidates.num_discs
    combos = 1
    for cands in candidates.per_disc:
        combos *= len(cands) + 1
        if combos > cap:
            raise ValueError(
                f"brute force would enumerate > {cap} combinations; shrink the instance"
            )

    best_key = None
    best_chosen: list[int | None] | None = None
    leaves = 0
    chosen: list[int | None] = [None] * v

    def recurse(j: int, last_row: float | None, present: int) -> None:
        nonlocal best_key, best_chosen, leaves
        if j == v:
            if num_discs_hint is not None and present != num_discs_hint:
                return
            leaves += 1
            error = evaluate_assignment(candidates, skeleton, chosen)
            score = sum(
                candidates.per_disc[k][idx].score for k, idx in enumerate(chosen) if idx is not None
            )
            key = _assignment_key(error, present, score, chosen)
            if best_key is None or key < best_key:
                best_key = key
                best_chosen = list(chosen)
            return
        for idx, cand in enumerate(candidates.per_disc[j]):
            if last_row is None or cand.row > last_row:
                chosen[j] = idx
                recurse(j + 1, cand.row, present + 1)
        chosen[j] = None
        recurse(j + 1, last_row, present)

    recurse(0, None, 0)
    if best_chosen is None:
        return Assignment.empty(v, feasible=False)
    result = _make_assignment(candidates, skeleton, best_chosen, stats={"leaves_evaluated": leaves})
    result.feasible = num_discs_hint is None or result.present_count == num_discs_hint
    return result


def search_best(
    candidates: CandidateSet,
    skeleton: Skeleton,
    num_discs_hint: int | None = None,
) -> Assignment:
    """Depth-first branch-and-bound over the per-disc candidate tree.

    Returns the same assignment as :func:`brute_force_best` under the
    documented comparison order. When ``num_discs_hint`` is given only
    assignments with exactly that many present discs are considered; an
    unsatisfiable hint yields an explicit infeasible empty result.
    """
    v = candidates.num_discs
    cand_lists = candidates.per_disc
    skel = skeleton.points
    nonempty_after = [0] * (v + 1)
    for j in range(v - 1, -1, -1):
        nonempty_after[j] = nonempty_after[j + 1] + (1 if cand_lists[j] else 0)
    full_count = num_discs_hint if num_discs_hint is not None else nonempty_after[0]

    best_key = None
    best_chosen: list[int | None] | None = None
    stop = False
    stats = {"nodes": 0, "leaves_evaluated": 0, "pruned_count": 0, "pruned_error": 0}
    chosen: list[int | None] = [None] * v

    def leaf() -> None:
        nonlocal best_key, best_chosen, stop
        present = sum(1 for c in chosen if c is not None)
        if num_discs_hint is not None and present != num_discs_hint:
            return
        stats["leaves_evaluated"] += 1
        error = evaluate_assignment(candidates, skeleton, chosen)
        score = sum(cand_lists[k][idx].score for k, idx in enumerate(chosen) if idx is not None)
        key = _assignment_key(error, present, score, chosen)
        if best_key is None or key < best_key:
            best_key = key
            best_chosen = list(chosen)
            if error < ZERO_ERROR_EPS and present == full_count and full_count > 0:
                stop = True

    def partial_terms(scale_anchor) -> float:
        """Error prefix over decided discs, in canonical disc order."""
        (ar, ac), scale = scale_anchor
        err = 0.0
        for j, idx in enumerate(chosen):
            if idx is None:
                continue
            cand = cand_lists[j][idx]
            sr, sc = skel[j]
            err += math.hypot((cand.row - ar) / scale - (sr - skel[0][0]), (cand.col - ac) / scale - (sc - skel[0][1]))
        return err

    def dfs(j: int, last_row: float | None, present: int, scale_anchor, partial_err: float) -> None:
        nonlocal stop
        if stop:
            return
        stats["nodes"] += 1
        if j == v:
            leaf()
            return
        max_possible = present + nonempty_after[j]
        if num_discs_hint is not None:
            if present > num_discs_hint or max_possible < num_discs_hint:
                stats["pruned_count"] += 1
                return
        if best_key is not None:
            best_present = -best_key[0]
            best_error = best_key[1]
            if max_possible < best_present:
                stats["pruned_count"] += 1
                return
            # with a hint the present count is fixed, so error alone decides;
            # otherwise error pruning is sound only when the count cannot improve
            can_beat_on_count = num_discs_hint is None and max_possible > best_present
            if not can_beat_on_count and scale_anchor is not None and partial_err > best_error:
                stats["pruned_error"] += 1
                return

        for idx, cand in enumerate(cand_lists[j]):
            if stop:
                return
            if last_row is not None and cand.row <= last_row:
                continue
            chosen[j] = idx
            next_scale = scale_anchor
            next_err = partial_err
            if scale_anchor is not None:
                sr, sc = skel[j]
                (ar, ac), scale = scale_anchor
                next_err = partial_err + math.hypot(
                    (cand.row - ar) / scale - (sr - skel[0][0]),
                    (cand.col - ac) / scale - (sc - skel[0][1]),
                )
            elif j == SCALE_DISC and chosen[0] is not None and v > SCALE_DISC:
                c0 = cand_lists[0][chosen[0]]
                scale = math.hypot(cand.row - c0.row, cand.col - c0.col)
                if scale > 0.0:
                    next_scale = ((c0.row, c0.col), scale)
                    next_err = partial_terms(next_scale)
            dfs(j + 1, cand.row, present + 1, next_scale, next_err)
            chosen[j] = None
        if not stop:
            dfs(j + 1, last_row, present, scale_anchor, partial_err)

    dfs(0, None, 0, None, 0.0)
    if best_chosen is None:
        return Assignment.empty(v, feasible=False)
    result = _make_assignment(candidates, skeleton, best_chosen, stats=dict(stats))
    result.feasible = num_discs_hint is None or result.present_count == num_discs_hint
    return result


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


def assignment_to_result(assignment: Assignment) -> LabelingResult:
    return LabelingResult(
        positions=list(assignment.positions),
        scores=list(assignment.scores),
        skeleton_error=assignment.error,
        feasible=assignment.feasible,
    )


def top1_result(candidates: CandidateSet) -> LabelingResult:
    """Raw best-scoring candidate per disc, no skeleton constraint (ablation)."""
    positions: list[tuple[float, float] | None] = []
    scores: list[float | None] = []
    for cands in candidates.per_disc:
        if cands:
            positions.append((cands[0].row, cands[0].col))
            scores.append(cands[0].score)
        else:
            positions.append(None)
            scores.append(None)
    return LabelingResult(positions=positions, scores=scores, skeleton_error=None)
