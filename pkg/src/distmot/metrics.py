"""Tracking evaluation: CLEAR matching, MOTA, MOTP, IDF1, MT/ML, and reports.

Matching semantics
------------------
The per-frame matcher is defined by three ordered criteria over pairs whose
IoU clears the threshold: most pairs matched, then smallest summed cost
(1 - IoU), then the lexicographically smallest sorted pair list. The same
definition is used by the brute-force oracle in the test suite, so every
tie-break is pinned down, not an accident of the solver.

The assignment core is a potentials-based Hungarian solver; a refinement
pass fixes pairs in lexicographic order, re-solving the remainder to keep
optimality, which is what makes the tie-break deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import BBox, Sequence

MOTP_MODES = ("overlap", "distance")

# relative slack when comparing float assignment costs during refinement
_COST_TOL = 1e-9


def _xywh(box) -> tuple[float, float, float, float]:
    if isinstance(box, BBox):
        return box.xywh
    left, top, width, height = box
    return float(left), float(top), float(width), float(height)


def iou(a, b) -> float:
    """Intersection over union of two axis-aligned (left, top, w, h) boxes."""
    ax, ay, aw, ah = _xywh(a)
    bx, by, bw, bh = _xywh(b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError("iou needs positive box extents")
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


# -- assignment ----------------------------------------------------------------


@dataclass(frozen=True)
class AssignmentResult:
    pairs: tuple[tuple[int, int], ...]
    total: float


def _solve_min_cost(cost: np.ndarray) -> list[tuple[int, int]]:
    """Some minimum-cost perfect matching on the smaller side of ``cost``.

    Potentials-based Hungarian method, O(n^2 m). Ties are resolved
    arbitrarily here; callers needing a deterministic choice refine on top.
    """
    transposed = cost.shape[0] > cost.shape[1]
    if transposed:
        cost = cost.T
    n, m = cost.shape
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    match = [0] * (m + 1)  # 1-based row matched to each column, 0 = free
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    pairs = [(match[j] - 1, j - 1) for j in range(1, m + 1) if match[j]]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    return sorted(pairs)


def _gated_best(cost: np.ndarray, allowed: np.ndarray) -> tuple[int, float]:
    """(max matched pairs, min summed cost) over the allowed cells."""
    if cost.size == 0 or not allowed.any():
        return 0, 0.0
    big = float(np.abs(cost[allowed]).sum()) + 1.0
    padded = np.where(allowed, cost, big)
    pairs = _solve_min_cost(padded)
    kept = [(r, c) for r, c in pairs if allowed[r, c]]
    return len(kept), float(sum(cost[r, c] for r, c in kept))


def gated_match(cost: np.ndarray, allowed: np.ndarray) -> list[tuple[int, int]]:
    """Deterministic partial matching restricted to allowed cells.

    Maximizes pair count, then minimizes summed cost, then returns the
    lexicographically smallest sorted pair list. Pairs are fixed row by row,
    each one validated by re-solving the remaining subproblem.
    """
    cost = np.asarray(cost, dtype=float)
    allowed = np.asarray(allowed, dtype=bool)
    if cost.shape != allowed.shape:
        raise ValueError(f"cost {cost.shape} and mask {allowed.shape} shapes differ")
    n_rows, n_cols = cost.shape
    target_k, target_v = _gated_best(cost, allowed)
    if target_k == 0:
        return []

    free_rows = list(range(n_rows))
    free_cols = list(range(n_cols))
    fixed: list[tuple[int, int]] = []
    fixed_cost = 0.0
    for r in range(n_rows):
        if len(fixed) == target_k:
            break
        free_rows.remove(r)
        chosen = None
        for c in free_cols:
            if not allowed[r, c]:
                continue
            sub_k, sub_v = _gated_best(cost[np.ix_(free_rows, [x for x in free_cols if x != c])],
                                       allowed[np.ix_(free_rows, [x for x in free_cols if x != c])])
            k_total = len(fixed) + 1 + sub_k
            v_total = fixed_cost + cost[r, c] + sub_v
            if k_total == target_k and abs(v_total - target_v) <= _COST_TOL * max(1.0, abs(target_v)):
                chosen = c
                break
        if chosen is None:
            # row r is unmatched in the lexicographically smallest optimum
            continue
        fixed.append((r, chosen))
        fixed_cost += cost[r, chosen]
        free_cols.remove(chosen)
    return fixed


def hungarian(cost) -> AssignmentResult:
    """Minimum-cost assignment covering the smaller side of a rectangular matrix.

    Ties are broken toward the lexicographically smallest (row, col) pair
    list. NaN or infinite costs are rejected.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError(f"cost must be a non-empty 2-d matrix, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    if np.isinf(cost).any():
        raise ValueError("cost matrix contains non-finite values")
    pairs = gated_match(cost, np.ones(cost.shape, dtype=bool))
    total = float(sum(cost[r, c] for r, c in pairs))
    return AssignmentResult(pairs=tuple(pairs), total=total)


# -- CLEAR matching ---------------------------------------------------------------


@dataclass
class ClearCounts:
    """Error counts and accepted matches from CLEAR-style frame matching."""

    fp: int = 0
    fn: int = 0
    idsw: int = 0
    per_frame: dict[int, tuple[int, int, int]] = field(default_factory=dict)
    matches: list[tuple[int, int, int, float]] = field(default_factory=list)  # frame, gt, pred, iou

    def match_count(self) -> int:
        return len(self.matches)


def clear_match(gt: Sequence, pred: Sequence, iou_threshold: float = 0.5) -> ClearCounts:
    """Frame-by-frame correspondence between ground truth and predictions.

    Pairs matched in the previous frame are carried over while their IoU
    still clears the threshold; the rest are matched fresh at cost 1 - IoU.
    A ground-truth track matched to a different prediction id than its most
    recent match (across any gap) counts one identity switch.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    counts = ClearCounts()
    last_match: dict[int, int] = {}
    prev_pairs: dict[int, int] = {}
    for frame in sorted(set(gt.frames) | set(pred.frames)):
        gt_boxes = sorted(gt.boxes_in_frame(frame), key=lambda b: b.track_id)
        pred_boxes = sorted(pred.boxes_in_frame(frame), key=lambda b: b.track_id)
        gt_index = {b.track_id: i for i, b in enumerate(gt_boxes)}
        pred_index = {b.track_id: i for i, b in enumerate(pred_boxes)}

        ious = np.zeros((len(gt_boxes), len(pred_boxes)))
        for i, g in enumerate(gt_boxes):
            for j, p in enumerate(pred_boxes):
                ious[i, j] = iou(g, p)

        pairs: list[tuple[int, int]] = []
        used_gt: set[int] = set()
        used_pred: set[int] = set()
        for g_id in sorted(prev_pairs):
            p_id = prev_pairs[g_id]
            gi, pj = gt_index.get(g_id), pred_index.get(p_id)
            if gi is None or pj is None:
                continue
            if ious[gi, pj] >= iou_threshold:
                pairs.append((gi, pj))
                used_gt.add(gi)
                used_pred.add(pj)

        free_gt = [i for i in range(len(gt_boxes)) if i not in used_gt]
        free_pred = [j for j in range(len(pred_boxes)) if j not in used_pred]
        if free_gt and free_pred:
            sub = ious[np.ix_(free_gt, free_pred)]
            fresh = gated_match(1.0 - sub, sub >= iou_threshold)
            pairs.extend((free_gt[r], free_pred[c]) for r, c in fresh)

        frame_idsw = 0
        new_prev: dict[int, int] = {}
        for gi, pj in sorted(pairs):
            g_id = gt_boxes[gi].track_id
            p_id = pred_boxes[pj].track_id
            if g_id in last_match and last_match[g_id] != p_id:
                frame_idsw += 1
            last_match[g_id] = p_id
            new_prev[g_id] = p_id
            counts.matches.append((frame, g_id, p_id, float(ious[gi, pj])))
        prev_pairs = new_prev

        frame_fn = len(gt_boxes) - len(pairs)
        frame_fp = len(pred_boxes) - len(pairs)
        counts.per_frame[frame] = (frame_fp, frame_fn, frame_idsw)
        counts.fp += frame_fp
        counts.fn += frame_fn
        counts.idsw += frame_idsw
    return counts


# -- metrics ------------------------------------------------------------------------


def mota(counts: ClearCounts, gt_total: int) -> float:
    """1 - (FN + FP + IDSW) / GT. Can go below zero when FPs pile up."""
    if gt_total <= 0:
        raise ValueError(f"gt_total must be positive, got {gt_total}")
    return 1.0 - (counts.fn + counts.fp + counts.idsw) / gt_total


def motp(counts: ClearCounts, mode: str = "distance") -> float | None:
    """Mean match quality: mean IoU ("overlap") or mean 1 - IoU ("distance").

    Undefined without matches; returns None so reports can leave the cell
    blank instead of faking a zero.
    """
    if mode not in MOTP_MODES:
        raise ValueError(f"motp mode must be one of {MOTP_MODES}, got {mode!r}")
    if not counts.matches:
        return None
    mean_iou = sum(m[3] for m in counts.matches) / len(counts.matches)
    return mean_iou if mode == "overlap" else 1.0 - mean_iou


def idf1_counts(gt: Sequence, pred: Sequence,
                iou_threshold: float = 0.5) -> tuple[int, int, int]:
    """(IDTP, IDFP, IDFN) from the best global one-to-one track mapping.

    Mapping gt track g to pred track p scores one IDTP per frame where both
    have boxes overlapping at or above the threshold; the assignment
    maximizing total IDTP is found by Hungarian on negated scores.
    """
    gt_tracks = gt.track_ids
    pred_tracks = pred.track_ids
    idtp = 0
    if gt_tracks and pred_tracks:
        overlap = np.zeros((len(gt_tracks), len(pred_tracks)))
        for i, g_id in enumerate(gt_tracks):
            g_by_frame = {b.frame: b for b in gt.track(g_id)}
            for j, p_id in enumerate(pred_tracks):
                hits = 0
                for p_box in pred.track(p_id):
                    g_box = g_by_frame.get(p_box.frame)
                    if g_box is not None and iou(g_box, p_box) >= iou_threshold:
                        hits += 1
                overlap[i, j] = hits
        result = hungarian(-overlap)
        idtp = int(round(-result.total))
    idfn = len(gt.boxes) - idtp
    idfp = len(pred.boxes) - idtp
    return idtp, idfp, idfn


def idf1(gt: Sequence, pred: Sequence, iou_threshold: float = 0.5) -> float:
    """2*IDTP / (2*IDTP + IDFP + IDFN); 1.0 when both sides are empty."""
    idtp, idfp, idfn = idf1_counts(gt, pred, iou_threshold)
    denom = 2 * idtp + idfp + idfn
    if denom == 0:
        return 1.0
    return 2 * idtp / denom


def mt_ml(gt: Sequence, counts: ClearCounts) -> tuple[int, int, float, float]:
    """Mostly-tracked / mostly-lost counts and percentages over gt tracks.

    A track is MT when matched in at least 80% of the frames it appears in,
    ML when matched in no more than 20%; both bounds inclusive.
    """
    tracks = gt.track_ids
    if not tracks:
        raise ValueError("mt_ml needs a nonempty ground-truth sequence")
    matched_frames: dict[int, int] = {t: 0 for t in tracks}
    for _, g_id, _, _ in counts.matches:
        matched_frames[g_id] += 1
    mt_count = 0
    ml_count = 0
    for t in tracks:
        lifespan = len(gt.track(t))
        ratio = matched_frames[t] / lifespan
        if ratio >= 0.8:
            mt_count += 1
        if ratio <= 0.2:
            ml_count += 1
    n = len(tracks)
    return mt_count, ml_count, 100.0 * mt_count / n, 100.0 * ml_count / n


# -- report assembly -------------------------------------------------------------------


@dataclass(frozen=True)
class SequenceMetrics:
    sequence: str
    mota: float
    motp: float | None
    idf1: float
    mt: int
    ml: int
    mt_pct: float
    ml_pct: float


@dataclass(frozen=True)
class MetricReport:
    """Per-sequence rows plus an overall row pooled from raw counts."""

    rows: tuple[SequenceMetrics, ...]
    overall: SequenceMetrics
    iou_threshold: float
    motp_mode: str

    COLUMNS = ("sequence", "MOTA", "MOTP", "IDF1", "MT", "ML")

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for row in (*self.rows, self.overall):
            motp_cell = "" if row.motp is None else f"{row.motp:.6f}"
            lines.append(",".join([
                row.sequence, f"{row.mota:.6f}", motp_cell, f"{row.idf1:.6f}",
                str(row.mt), str(row.ml),
            ]))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        def encode(row: SequenceMetrics) -> dict:
            return {
                "sequence": row.sequence, "MOTA": row.mota, "MOTP": row.motp,
                "IDF1": row.idf1, "MT": row.mt, "ML": row.ml,
                "MT_pct": row.mt_pct, "ML_pct": row.ml_pct,
            }

        return json.dumps({
            "columns": list(self.COLUMNS),
            "iou_threshold": self.iou_threshold,
            "motp_mode": self.motp_mode,
            "rows": [encode(r) for r in self.rows],
            "overall": encode(self.overall),
        }, indent=2) + "\n"


def evaluate(gt_seqs: list[Sequence], pred_seqs: list[Sequence],
             iou_threshold: float = 0.5, motp_mode: str = "distance") -> MetricReport:
    """Score every sequence and pool raw counts for the overall row.

    Ground-truth and prediction sequences are paired by name; the overall
    MOTA/MOTP/IDF1/MT/ML come from summed counts and pooled matches, never
    from averaging per-sequence ratios.
    """
    if motp_mode not in MOTP_MODES:
        raise ValueError(f"motp mode must be one of {MOTP_MODES}, got {motp_mode!r}")
    gt_by_name = {s.name: s for s in gt_seqs}
    pred_by_name = {s.name: s for s in pred_seqs}
    if sorted(gt_by_name) != sorted(pred_by_name):
        missing = sorted(set(gt_by_name) ^ set(pred_by_name))
        raise ValueError(f"gt and prediction sequence names differ: {missing}")

    rows = []
    pool_fp = pool_fn = pool_idsw = pool_gt = 0
    pool_iou_sum = 0.0
    pool_matches = 0
    pool_idtp = pool_idfp = pool_idfn = 0
    pool_mt = pool_ml = pool_tracks = 0
    for name in sorted(gt_by_name):
        gt, pred = gt_by_name[name], pred_by_name[name]
        counts = clear_match(gt, pred, iou_threshold)
        idtp, idfp, idfn = idf1_counts(gt, pred, iou_threshold)
        mt_count, ml_count, mt_pct, ml_pct = mt_ml(gt, counts)
        rows.append(SequenceMetrics(
            sequence=name,
            mota=mota(counts, len(gt.boxes)),
            motp=motp(counts, motp_mode),
            idf1=idf1(gt, pred, iou_threshold),
            mt=mt_count, ml=ml_count, mt_pct=mt_pct, ml_pct=ml_pct,
        ))
        pool_fp += counts.fp
        pool_fn += counts.fn
        pool_idsw += counts.idsw
        pool_gt += len(gt.boxes)
        pool_iou_sum += sum(m[3] for m in counts.matches)
        pool_matches += counts.match_count()
        pool_idtp += idtp
        pool_idfp += idfp
        pool_idfn += idfn
        pool_mt += mt_count
        pool_ml += ml_count
        pool_tracks += len(gt.track_ids)

    if pool_gt == 0:
        raise ValueError("evaluation needs at least one ground-truth box")
    overall_motp = None
    if pool_matches:
        mean_iou = pool_iou_sum / pool_matches
        overall_motp = mean_iou if motp_mode == "overlap" else 1.0 - mean_iou
    overall_denom = 2 * pool_idtp + pool_idfp + pool_idfn
    overall = SequenceMetrics(
        sequence="OVERALL",
        mota=1.0 - (pool_fn + pool_fp + pool_idsw) / pool_gt,
        motp=overall_motp,
        idf1=1.0 if overall_denom == 0 else 2 * pool_idtp / overall_denom,
        mt=pool_mt, ml=pool_ml,
        mt_pct=100.0 * pool_mt / pool_tracks if pool_tracks else 0.0,
        ml_pct=100.0 * pool_ml / pool_tracks if pool_tracks else 0.0,
    )
    return MetricReport(rows=tuple(rows), overall=overall,
                        iou_threshold=iou_threshold, motp_mode=motp_mode)
