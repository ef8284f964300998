"""Multi-object tracking evaluation against ground truth.

Frame-level correspondence follows the CLEAR protocol: a pairing is
feasible when IoU meets the threshold, continuations of the previous
correspondence are preferred over marginally better overlaps, and the
rest is a per-frame Hungarian assignment. Identity switches compare
against the last pred id ever matched to a ground-truth track, so a
switch across an occlusion gap still counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Set

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import iou
from .runtime import TrackDump, TrackRecord
from .scenario import Scenario

_CONTINUATION_BONUS = 2.0   # dominates any IoU difference, which is at most 1
_INFEASIBLE = 1e6


@dataclass
class MetricReport:
    mota: float
    idf1: float
    id_switches: int
    fragmentations: int
    mostly_tracked: int
    mostly_lost: int
    true_positives: int
    false_positives: int
    false_negatives: int
    gt_count: int
    num_gt_tracks: int
    num_pred_tracks: int
    cls_accuracy: Optional[float]
    cls_accuracy_base: Optional[float]
    cls_accuracy_novel: Optional[float]

    def to_text(self) -> str:
        def fmt(v):
            if v is None:
                return "n/a"
            if isinstance(v, float):
                return f"{v:.4f}"
            return str(v)

        rows = [
            ("MOTA", self.mota),
            ("IDF1", self.idf1),
            ("ID switches", self.id_switches),
            ("Fragmentations", self.fragmentations),
            ("Mostly tracked", self.mostly_tracked),
            ("Mostly lost", self.mostly_lost),
            ("True positives", self.true_positives),
            ("False positives", self.false_positives),
            ("False negatives", self.false_negatives),
            ("GT boxes", self.gt_count),
            ("GT tracks", self.num_gt_tracks),
            ("Pred tracks", self.num_pred_tracks),
            ("Cls accuracy", self.cls_accuracy),
            ("Cls accuracy (base)", self.cls_accuracy_base),
            ("Cls accuracy (novel)", self.cls_accuracy_novel),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {fmt(value)}" for name, value in rows) + "\n"


def evaluate(gt: Scenario, dump: TrackDump, iou_threshold: float = 0.5,
             novel_ids: Optional[Iterable[int]] = None) -> MetricReport:
    novel: Set[int] = set(novel_ids) if novel_ids is not None else set()
    num_frames = max(gt.num_frames, dump.num_frames())

    last_pred: dict[int, int] = {}          # gt id -> last matched pred id
    matched_timeline: dict[int, list[bool]] = {}   # gt id -> matched flag per present frame
    coverage: dict[int, list[int]] = {}     # gt id -> [matched frames, present frames]

    tp = fp = fn = switches = 0
    cls_hits = {"all": 0, "base": 0, "novel": 0}
    cls_total = {"all": 0, "base": 0, "novel": 0}

    for t in range(num_frames):
        g_recs = gt.frame_records(t)
        p_recs = dump.frame_records(t)
        n_g, n_p = len(g_recs), len(p_recs)
        matched_g = [False] * n_g
        if n_g and n_p:
            cost = np.full((n_g, n_p), _INFEASIBLE)
            for i, gr in enumerate(g_recs):
                for j, pr in enumerate(p_recs):
                    overlap = iou(gr.box, pr.box)
                    if overlap >= iou_threshold:
                        cost[i, j] = 1.0 - overlap
                        if last_pred.get(gr.track_id) == pr.track_id:
                            cost[i, j] -= _CONTINUATION_BONUS
            rows, cols = linear_sum_assignment(cost)
            used_p = [False] * n_p
            for i, j in zip(rows, cols):
                if cost[i, j] >= _INFEASIBLE:
                    continue
                gr, pr = g_recs[i], p_recs[j]
                matched_g[i] = True
                used_p[j] = True
                tp += 1
                prev = last_pred.get(gr.track_id)
                if prev is not None and prev != pr.track_id:
                    switches += 1
                last_pred[gr.track_id] = pr.track_id
                scope = "novel" if gr.category_id in novel else "base"
                for key in ("all", scope):
                    cls_total[key] += 1
                    if pr.category_id == gr.category_id:
                        cls_hits[key] += 1
            fp += used_p.count(False)
        else:
            fp += n_p
        for i, gr in enumerate(g_recs):
            if not matched_g[i]:
                fn += 1
            matched_timeline.setdefault(gr.track_id, []).append(matched_g[i])
            cov = coverage.setdefault(gr.track_id, [0, 0])
            cov[0] += int(matched_g[i])
            cov[1] += 1

    gt_count = sum(c[1] for c in coverage.values())
    mota = 1.0 - (fn + fp + switches) / max(1, gt_count)

    frag = 0
    for flags in matched_timeline.values():
        seen_match = False
        in_gap = False
        for m in flags:
            if m:
                if seen_match and in_gap:
                    frag += 1
                seen_match = True
                in_gap = False
            elif seen_match:
                in_gap = True

    mt = sum(1 for c in coverage.values() if c[0] >= 0.8 * c[1])
    ml = sum(1 for c in coverage.values() if c[0] <= 0.2 * c[1])

    idf1 = _idf1(gt, dump, iou_threshold)

    def ratio(scope):
        return cls_hits[scope] / cls_total[scope] if cls_total[scope] else None

    return MetricReport(
        mota=mota,
        idf1=idf1,
        id_switches=switches,
        fragmentations=frag,
        mostly_tracked=mt,
        mostly_lost=ml,
        true_positives=tp,
        false_positives=fp,
        false_negatives=fn,
        gt_count=gt_count,
        num_gt_tracks=len(coverage),
        num_pred_tracks=len({r.track_id for r in dump.records}),
        cls_accuracy=ratio("all"),
        cls_accuracy_base=ratio("base"),
        cls_accuracy_novel=ratio("novel"),
    )


def _idf1(gt: Scenario, dump: TrackDump, iou_threshold: float) -> float:
    """Identity F1: one global gt-to-pred identity assignment maximizing
    the number of frame-level overlaps it explains."""
    gt_ids = gt.track_ids()
    pred_ids = sorted({r.track_id for r in dump.records})
    gt_len = {g: len(gt.frames_of(g)) for g in gt_ids}
    pred_len: dict[int, int] = {p: 0 for p in pred_ids}
    for r in dump.records:
        pred_len[r.track_id] += 1
    total = sum(gt_len.values()) + sum(pred_len.values())
    if total == 0:
        return 1.0
    if not gt_ids or not pred_ids:
        return 0.0

    g_index = {g: i for i, g in enumerate(gt_ids)}
    p_index = {p: j for j, p in enumerate(pred_ids)}
    potential = np.zeros((len(gt_ids), len(pred_ids)))
    num_frames = max(gt.num_frames, dump.num_frames())
    for t in range(num_frames):
        for gr in gt.frame_records(t):
            for pr in dump.frame_records(t):
                if iou(gr.box, pr.box) >= iou_threshold:
                    potential[g_index[gr.track_id], p_index[pr.track_id]] += 1
    rows, cols = linear_sum_assignment(-potential)
    idtp = float(potential[rows, cols].sum())
    return 2.0 * idtp / total


def dump_from_scenario(scenario: Scenario, score: float = 1.0) -> TrackDump:
    """Perfect predictions straight from ground truth (self-evaluation)."""
    records = [TrackRecord(r.frame, r.track_id, r.category_id, r.box, score)
               for r in scenario.records]
    return TrackDump(records=records)
