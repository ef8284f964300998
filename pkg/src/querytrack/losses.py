"""Bipartite matching and the four-term tracking loss.

Detect queries are matched (classification + L1 + GIoU cost) against the
frame's newborn ground truths only; track queries are supervised by the
identity they carry, or toward background when that identity is absent.
Classification is focal loss on per-category sigmoid probabilities of
the raw logits, so a background query can genuinely drive every category
low; the softmax score matrix stays reserved for isolation masks and
inference confidence. Auxiliary losses run per decoder layer, all
reusing the final layer's assignment. The sequence loss divides the
summed frame losses by the total ground-truth object count of the clip.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor
from .bank import CategoryBank
from .decoder import LayerOutput
from .geometry import giou_matrix, paired_giou

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    cls_weight: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    align_weight: float = 2.0
    match_cls: float = 3.0
    match_l1: float = 5.0
    match_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int]]  # (query row, ground-truth index), query-sorted
    total_cost: float


def _lap_cost(cost: np.ndarray, row_ids: Sequence[int], col_ids: Sequence[int]) -> float:
    if len(row_ids) == 0 or len(col_ids) == 0:
        return 0.0
    sub = cost[np.ix_(row_ids, col_ids)]
    r, c = linear_sum_assignment(sub)
    return float(sub[r, c].sum())


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Minimum-cost bipartite assignment matching min(N, G) pairs.

    Among equal-cost optima the result is canonical: queries are scanned
    in index order and each takes the lowest ground-truth index that still
    admits an optimal completion, so ties break toward the lowest query
    index deterministically.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, g = cost.shape
    if n == 0 or g == 0:
        return MatchResult(pairs=[], total_cost=0.0)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    best = float(cost[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best))
    k = min(n, g)
    pairs: List[Tuple[int, int]] = []
    avail = list(range(g))
    fixed_cost = 0.0
    for q in range(n):
        rows_after = list(range(q + 1, n))
        chosen = None
        for c in avail:
            rest = [x for x in avail if x != c]
            completion_pairs = min(len(rows_after), len(rest))
            if len(pairs) + 1 + completion_pairs != k:
                continue
            if fixed_cost + cost[q, c] + _lap_cost(cost, rows_after, rest) <= best + tol:
                chosen = c
                break
        if chosen is not None:
            pairs.append((q, chosen))
            avail.remove(chosen)
            fixed_cost += float(cost[q, chosen])
        # otherwise q is unmatched in every optimal completion of this prefix
    return MatchResult(pairs=pairs, total_cost=best)


def focal_positive_cost(p: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """Focal positive term on raw probabilities (matching cost flavor)."""
    p = np.asarray(p, dtype=np.float64)
    return alpha * (1.0 - p) ** gamma * -np.log(np.maximum(p, PROB_FLOOR))


def detection_cost_matrix(scores: np.ndarray, boxes: np.ndarray,
                          gt_cols: np.ndarray, gt_boxes: np.ndarray,
                          weights: LossWeights) -> np.ndarray:
    """[N, G] matching cost: focal-positive + L1 + negative GIoU."""
    scores = np.asarray(scores, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    p = scores[:, np.asarray(gt_cols, dtype=np.intp)]  # [N, G]
    cls = focal_positive_cost(p, weights.focal_alpha, weights.focal_gamma)
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
    gi = giou_matrix(boxes, gt_boxes)
    return weights.match_cls * cls + weights.match_l1 * l1 + weights.match_giou * -gi


def focal_loss(scores: Tensor, target_cols: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0) -> Tensor:
    """Focal loss summed over queries and categories.

    ``target_cols[q]`` is the positive column for query q, or -1 for a
    background query (every column of which is pushed low). gamma 0 with
    alpha 1 reduces to plain cross-entropy on the positives.
    """
    n, m = scores.shape
    target_cols = np.asarray(target_cols)
    if target_cols.shape != (n,):
        raise ValueError(f"target_cols shape {target_cols.shape} != ({n},)")
    pos = np.zeros((n, m), dtype=np.float64)
    for q, c in enumerate(target_cols):
        if c >= 0:
            if c >= m:
                raise ValueError(f"target column {c} out of range for {m} categories")
            pos[q, int(c)] = 1.0
    neg = 1.0 - pos
    p = scores
    one_minus = 1.0 - p
    log_p = ad.log(ad.maximum(p, PROB_FLOOR))
    log_1m = ad.log(ad.maximum(one_minus, PROB_FLOOR))
    pos_term = ad.mul(ad.mul(pos * alpha, ad.power(one_minus, gamma)), -log_p)
    neg_term = ad.mul(ad.mul(neg * (1.0 - alpha), ad.power(p, gamma)), -log_1m)
    return ad.add(pos_term, neg_term).sum()


def alignment_loss(f_align: Tensor, targets: np.ndarray) -> Tensor:
    """Mean squared difference, normalized by rows times width."""
    n = f_align.shape[0]
    if n == 0:
        return Tensor(0.0)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != f_align.shape:
        raise ValueError(f"targets shape {targets.shape} != features shape {f_align.shape}")
    diff = f_align - targets
    return ad.mul(ad.mul(diff, diff).sum(), 1.0 / (n * f_align.shape[1]))


@dataclass
class FrameTargets:
    category_cols: np.ndarray   # [G] score-column index of each ground truth
    category_ids: np.ndarray    # [G] raw bank category id
    boxes: np.ndarray           # [G, 4] center-size
    gt_ids: List[int]           # [G] persistent identities

    @property
    def count(self) -> int:
        return len(self.gt_ids)


def match_frame(final: LayerOutput, n_detect: int, track_ids: Sequence[Optional[int]],
                targets: FrameTargets, weights: LossWeights,
                ) -> Tuple[MatchResult, List[Optional[int]]]:
    """Assign detect queries to newborn ground truths; resolve track targets.

    Returns the detect-side match (gt indices are into ``targets``) and,
    per track row, the index of the ground truth carrying its identity or
    None when that identity is absent this frame.
    """
    carried = set(t for t in track_ids if t is not None)
    newborn = [g for g, tid in enumerate(targets.gt_ids) if tid not in carried]
    if newborn and n_detect > 0:
        probs = expit(final.logits.data[:n_detect])
        boxes = final.boxes.data[:n_detect]
        cost = detection_cost_matrix(probs, boxes,
                                     targets.category_cols[newborn],
                                     targets.boxes[newborn], weights)
        raw = hungarian_match(cost)
        pairs = [(q, newborn[j]) for q, j in raw.pairs]
        match = MatchResult(pairs=pairs, total_cost=raw.total_cost)
    else:
        match = MatchResult(pairs=[], total_cost=0.0)
    by_id = {tid: g for g, tid in enumerate(targets.gt_ids)}
    track_assign = [by_id.get(tid) for tid in track_ids]
    return match, track_assign


def frame_loss(outputs: List[LayerOutput], n_detect: int,
               track_assign: Sequence[Optional[int]], targets: FrameTargets,
               match: MatchResult, weights: LossWeights,
               bank: CategoryBank) -> Tensor:
    """Weighted four-term loss summed over decoder layers.

    Every layer reuses the final layer's assignment. Box, GIoU and
    alignment terms cover matched detect queries and identity-supervised
    track queries; classification covers every query, background ones
    pushed toward all-low scores.
    """
    n_track = len(track_assign)
    n = n_detect + n_track
    target_cols = np.full(n, -1, dtype=np.int64)
    sup_rows: List[int] = []
    sup_gts: List[int] = []
    for q, g in match.pairs:
        target_cols[q] = targets.category_cols[g]
        sup_rows.append(q)
        sup_gts.append(g)
    for i, g in enumerate(track_assign):
        if g is not None:
            target_cols[n_detect + i] = targets.category_cols[g]
            sup_rows.append(n_detect + i)
            sup_gts.append(g)
    if sup_rows:
        rows = np.asarray(sup_rows, dtype=np.intp)
        gt_boxes = targets.boxes[np.asarray(sup_gts, dtype=np.intp)]
        v_rows = bank.supervision_rows([int(targets.category_ids[g]) for g in sup_gts])
    total: Optional[Tensor] = None
    for out in outputs:
        cls = focal_loss(ad.sigmoid(out.logits), target_cols,
                         weights.focal_alpha, weights.focal_gamma)
        layer = ad.mul(cls, weights.cls_weight)
        if sup_rows:
            pred = out.boxes[rows, :]
            l1 = ad.absolute(pred - gt_boxes).sum()
            gi = (1.0 - paired_giou(pred, gt_boxes)).sum()
            align = alignment_loss(out.f_align[rows, :], v_rows)
            layer = ad.add(layer, ad.add(ad.mul(l1, weights.l1_weight),
                                         ad.add(ad.mul(gi, weights.giou_weight),
                                                ad.mul(align, weights.align_weight))))
        total = layer if total is None else ad.add(total, layer)
    return total


def sequence_loss(frame_losses: List[Tensor], total_targets: int) -> Tensor:
    """Sum of frame losses over the clip divided by max(1, total targets)."""
    if not frame_losses:
        raise ValueError("sequence loss needs at least one frame")
    summed = reduce(ad.add, frame_losses)
    return ad.mul(summed, 1.0 / max(1, int(total_targets)))
