"""Query isolation machinery for decoder self-attention.

Two boolean masks, both with True meaning "suppress this attention edge":

* the content mask separates detection from track queries and is applied
  only in the first decoder layer;
* the category mask suppresses attention between queries whose category
  distributions (from the previous layer) are far apart under symmetric
  KL, and is applied in every layer after the first. Track-track edges are
  exempt so an object's history always stays visible to itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .autodiff import Tensor

PROB_FLOOR = 1e-12
ROW_SUM_TOL = 1e-6


@dataclass
class DifferenceMatrix:
    values: np.ndarray  # [N, N] symmetric, zero diagonal
    mean: float         # mean of the off-diagonal entries (0.0 when N == 1)


def difference_matrix(scores: Union[np.ndarray, Tensor]) -> DifferenceMatrix:
    """Pairwise symmetric KL divergence between query score rows.

    Rows must be probability vectors (non-negative, summing to 1 within
    1e-6). Probabilities are floored at 1e-12 inside the logarithms only,
    which keeps every entry finite without renormalizing the rows.
    """
    if isinstance(scores, Tensor):
        scores = scores.data
    p = np.asarray(scores, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected [N, M] score rows, got shape {p.shape}")
    for i, row in enumerate(p):
        if (row < 0.0).any():
            raise ValueError(f"score row {i} has negative entries")
        if abs(row.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError(f"score row {i} sums to {row.sum():.9f}, not 1")
    logs = np.log(np.maximum(p, PROB_FLOOR))
    # sym KL identity: KL(i||j) + KL(j||i) = sum_m (p_i - p_j) (log p_i - log p_j)
    diff_p = p[:, None, :] - p[None, :, :]
    diff_l = logs[:, None, :] - logs[None, :, :]
    values = (diff_p * diff_l).sum(axis=2)
    n = values.shape[0]
    np.fill_diagonal(values, 0.0)
    if n > 1:
        mean = float((values.sum()) / (n * (n - 1)))
    else:
        mean = 0.0
    return DifferenceMatrix(values=values, mean=mean)


def category_isolation_mask(diff: DifferenceMatrix, multiple: float,
                            track_range: Optional[slice] = None) -> np.ndarray:
    """True where the divergence strictly exceeds multiple * mean.

    The diagonal can never mask itself (divergence 0) and track-track
    positions are forced False regardless of divergence.
    """
    if multiple <= 0.0:
        raise ValueError(f"isolation multiple must be positive, got {multiple}")
    threshold = multiple * diff.mean
    mask = diff.values > threshold
    if track_range is not None:
        mask[track_range, track_range] = False
    return mask


def content_isolation_mask(n_detect: int, n_track: int) -> np.ndarray:
    """Block detect<->track attention; within-group edges stay open."""
    if n_detect < 0 or n_track < 0:
        raise ValueError("query counts must be non-negative")
    n = n_detect + n_track
    mask = np.zeros((n, n), dtype=bool)
    mask[:n_detect, n_detect:] = True
    mask[n_detect:, :n_detect] = True
    return mask


# ---------------------------------------------------------------------------
# plain-text debug dumps (golden-file friendly)


def mask_to_text(mask: np.ndarray) -> str:
    return "\n".join("".join("1" if v else "0" for v in row) for row in np.asarray(mask, dtype=bool)) + "\n"


def mask_from_text(text: str) -> np.ndarray:
    rows = [line for line in text.splitlines() if line]
    return np.array([[c == "1" for c in line] for line in rows], dtype=bool)


def difference_to_text(diff: DifferenceMatrix) -> str:
    body = "\n".join(" ".join(f"{v:.12e}" for v in row) for row in diff.values)
    return f"mean {diff.mean:.12e}\n{body}\n"
