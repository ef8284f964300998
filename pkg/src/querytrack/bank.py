"""Category embedding bank: a controlled stand-in for a vision-language backbone.

Every category has a text embedding on the unit sphere. Base categories
additionally expose an image embedding whose cosine with the text row hits
the configured alignment exactly; novel categories expose text only, so
they can never be supervised, only retrieved. A third table, appearance,
is what the synthetic renderer paints into feature grids: for base
categories it equals the image embedding, for novel categories it is an
equally aligned vector that exists in the "world" but not in the
supervision tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Box, box_from_corners

NEGATIVE_POWER = 0.7  # negatives are sampled proportional to count ** 0.7


@dataclass
class CategoryBank:
    names: list[str]
    counts: np.ndarray          # [M] dataset frequency; zero for novel rows
    base_flags: np.ndarray      # [M] bool, True for base (supervisable) rows
    text: np.ndarray            # [M, d] unit rows
    image: np.ndarray           # [M, d] unit rows for base, zero rows for novel
    appearance: np.ndarray      # [M, d] unit rows for all categories
    dim: int
    alignment: float
    seed: int

    @property
    def total(self) -> int:
        return len(self.names)

    def base_ids(self) -> list[int]:
        return [i for i, f in enumerate(self.base_flags) if f]

    def novel_ids(self) -> list[int]:
        return [i for i, f in enumerate(self.base_flags) if not f]

    def supervision_rows(self, category_ids: Sequence[int]) -> np.ndarray:
        """Image-embedding rows used as alignment targets. Base rows only."""
        out = np.empty((len(category_ids), self.dim), dtype=np.float64)
        for i, cid in enumerate(category_ids):
            if not 0 <= cid < self.total:
                raise KeyError(f"category id {cid} out of range")
            if not self.base_flags[cid]:
                raise KeyError(f"category {cid} ({self.names[cid]}) is novel; "
                               "it has no image embedding to supervise against")
            out[i] = self.image[cid]
        return out

    def metadata_text(self) -> str:
        lines = []
        for i, name in enumerate(self.names):
            kind = "base" if self.base_flags[i] else "novel"
            lines.append(f"{i}\t{name}\t{int(self.counts[i])}\t{kind}")
        return "\n".join(lines) + "\n"


@dataclass
class CategorySample:
    ids: list[int]
    contains_ground_truth: bool


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise ValueError("cannot normalize a (near-)zero vector")
    return v / norm


def average_image_embeddings(embeddings: np.ndarray) -> np.ndarray:
    """Normalize each crop embedding, average, and re-normalize.

    Raises on zero rows and on averages that cancel to zero (e.g. two
    exactly opposite unit vectors), since a direction is undefined there.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise ValueError(f"expected a non-empty [n, d] array, got shape {embeddings.shape}")
    rows = np.empty_like(embeddings)
    for i, row in enumerate(embeddings):
        rows[i] = _unit(row)
    return _unit(rows.mean(axis=0))


def crop_box_with_factor(box: Box, factor: float = 1.2) -> Box:
    """Scale a box about its center, then clip the crop to the unit square."""
    if factor <= 0:
        raise ValueError(f"crop factor must be positive, got {factor}")
    half_w, half_h = box.w * factor / 2.0, box.h * factor / 2.0
    x0 = max(0.0, box.cx - half_w)
    y0 = max(0.0, box.cy - half_h)
    x1 = min(1.0, box.cx + half_w)
    y1 = min(1.0, box.cy + half_h)
    return box_from_corners(x0, y0, x1, y1)


def _aligned_vector(text_row: np.ndarray, alignment: float, rng: np.random.Generator,
                    crops_per_category: int) -> np.ndarray:
    """Blend simulated crop draws into a vector with exact cosine ``alignment``."""
    d = text_row.shape[0]
    crops = np.empty((crops_per_category, d), dtype=np.float64)
    for i in range(crops_per_category):
        crops[i] = _unit(text_row + 0.75 * rng.standard_normal(d))
    mean_dir = average_image_embeddings(crops)
    residual = mean_dir - np.dot(mean_dir, text_row) * text_row
    if np.linalg.norm(residual) < 1e-12:
        # crops collapsed onto the text direction; pick any orthogonal one
        residual = rng.standard_normal(d)
        residual -= np.dot(residual, text_row) * text_row
    residual = _unit(residual)
    return alignment * text_row + np.sqrt(max(0.0, 1.0 - alignment**2)) * residual


def build_surrogate_bank(num_base: int, num_novel: int, dim: int, alignment: float,
                         seed: int, crops_per_category: int = 4,
                         counts: Optional[Sequence[int]] = None,
                         names: Optional[Sequence[str]] = None) -> CategoryBank:
    """Construct a seeded bank of num_base + num_novel categories.

    cosine(text_i, image_i) equals ``alignment`` exactly for every base
    row; novel rows get a zero image embedding but a real appearance row
    built the same way, so rendered scenes still carry their signature.
    """
    if num_base < 1 or num_novel < 0:
        raise ValueError("need at least one base category and num_novel >= 0")
    if not 0.0 <= alignment <= 1.0:
        raise ValueError(f"alignment must be in [0, 1], got {alignment}")
    total = num_base + num_novel
    rng = np.random.default_rng(seed)
    if names is None:
        names = [f"cat{i:02d}" for i in range(total)]
    elif len(names) != total:
        raise ValueError(f"got {len(names)} names for {total} categories")
    if counts is None:
        counts_arr = np.zeros(total, dtype=np.int64)
        counts_arr[:num_base] = rng.integers(20, 400, size=num_base)
    else:
        counts_arr = np.asarray(counts, dtype=np.int64)
        if counts_arr.shape != (total,):
            raise ValueError(f"counts must have length {total}")
    base_flags = np.zeros(total, dtype=bool)
    base_flags[:num_base] = True

    text = np.empty((total, dim), dtype=np.float64)
    appearance = np.empty((total, dim), dtype=np.float64)
    for i in range(total):
        text[i] = _unit(rng.standard_normal(dim))
    for i in range(total):
        appearance[i] = _aligned_vector(text[i], alignment, rng, crops_per_category)
    image = np.where(base_flags[:, None], appearance, 0.0)
    return CategoryBank(names=list(names), counts=counts_arr, base_flags=base_flags,
                        text=text, image=image, appearance=appearance, dim=dim,
                        alignment=alignment, seed=seed)


def sample_categories(bank: CategoryBank, ground_truth_ids: Iterable[int], k: int,
                      seed: int) -> CategorySample:
    """Pick the per-clip category set: all ground-truth ids plus negatives.

    Negatives are drawn without replacement with probability proportional
    to count ** 0.7; zero-count categories (the novel rows) are never
    drawn. If every remaining candidate has zero weight the draw falls
    back to uniform so the requested size is still met.
    """
    gt = sorted(set(int(c) for c in ground_truth_ids))
    for cid in gt:
        if not 0 <= cid < bank.total:
            raise ValueError(f"ground-truth category id {cid} out of range")
    if k < len(gt):
        raise ValueError(f"sample size {k} smaller than {len(gt)} ground-truth categories")
    if k > bank.total:
        raise ValueError(f"sample size {k} exceeds bank size {bank.total}")
    rng = np.random.default_rng(seed)
    chosen = list(gt)
    candidates = [i for i in range(bank.total) if i not in set(gt)]
    need = k - len(gt)
    if need > 0:
        weights = np.asarray([bank.counts[i] for i in candidates], dtype=np.float64) ** NEGATIVE_POWER
        total_w = weights.sum()
        if total_w <= 0.0:
            picks = rng.choice(len(candidates), size=need, replace=False)
        else:
            # sequential weighted draws without replacement
            picks = []
            pool = list(range(len(candidates)))
            w = weights.copy()
            for _ in range(need):
                s = w[pool].sum()
                if s <= 0.0:
                    idx = pool[int(rng.integers(len(pool)))]
                else:
                    idx = rng.choice(pool, p=w[pool] / s)
                picks.append(idx)
                pool.remove(idx)
            picks = np.asarray(picks)
        chosen.extend(candidates[int(i)] for i in picks)
    return CategorySample(ids=chosen, contains_ground_truth=len(gt) > 0)
