"""Scene rasterization and the image-text fusion encoder.

There is no pixel backbone here: a frame is rendered straight into a grid
of feature tokens. Each cell accumulates the appearance embeddings of the
objects overlapping it (weighted by the fraction of the object inside the
cell, then normalized to unit length) plus isotropic Gaussian noise. The
fusion encoder then runs alternating text->image and image->text
cross-attention before any queries exist.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .bank import CategoryBank
from .decoder import ROLE_DETECT, QuerySet
from .geometry import Box, encode_boxes, encode_points
from .nn import Linear, LayerNorm, MultiHeadAttention, ResidualFFN


@dataclass
class FeatureGrid:
    tokens: np.ndarray           # [rows*cols, d]
    token_positions: np.ndarray  # [rows*cols, d] sin-cos of cell centers
    rows: int
    cols: int


@dataclass
class TextFeatures:
    embeddings: np.ndarray  # [M, d] text rows, in sampled order
    category_ids: list[int]


def cell_overlap_fraction(box: Box, row: int, col: int, rows: int, cols: int) -> float:
    """Fraction of the box's area that falls inside cell (row, col)."""
    x0, y0, x1, y1 = box.corners()
    cx0, cx1 = col / cols, (col + 1) / cols
    cy0, cy1 = row / rows, (row + 1) / rows
    iw = max(0.0, min(x1, cx1) - max(x0, cx0))
    ih = max(0.0, min(y1, cy1) - max(y0, cy0))
    return iw * ih / box.area()


def rasterize_scene(objects: Sequence[Tuple[int, Box]], bank: CategoryBank,
                    rows: int, cols: int, noise: float,
                    rng: Optional[np.random.Generator] = None) -> FeatureGrid:
    """Render (category, box) records into a token grid.

    Empty cells are pure noise (exactly zero with noise 0). Noise draws
    consume rng in cell order regardless of occupancy so two scenes with
    the same rng state use identical noise fields.
    """
    if rows < 1 or cols < 1:
        raise ValueError("grid must have at least one row and column")
    if noise < 0:
        raise ValueError(f"noise scale must be non-negative, got {noise}")
    if noise > 0 and rng is None:
        raise ValueError("rasterize with noise > 0 needs an explicit rng")
    d = bank.dim
    accum = np.zeros((rows * cols, d), dtype=np.float64)
    for category_id, box in objects:
        if not 0 <= category_id < bank.total:
            raise ValueError(f"category id {category_id} out of range")
        emb = bank.appearance[category_id]
        x0, y0, x1, y1 = box.corners()
        c_lo = max(0, int(np.floor(x0 * cols)))
        c_hi = min(cols - 1, int(np.floor(x1 * cols - 1e-12)))
        r_lo = max(0, int(np.floor(y0 * rows)))
        r_hi = min(rows - 1, int(np.floor(y1 * rows - 1e-12)))
        for r in range(r_lo, r_hi + 1):
            for c in range(c_lo, c_hi + 1):
                frac = cell_overlap_fraction(box, r, c, rows, cols)
                if frac > 0.0:
                    accum[r * cols + c] += frac * emb
    norms = np.linalg.norm(accum, axis=1, keepdims=True)
    tokens = np.divide(accum, norms, out=np.zeros_like(accum), where=norms > 1e-12)
    if noise > 0:
        tokens = tokens + noise * rng.standard_normal(tokens.shape)
    centers = np.array([[(c + 0.5) / cols, (r + 0.5) / rows]
                        for r in range(rows) for c in range(cols)])
    with ad.no_grad():
        positions = encode_points(Tensor(centers), d).data
    return FeatureGrid(tokens=tokens, token_positions=positions, rows=rows, cols=cols)


class FusionEncoder:
    """Pre-fusion of image tokens and text embeddings, plus query init."""

    def __init__(self, store: ParameterStore, d: int, heads: int, ffn_hidden: int,
                 layers: int, max_queries: int):
        self.d = d
        self.layers = layers
        self.max_queries = max_queries
        self.blocks = []
        for i in range(layers):
            prefix = f"encoder/layer{i}"
            self.blocks.append({
                "t2i": MultiHeadAttention(store, f"{prefix}/t2i", d, heads),
                "norm_t": LayerNorm(store, f"{prefix}/norm_t", d),
                "ffn_t": ResidualFFN(store, f"{prefix}/ffn_t", d, ffn_hidden),
                "i2t": MultiHeadAttention(store, f"{prefix}/i2t", d, heads),
                "norm_i": LayerNorm(store, f"{prefix}/norm_i", d),
                "ffn_i": ResidualFFN(store, f"{prefix}/ffn_i", d, ffn_hidden),
            })
        self.objectness = Linear(store, "encoder/objectness", d, 1)
        self.content_slots = store.parameter("queries/content", (max_queries, d), fan_in=d)

    def pre_fuse(self, grid: FeatureGrid, text: TextFeatures) -> Tuple[Tensor, Tensor]:
        """Alternate text<-image and image<-text attention. Zero layers is identity."""
        img = Tensor(grid.tokens)
        pos = Tensor(grid.token_positions)
        txt = Tensor(text.embeddings)
        for block in self.blocks:
            img_pe = ad.add(img, pos)
            t_att = block["t2i"](txt, img_pe, img)
            txt = block["norm_t"](ad.add(txt, t_att))
            txt = block["ffn_t"](txt)
            i_att = block["i2t"](ad.add(img, pos), txt, txt)
            img = block["norm_i"](ad.add(img, i_att))
            img = block["ffn_i"](img)
        return img, txt

    def init_queries(self, e_img: Tensor, grid: FeatureGrid, n: int) -> QuerySet:
        """Top-n objectness cells become reference points for detect queries.

        Reference boxes sit on the chosen cell centers with side 2/cols;
        content rows come from the learnable slot table, so they are the
        same in every frame.
        """
        if n > self.max_queries:
            raise ValueError(f"requested {n} queries but only {self.max_queries} content slots exist")
        if n < 1:
            raise ValueError("need at least one detect query")
        scores = (e_img @ self.objectness.w + self.objectness.b).data[:, 0]
        order = np.argsort(-scores, kind="stable")  # ties resolve to the lower cell index
        picked = np.sort(order[:n])
        side = 2.0 / grid.cols
        refs = np.empty((n, 4), dtype=np.float64)
        for i, t in enumerate(picked):
            r, c = divmod(int(t), grid.cols)
            refs[i] = ((c + 0.5) / grid.cols, (r + 0.5) / grid.rows, side, side)
        ref_boxes = Tensor(refs)
        content = self.content_slots[0:n, :]
        with ad.no_grad():
            position = encode_boxes(ref_boxes, self.d)
        return QuerySet(content=content, position=position, ref_boxes=ref_boxes,
                        roles=np.full(n, ROLE_DETECT, dtype=np.int8),
                        track_ids=[None] * n)
