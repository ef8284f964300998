"""Dual-branch decoder with per-layer query propagation.

Each layer runs masked self-attention, image cross-attention (producing
the aligned queries), then forks: the object-feature branch refines boxes
and emits alignment features from a feed-forward output O_img, while the
category-text branch attends into the text embeddings and emits O_txt,
whose scaled dot products with the text rows become category scores. The
next layer consumes O_txt as content and the refined boxes' sin-cos
encoding as position, so position and content both iterate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .geometry import encode_boxes, inverse_sigmoid_t
from .isolation import category_isolation_mask, content_isolation_mask, difference_matrix
from .nn import FeedForward, LayerNorm, Linear, MultiHeadAttention, ResidualFFN

ROLE_DETECT = 0
ROLE_TRACK = 1


@dataclass
class QuerySet:
    content: Tensor              # [N, d]
    position: Tensor             # [N, d]
    ref_boxes: Tensor            # [N, 4] center-size reference boxes
    roles: np.ndarray            # [N] int8, detect rows first
    track_ids: list              # [N] persistent id or None for detect rows

    def __post_init__(self):
        n = self.content.shape[0]
        if self.position.shape != self.content.shape:
            raise ValueError(f"position shape {self.position.shape} != content shape {self.content.shape}")
        if self.ref_boxes.shape != (n, 4):
            raise ValueError(f"ref_boxes shape {self.ref_boxes.shape} != ({n}, 4)")
        if len(self.roles) != n or len(self.track_ids) != n:
            raise ValueError("roles/track_ids length mismatch with content rows")
        roles = np.asarray(self.roles)
        if roles.size and np.any(np.diff(roles) < 0):
            raise ValueError("detect rows must precede track rows")

    @property
    def size(self) -> int:
        return self.content.shape[0]

    @property
    def n_detect(self) -> int:
        return int(np.sum(np.asarray(self.roles) == ROLE_DETECT))

    @property
    def n_track(self) -> int:
        return self.size - self.n_detect

    @property
    def track_slice(self) -> slice:
        return slice(self.n_detect, self.size)


def concat_query_sets(a: QuerySet, b: QuerySet) -> QuerySet:
    """Append b's rows (track queries) after a's (detect queries)."""
    return QuerySet(
        content=ad.concat([a.content, b.content], axis=0),
        position=ad.concat([a.position, b.position], axis=0),
        ref_boxes=ad.concat([a.ref_boxes, b.ref_boxes], axis=0),
        roles=np.concatenate([np.asarray(a.roles), np.asarray(b.roles)]),
        track_ids=list(a.track_ids) + list(b.track_ids),
    )


@dataclass
class LayerOutput:
    boxes: Tensor                    # [N, 4] refined boxes, sigmoid-bounded
    logits: Tensor                   # [N, M] scaled dot products with the text rows
    scores: Tensor                   # [N, M] per-category probabilities (softmax of logits)
    o_img: Tensor                    # [N, d] object-feature branch output
    o_txt: Tensor                    # [N, d] category-text branch output
    aligned: Tensor                  # [N, d] aligned queries after image cross-attention
    f_align: Tensor                  # [N, d] alignment head output
    updated_position: Tensor         # [N, d] encoding of the refined boxes
    self_attn_mask: Optional[np.ndarray] = None  # mask applied at this layer
    self_attn_weights: Optional[list] = None     # per-head weights when traced


def scaled_dots(o_txt: Tensor, e_txt: Tensor, scale: Tensor) -> Tensor:
    """Raw classification logits: rescaled dot products with the text rows.

    Supervision sharpens a row by growing its projection onto the right
    text embedding; the learnable scale only keeps the overall magnitude
    in the softmax's working range, not the separation itself.
    """
    return ad.mul(scale, ad.matmul(o_txt, ad.transpose(e_txt)))


def category_logits(o_txt: Tensor, e_txt: Tensor, scale: Tensor) -> Tensor:
    """Score matrix S: softmax over categories of the scaled dot products."""
    return ad.masked_softmax(scaled_dots(o_txt, e_txt, scale))


class DecoderLayer:
    def __init__(self, store: ParameterStore, prefix: str, d: int, heads: int,
                 ffn_hidden: int):
        self.d = d
        self.self_attn = MultiHeadAttention(store, f"{prefix}/self_attn", d, heads)
        self.norm_self = LayerNorm(store, f"{prefix}/norm_self", d)
        self.img_attn = MultiHeadAttention(store, f"{prefix}/img_attn", d, heads)
        self.norm_img = LayerNorm(store, f"{prefix}/norm_img", d)
        self.ofa_ffn = ResidualFFN(store, f"{prefix}/ofa_ffn", d, ffn_hidden)
        # zero output init: boxes start exactly at the reference boxes and
        # every layer begins as the identity refinement
        self.box_head = FeedForward(store, f"{prefix}/box_head", d, d, d_out=4,
                                    out_init="zeros")
        self.align_head = Linear(store, f"{prefix}/align_head", d, d)
        self.txt_attn = MultiHeadAttention(store, f"{prefix}/txt_attn", d, heads)
        self.norm_txt = LayerNorm(store, f"{prefix}/norm_txt", d)
        self.cti_ffn = ResidualFFN(store, f"{prefix}/cti_ffn", d, ffn_hidden)
        # per-layer logit rescale plus a shared shift for the sigmoid path.
        # The shift starts every per-category probability near 0.01 so the
        # background term is quiet at init and cannot crush the scale
        # before matched queries have grown their projections; the softmax
        # score matrix is shift-invariant so S never sees it.
        self.score_scale = store.parameter(f"{prefix}/score_scale", (),
                                           init="constant", value=1.0)
        self.score_shift = store.parameter(f"{prefix}/score_shift", (),
                                           init="constant", value=-15.0)

    def __call__(self, qs: QuerySet, e_img: Tensor, img_pos: Tensor, e_txt: Tensor,
                 mask: Optional[np.ndarray], trace: bool = False) -> LayerOutput:
        attn_trace: Optional[dict] = {} if trace else None
        q = ad.add(qs.content, qs.position)
        sa = self.self_attn(q, q, qs.content, mask=mask, trace=attn_trace)
        content = self.norm_self(ad.add(qs.content, sa))
        ca = self.img_attn(ad.add(content, qs.position), ad.add(e_img, img_pos), e_img)
        aligned = self.norm_img(ad.add(content, ca))

        # object-feature branch
        o_img = self.ofa_ffn(aligned)
        f_align = self.align_head(o_img)
        delta = self.box_head(o_img)
        boxes = ad.sigmoid(ad.add(inverse_sigmoid_t(qs.ref_boxes), delta))

        # category-text branch
        ta = self.txt_attn(aligned, e_txt, e_txt)
        o_txt = self.cti_ffn(self.norm_txt(ad.add(aligned, ta)))
        dots = scaled_dots(o_txt, e_txt, self.score_scale)
        logits = ad.add(dots, self.score_shift)
        scores = ad.masked_softmax(dots)

        updated_position = encode_boxes(boxes, self.d)
        return LayerOutput(boxes=boxes, logits=logits, scores=scores, o_img=o_img, o_txt=o_txt,
                           aligned=aligned, f_align=f_align,
                           updated_position=updated_position,
                           self_attn_mask=None if mask is None else mask.copy(),
                           self_attn_weights=None if attn_trace is None else attn_trace["weights"])


class Decoder:
    """Stack of decoder layers with the isolation mask schedule.

    Layer 1 applies the content isolation mask (detect and track queries
    cannot see each other); every later layer applies the category
    isolation mask computed from the previous layer's score rows. Masked
    attention weights are exactly zero.
    """

    def __init__(self, store: ParameterStore, d: int, heads: int, ffn_hidden: int,
                 layers: int, isolation_multiple: float):
        if layers < 1:
            raise ValueError("decoder needs at least one layer")
        self.layers = [DecoderLayer(store, f"decoder/layer{i}", d, heads, ffn_hidden)
                       for i in range(layers)]
        self.isolation_multiple = isolation_multiple

    def run(self, qs: QuerySet, e_img: Tensor, img_pos: Tensor, e_txt: Tensor,
            trace: bool = False) -> list[LayerOutput]:
        outputs: list[LayerOutput] = []
        roles = qs.roles
        ids = qs.track_ids
        track_rows = qs.track_slice
        current = qs
        for index, layer in enumerate(self.layers):
            if index == 0:
                mask = content_isolation_mask(current.n_detect, current.n_track)
            else:
                diff = difference_matrix(outputs[-1].scores.data)
                mask = category_isolation_mask(diff, self.isolation_multiple,
                                               track_range=track_rows)
            out = layer(current, e_img, img_pos, e_txt, mask, trace=trace)
            outputs.append(out)
            current = QuerySet(content=out.o_txt, position=out.updated_position,
                               ref_boxes=out.boxes, roles=roles, track_ids=ids)
        return outputs
