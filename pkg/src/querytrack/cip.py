"""Content-interaction propagation: turning frame-t outputs into frame-t+1
track queries.

The update attends over the track queries' object features (queries and
keys carry the refined-box position encoding, values do not), then pushes
the result through two feed-forward stages with residuals onto O_img and
the previous content. The new position part is purely geometric: the
sin-cos encoding of the refined boxes.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .decoder import ROLE_TRACK, QuerySet
from .geometry import encode_boxes
from .nn import FeedForward, LayerNorm, MultiHeadAttention


class CipUpdater:
    def __init__(self, store: ParameterStore, d: int, heads: int, ffn_hidden: int,
                 dropout: float = 0.0):
        self.d = d
        self.dropout = dropout
        self.attn = MultiHeadAttention(store, "cip/attn", d, heads)
        self.norm_attn = LayerNorm(store, "cip/norm_attn", d)
        self.ffn_a = FeedForward(store, "cip/ffn_a", d, ffn_hidden)
        self.ffn_b = FeedForward(store, "cip/ffn_b", d, ffn_hidden)
        self.norm_out = LayerNorm(store, "cip/norm_out", d)

    def __call__(self, o_img: Tensor, p_prime: Tensor, c_prev: Tensor, boxes: Tensor,
                 track_ids: Sequence[int],
                 rng: Optional[np.random.Generator] = None) -> QuerySet:
        """Build next-frame track queries from this frame's track rows.

        An empty input produces an empty query set without touching any
        parameter. Ids pass through unchanged, in order.
        """
        n = o_img.shape[0]
        if len(track_ids) != n:
            raise ValueError(f"{len(track_ids)} ids for {n} track rows")
        if n == 0:
            empty = Tensor(np.zeros((0, self.d)))
            return QuerySet(content=empty, position=Tensor(np.zeros((0, self.d))),
                            ref_boxes=Tensor(np.zeros((0, 4))),
                            roles=np.zeros(0, dtype=np.int8), track_ids=[])
        qk = ad.add(o_img, p_prime)
        attended = self.attn(qk, qk, o_img)
        o_r = self.norm_attn(ad.add(o_img, ad.dropout(attended, self.dropout, rng)))
        inner = ad.add(self.ffn_a(o_r), o_img)
        content = self.norm_out(ad.add(self.ffn_b(inner), c_prev))
        position = encode_boxes(boxes, self.d)
        return QuerySet(content=content, position=position, ref_boxes=boxes,
                        roles=np.full(n, ROLE_TRACK, dtype=np.int8),
                        track_ids=list(track_ids))
