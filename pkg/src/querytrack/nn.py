"""Layer wrappers over the autodiff engine.

Each layer binds named parameters out of a ParameterStore at construction
time, so building a model eagerly fixes the rng stream and two models
built from the same seed are bit-identical.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 bias: bool = True, init: str = "uniform"):
        self.w = store.parameter(f"{name}/w", (d_in, d_out), fan_in=d_in, init=init)
        self.b = store.parameter(f"{name}/b", (d_out,), fan_in=d_in,
                                 init=init) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.w)
        if self.b is not None:
            out = ad.add(out, self.b)
        return out


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, d: int, eps: float = 1e-5):
        self.gain = store.parameter(f"{name}/gain", (d,), init="ones")
        self.bias = store.parameter(f"{name}/bias", (d,), init="zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, eps=self.eps)


class FeedForward:
    """Two-layer MLP with ReLU. No residual; callers compose their own."""

    def __init__(self, store: ParameterStore, name: str, d: int, hidden: int,
                 d_out: Optional[int] = None, out_init: str = "uniform"):
        self.lin1 = Linear(store, f"{name}/lin1", d, hidden)
        self.lin2 = Linear(store, f"{name}/lin2", hidden,
                           d_out if d_out is not None else d, init=out_init)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ad.relu(self.lin1(x)))


class ResidualFFN:
    """norm(x + FeedForward(x)), the block both encoder and decoder reuse."""

    def __init__(self, store: ParameterStore, name: str, d: int, hidden: int):
        self.ffn = FeedForward(store, f"{name}/ffn", d, hidden)
        self.norm = LayerNorm(store, f"{name}/norm", d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(ad.add(x, self.ffn(x)))


class MultiHeadAttention:
    """Projected scaled-dot-product attention with hard boolean masking.

    The mask is [Nq, Nk] with True meaning "this key is invisible to this
    query"; it is shared across heads. Masked weights are exactly zero and
    a fully masked query row yields a zero vector before the output
    projection (so the projected output is just the output bias).
    """

    def __init__(self, store: ParameterStore, name: str, d: int, heads: int):
        if d % heads != 0:
            raise ValueError(f"model width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.proj_q = Linear(store, f"{name}/q", d, d)
        # no key bias: softmax is invariant to a uniform logit shift, so a
        # key bias is unidentifiable (its gradient is identically zero)
        self.proj_k = Linear(store, f"{name}/k", d, d, bias=False)
        self.proj_v = Linear(store, f"{name}/v", d, d)
        self.proj_o = Linear(store, f"{name}/o", d, d)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor,
                 mask: Optional[np.ndarray] = None,
                 trace: Optional[dict] = None) -> Tensor:
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            expected = (q.shape[0], k.shape[0])
            if mask.shape != expected:
                raise ValueError(f"attention mask shape {mask.shape} != {expected}")
        qp, kp, vp = self.proj_q(q), self.proj_k(k), self.proj_v(v)
        inv_sqrt = 1.0 / math.sqrt(self.head_dim)
        outputs = []
        recorded = []
        for h in range(self.heads):
            cols = slice(h * self.head_dim, (h + 1) * self.head_dim)
            scores = ad.mul(ad.matmul(qp[:, cols], ad.transpose(kp[:, cols])), inv_sqrt)
            weights = ad.masked_softmax(scores, mask)
            outputs.append(ad.matmul(weights, vp[:, cols]))
            if trace is not None:
                recorded.append(weights.data.copy())
        pre = ad.concat(outputs, axis=1)
        if trace is not None:
            trace["weights"] = recorded
            trace["pre_projection"] = pre.data.copy()
        return self.proj_o(pre)
