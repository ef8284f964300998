import numpy as np
import pytest

import querytrack.autodiff as ad
from querytrack.autodiff import ParameterStore, Tensor, backward
from querytrack.nn import FeedForward, LayerNorm, Linear, MultiHeadAttention, ResidualFFN


def make_mha(d=8, heads=2, seed=0):
    store = ParameterStore(seed)
    return MultiHeadAttention(store, "attn", d, heads), store


class TestMultiHeadAttention:
    def test_output_shape(self, rng):
        mha, _ = make_mha()
        q = Tensor(rng.normal(size=(5, 8)))
        kv = Tensor(rng.normal(size=(7, 8)))
        assert mha(q, kv, kv).shape == (5, 8)

    def test_head_count_divides_width(self):
        store = ParameterStore(0)
        with pytest.raises(ValueError):
            MultiHeadAttention(store, "bad", 8, 3)

    def test_key_projection_has_no_bias(self):
        _, store = make_mha()
        assert "attn/k/w" in store
        assert "attn/k/b" not in store
        assert "attn/q/b" in store and "attn/v/b" in store

    def test_mask_shape_error(self, rng):
        mha, _ = make_mha()
        q = Tensor(rng.normal(size=(3, 8)))
        with pytest.raises(ValueError):
            mha(q, q, q, mask=np.zeros((3, 4), dtype=bool))

    def test_masked_weights_exactly_zero(self, rng):
        mha, _ = make_mha()
        q = Tensor(rng.normal(size=(4, 8)))
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 1] = mask[2, 3] = True
        trace = {}
        mha(q, q, q, mask=mask, trace=trace)
        for w in trace["weights"]:
            assert w[0, 1] == 0.0 and w[2, 3] == 0.0
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_fully_masked_query_row(self, rng):
        mha, _ = make_mha()
        q = Tensor(rng.normal(size=(3, 8)))
        mask = np.zeros((3, 3), dtype=bool)
        mask[1, :] = True
        trace = {}
        out = mha(q, q, q, mask=mask, trace=trace)
        for w in trace["weights"]:
            assert (w[1] == 0.0).all()
        # the fully masked row carries only the output projection bias
        store = ParameterStore(0)
        ref = MultiHeadAttention(store, "attn", 8, 2)
        np.testing.assert_allclose(out.data[1], store["attn/o/b"].data, atol=1e-12)

    def test_query_permutation_equivariance(self, rng):
        mha, _ = make_mha()
        q = Tensor(rng.normal(size=(5, 8)))
        kv = Tensor(rng.normal(size=(6, 8)))
        perm = np.array([3, 0, 4, 1, 2])
        out = mha(q, kv, kv).data
        out_p = mha(Tensor(q.data[perm]), kv, kv).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_key_permutation_invariance(self, rng):
        mha, _ = make_mha()
        q = Tensor(rng.normal(size=(4, 8)))
        kv = rng.normal(size=(6, 8))
        perm = np.array([5, 2, 0, 1, 4, 3])
        a = mha(q, Tensor(kv), Tensor(kv)).data
        b = mha(q, Tensor(kv[perm]), Tensor(kv[perm])).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_trace_contents(self, rng):
        mha, _ = make_mha(heads=2)
        q = Tensor(rng.normal(size=(3, 8)))
        trace = {}
        mha(q, q, q, trace=trace)
        assert len(trace["weights"]) == 2
        assert trace["pre_projection"].shape == (3, 8)

    def test_gradient_flows_to_projections(self, rng):
        mha, store = make_mha()
        q = Tensor(rng.normal(size=(4, 8)))
        backward(ad.reduce_sum(mha(q, q, q)))
        for name in ("attn/q/w", "attn/k/w", "attn/v/w", "attn/o/w"):
            assert store[name].grad is not None
            assert np.abs(store[name].grad).max() > 0


class TestBlocks:
    def test_linear_bias_optional(self):
        store = ParameterStore(0)
        Linear(store, "a", 4, 4, bias=False)
        assert "a/b" not in store

    def test_linear_zero_init(self, rng):
        store = ParameterStore(0)
        lin = Linear(store, "z", 4, 3, init="zeros")
        out = lin(Tensor(rng.normal(size=(2, 4))))
        assert (out.data == 0.0).all()

    def test_feedforward_zero_out_init_is_identity_zero(self, rng):
        store = ParameterStore(0)
        ffn = FeedForward(store, "f", 6, 12, d_out=4, out_init="zeros")
        out = ffn(Tensor(rng.normal(size=(3, 6))))
        assert (out.data == 0.0).all()
        # but gradient still reaches the zeroed layer's weights
        backward(ad.reduce_sum(ad.mul(ffn(Tensor(rng.normal(size=(3, 6)))), 2.0)))
        assert np.abs(store["f/lin2/w"].grad).max() > 0

    def test_layer_norm_normalizes(self, rng):
        store = ParameterStore(0)
        ln = LayerNorm(store, "n", 8)
        out = ln(Tensor(rng.normal(loc=3.0, scale=5.0, size=(4, 8)))).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-2)

    def test_residual_ffn_shape(self, rng):
        store = ParameterStore(0)
        block = ResidualFFN(store, "r", 8, 16)
        assert block(Tensor(rng.normal(size=(5, 8)))).shape == (5, 8)
