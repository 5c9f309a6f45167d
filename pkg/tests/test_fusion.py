import numpy as np
import pytest

from mmft import diffcore as dc
from mmft.fusion import (
    MMFTConfig,
    gated_fusion,
    init_gated_params,
    init_mmft_params,
    mmft_fuse,
    simple_fusion,
)
from mmft.textpipe import ConfigurationError


def rand_vectors(rng, b=1, d=8, k=3):
    return [dc.constant(rng.normal(size=(b, d))) for _ in range(k)]


class TestSimpleFusion:
    def test_ones_are_identity(self):
        rng = np.random.default_rng(0)
        h_q = dc.constant(rng.normal(size=(1, 8)))
        ones = dc.constant(np.ones((1, 8)))
        out = simple_fusion(h_q, ones, ones)
        np.testing.assert_array_equal(out.value, h_q.value)

    def test_zero_annihilates(self):
        rng = np.random.default_rng(1)
        h_q, h_v, _ = rand_vectors(rng)
        zeros = dc.constant(np.zeros((1, 8)))
        np.testing.assert_array_equal(simple_fusion(h_q, h_v, zeros).value, 0.0)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(2)
        h = rand_vectors(rng, d=8)
        out = simple_fusion(*h).value[0]
        expected = np.array([
            h[0].value[0, i] * h[1].value[0, i] * h[2].value[0, i] for i in range(8)
        ])
        np.testing.assert_array_equal(out, expected)

    def test_commutative_associative(self):
        rng = np.random.default_rng(3)
        a, b, c = rand_vectors(rng)
        # swapping the first two factors is exact in IEEE arithmetic;
        # regrouping is exact only up to one ulp
        np.testing.assert_array_equal(
            simple_fusion(a, b, c).value, simple_fusion(b, a, c).value
        )
        np.testing.assert_allclose(
            simple_fusion(a, b, c).value, simple_fusion(c, a, b).value, rtol=1e-14
        )

    def test_dimension_mismatch(self):
        with pytest.raises(dc.DimensionError):
            simple_fusion(dc.constant(np.ones((1, 8))), dc.constant(np.ones((1, 6))))


class TestMMFT:
    def make(self, seed=0, **kw):
        cfg = MMFTConfig(d_model=8, n_heads=2, d_ff=16, **kw)
        return cfg, init_mmft_params(cfg, seed=seed)

    def test_fuse_vector_starts_at_zero(self):
        _, params = self.make()
        np.testing.assert_array_equal(params["mmft.fuse"].value, 0.0)

    def test_order_invariance(self):
        cfg, params = self.make(seed=4)
        rng = np.random.default_rng(5)
        vectors = rand_vectors(rng, b=2, d=8)
        base, _ = mmft_fuse(cfg, params, vectors)
        for perm in ([1, 2, 0], [2, 1, 0], [0, 2, 1]):
            out, _ = mmft_fuse(cfg, params, [vectors[p] for p in perm])
            np.testing.assert_allclose(out.value, base.value, atol=1e-9)

    def test_type_embeddings_break_invariance(self):
        cfg, params = self.make(seed=6, type_embeddings=True)
        rng = np.random.default_rng(7)
        vectors = rand_vectors(rng, d=8)
        base, _ = mmft_fuse(cfg, params, vectors)
        out, _ = mmft_fuse(cfg, params, [vectors[2], vectors[1], vectors[0]])
        assert np.abs(out.value - base.value).max() > 1e-9

    def test_attention_rows_sum_to_one(self):
        cfg, params = self.make(seed=8)
        rng = np.random.default_rng(9)
        _, records = mmft_fuse(cfg, params, rand_vectors(rng, b=3, d=8))
        for record in records:
            for layer in record.layers:
                np.testing.assert_allclose(layer.sum(axis=-1), 1.0, atol=1e-9)

    def test_head_average_is_arithmetic_mean(self):
        cfg, params = self.make(seed=10)
        rng = np.random.default_rng(11)
        _, records = mmft_fuse(cfg, params, rand_vectors(rng, d=8))
        record = records[0]
        avg = record.head_average(0)
        manual = sum(record.layers[0][h] for h in range(cfg.n_heads)) / cfg.n_heads
        np.testing.assert_allclose(avg, manual, atol=1e-15)

    def test_two_layer_skip_changes_output(self):
        rng = np.random.default_rng(12)
        vecs = rand_vectors(rng, d=8)
        cfg_plain, params = self.make(seed=13, n_layers=2)
        cfg_skip = MMFTConfig(d_model=8, n_heads=2, d_ff=16, n_layers=2, use_skip=True)
        out_plain, _ = mmft_fuse(cfg_plain, params, vecs)
        out_skip, _ = mmft_fuse(cfg_skip, params, vecs)
        assert np.abs(out_plain.value - out_skip.value).max() > 1e-9

    def test_gradients_flow_to_all_streams(self):
        cfg, params = self.make(seed=14)
        rng = np.random.default_rng(15)
        vectors = [dc.Node(rng.normal(size=(1, 8)), requires_grad=True) for _ in range(3)]
        out, _ = mmft_fuse(cfg, params, vectors)
        dc.backward(dc.sum_node(dc.mul(out, out)))
        for v in vectors:
            assert v.grad is not None and np.abs(v.grad).max() > 0

    def test_head_divisibility(self):
        with pytest.raises(ConfigurationError):
            MMFTConfig(d_model=8, n_heads=3)


class TestGatedFusion:
    def setup_method(self):
        self.rng = np.random.default_rng(16)
        self.vectors = rand_vectors(self.rng, b=2, d=8)

    def test_open_gates_reduce_to_simple_fusion(self):
        params = init_gated_params(8, seed=17, variant="gated-ii")
        for name in ("q", "v", "s"):
            params[f"gate.{name}.w"].value = np.zeros((24, 8))
            params[f"gate.{name}.b"].value = np.full(8, 30.0)
        out = gated_fusion("gated-ii", params, self.vectors)
        expected = simple_fusion(*self.vectors)
        np.testing.assert_allclose(out.value, expected.value, atol=1e-9)

    def test_closed_gates_zero_output(self):
        params = init_gated_params(8, seed=18, variant="gated-ii")
        for name in ("q", "v", "s"):
            params[f"gate.{name}.w"].value = np.zeros((24, 8))
            params[f"gate.{name}.b"].value = np.full(8, -30.0)
        out = gated_fusion("gated-ii", params, self.vectors)
        np.testing.assert_allclose(out.value, 0.0, atol=1e-9)

    def test_variant_iii_matches_composed_oracle(self):
        params = init_gated_params(8, seed=19, variant="gated-iii")
        out = gated_fusion("gated-iii", params, self.vectors)
        assert out.value.shape == (2, 8)

        gated_product = gated_fusion("gated-ii", params, self.vectors).value
        plain_product = simple_fusion(*self.vectors).value
        both = np.concatenate([gated_product, plain_product], axis=-1)
        expected = both @ params["gate.merge.w"].value + params["gate.merge.b"].value
        np.testing.assert_allclose(out.value, expected, atol=1e-12)

    def test_variant_i_output_width(self):
        params = init_gated_params(8, seed=20, variant="gated-i")
        out = gated_fusion("gated-i", params, self.vectors)
        assert out.value.shape == (2, 8)

    def test_unknown_variant(self):
        params = init_gated_params(8, seed=21, variant="gated-ii")
        with pytest.raises(ConfigurationError):
            gated_fusion("gated-iv", params, self.vectors)

    def test_gradients_flow_to_all_streams(self):
        params = init_gated_params(8, seed=22, variant="gated-i")
        vectors = [dc.Node(self.rng.normal(size=(1, 8)), requires_grad=True) for _ in range(3)]
        out = gated_fusion("gated-i", params, vectors)
        dc.backward(dc.sum_node(dc.mul(out, out)))
        for v in vectors:
            assert v.grad is not None and np.abs(v.grad).max() > 0
