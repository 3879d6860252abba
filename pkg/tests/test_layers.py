import numpy as np
import pytest

from splm import autodiff as ad
from splm import layers
from splm.layers import AttentionMask, StackConfig

import oracles


def stack_params(cfg, seed=0, prefix="s"):
    rng = np.random.default_rng(seed)
    params = {}
    layers.init_stack(params, prefix, cfg, rng, np.float64)
    return params


class TestAttention:
    def setup_method(self):
        self.cfg = StackConfig(1, 16, 32, 2)
        rng = np.random.default_rng(7)
        self.params = {}
        layers.init_attention(self.params, "attn", 16, rng, np.float64)
        # identity projections for the closed-form cases
        self.id_params = {f"attn/{nm}": ad.parameter(np.eye(16))
                          for nm in ("wq", "wk", "wv", "wo")}

    def test_identity_mask_returns_value_projection(self, rng):
        x = ad.constant(rng.normal(size=(5, 16)))
        mask = AttentionMask(np.eye(5, dtype=bool))
        out = layers.attention(self.id_params, "attn", x, x, mask,
                               np.arange(5), np.arange(5), 2, 10000.0)
        # softmax over a single key is weight 1; values are un-rotated
        assert np.allclose(out.data, x.data, atol=1e-12)

    def test_equal_keys_values_collapse(self, rng):
        row = rng.normal(size=16)
        x = ad.constant(np.stack([row, row]))
        mask = AttentionMask(np.tril(np.ones((2, 2), bool)))
        out = layers.attention(self.id_params, "attn", x, x, mask,
                               np.zeros(2, dtype=int), np.zeros(2, dtype=int),
                               2, 10000.0)
        assert np.allclose(out.data[1], out.data[0], atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_against_naive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 16))
        allow = rng.random((6, 6)) > 0.4
        allow[np.arange(6), np.arange(6)] = True
        pos = np.arange(6)
        out = layers.attention(self.params, "attn", ad.constant(x), ad.constant(x),
                               AttentionMask(allow), pos, pos, 2, 10000.0)
        ref = oracles.naive_attention(self.params, "attn", x, x, allow, pos, pos, 2)
        assert np.abs(out.data - ref).max() <= 1e-6

    def test_row_without_keys_rejected(self):
        allow = np.tril(np.ones((3, 3), bool))
        allow[1] = False
        with pytest.raises(ValueError, match="no allowed key"):
            AttentionMask(allow)

    def test_masked_key_perturbation_is_invisible_bitwise(self, rng):
        x = rng.normal(size=(6, 16))
        allow = np.tril(np.ones((6, 6), bool))
        pos = np.arange(6)

        def run(inp):
            return layers.attention(self.params, "attn", ad.constant(inp),
                                    ad.constant(inp), AttentionMask(allow),
                                    pos, pos, 2, 10000.0).data

        base = run(x)
        pert = x.copy()
        pert[5] += 13.37  # key/value 5 is masked for queries 0..4
        assert np.array_equal(run(pert)[:5], base[:5])

    def test_rope_shift_invariance(self, rng):
        x = rng.normal(size=(6, 16))
        allow = np.tril(np.ones((6, 6), bool))
        a = layers.attention(self.params, "attn", ad.constant(x), ad.constant(x),
                             AttentionMask(allow), np.arange(6), np.arange(6),
                             2, 10000.0)
        b = layers.attention(self.params, "attn", ad.constant(x), ad.constant(x),
                             AttentionMask(allow), np.arange(6) + 1000,
                             np.arange(6) + 1000, 2, 10000.0)
        assert np.abs(a.data - b.data).max() <= 1e-6


class TestStack:
    def test_zero_layer_stack_is_identity_bitwise(self, rng):
        cfg = StackConfig(0, 16, 32, 2)
        x = ad.constant(rng.normal(size=(2, 5, 16)))
        out = layers.transformer_stack({}, "s", x, layers.causal_mask(5),
                                       np.arange(5), cfg)
        assert out is x

    def test_zero_weights_pass_through(self, rng):
        cfg = StackConfig(2, 16, 32, 2)
        params = stack_params(cfg)
        for name, t in params.items():
            if not name.endswith("/g"):
                t.data = np.zeros_like(t.data)
        x = ad.constant(rng.normal(size=(4, 16)))
        out = layers.transformer_stack(params, "s", x, layers.causal_mask(4),
                                       np.arange(4), cfg)
        assert np.array_equal(out.data, x.data)

    def test_one_layer_stack_grad_check(self):
        cfg = StackConfig(1, 8, 16, 2)
        params = stack_params(cfg, seed=3)
        rng = np.random.default_rng(5)
        x = ad.parameter(rng.normal(size=(4, 8)))
        mask = layers.causal_mask(4)
        w = ad.constant(rng.normal(size=(4, 8)))
        inputs = [x] + [params[k] for k in sorted(params)]

        def f():
            out = layers.transformer_stack(params, "s", x, mask, np.arange(4), cfg)
            return ad.sum_all(ad.mul(out, w))

        assert ad.grad_check(f, inputs) <= 1e-5

    def test_geglu_grad_check(self, rng):
        params = {"f/wgate": ad.parameter(rng.normal(size=(6, 12)) * 0.3),
                  "f/wval": ad.parameter(rng.normal(size=(6, 12)) * 0.3),
                  "f/wout": ad.parameter(rng.normal(size=(12, 6)) * 0.3)}
        x = ad.parameter(rng.normal(size=(3, 6)))
        w = ad.constant(rng.normal(size=(3, 6)))
        inputs = [x] + list(params.values())
        assert ad.grad_check(
            lambda: ad.sum_all(ad.mul(layers.geglu_block(params, "f", x), w)),
            inputs) <= 1e-5

    def test_width_mismatch_rejected(self, rng):
        cfg = StackConfig(1, 16, 32, 2)
        x = ad.constant(rng.normal(size=(4, 8)))
        with pytest.raises(ad.ShapeError, match="width"):
            layers.transformer_stack(stack_params(cfg), "s", x,
                                     layers.causal_mask(4), np.arange(4), cfg)


class TestAggregate:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.params = {}
        layers.init_attention(self.params, "agg", 16, rng, np.float64)
        self.id_params = {f"agg/{nm}": ad.parameter(np.eye(16))
                          for nm in ("wq", "wk", "wv", "wo")}

    def test_single_row_span_identity(self, rng):
        x = ad.constant(rng.normal(size=(6, 16)))
        out = layers.aggregate(self.id_params, "agg", x, (3, 3), 2, 10000.0)
        assert np.allclose(out.data, x.data[3], atol=1e-12)

    def test_constant_span_collapses(self, rng):
        row = rng.normal(size=16)
        x = ad.constant(np.tile(row, (5, 1)))
        span1 = layers.aggregate(self.params, "agg", x, (1, 4), 2, 10000.0)
        # attention over identical values returns the single-key result on
        # that value regardless of the weights
        ref = oracles.naive_attention(self.params, "agg", x.data[4:5], x.data[4:5],
                                      np.ones((1, 1), bool), [4], [4], 2)
        assert np.abs(span1.data - ref[0]).max() <= 1e-9

    @pytest.mark.parametrize("seed", range(4))
    def test_against_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(8, 16))
        out = layers.aggregate(self.params, "agg", ad.constant(x), (2, 5), 2, 10000.0)
        ref = oracles.naive_aggregate(self.params, x, (2, 5), 2)
        assert np.abs(out.data - ref).max() <= 1e-6

    def test_empty_span_rejected(self, rng):
        x = ad.constant(rng.normal(size=(4, 16)))
        with pytest.raises(ad.ShapeError):
            layers.aggregate(self.params, "agg", x, (3, 2), 2, 10000.0)

    def test_aggregate_many_matches_single(self, rng):
        x = rng.normal(size=(2, 8, 16))
        spans = np.array([[[0, 0], [1, 3], [4, 7]],
                          [[0, 0], [1, 5], [-1, -1]]])
        batched = layers.aggregate_many(self.params, "agg", ad.constant(x), spans,
                                        2, 10000.0)
        for b in range(2):
            for j in range(3):
                s, e = spans[b, j]
                if s < 0:
                    continue
                single = layers.aggregate(self.params, "agg",
                                          ad.constant(x[b]), (s, e), 2, 10000.0)
                assert np.abs(batched.data[b, j] - single.data).max() <= 1e-10

    def test_grad_check_aggregation(self):
        rng = np.random.default_rng(2)
        params = {}
        layers.init_attention(params, "agg", 8, rng, np.float64)
        x = ad.parameter(rng.normal(size=(1, 6, 8)))
        spans = np.array([[[0, 0], [1, 4], [5, 5]]])
        w = ad.constant(rng.normal(size=(1, 3, 8)))
        inputs = [x] + list(params.values())

        def f():
            out = layers.aggregate_many(params, "agg", x, spans, 2, 10000.0)
            return ad.sum_all(ad.mul(out, w))

        assert ad.grad_check(f, inputs) <= 1e-5


class TestAuxHead:
    def make(self, d=16, seed=0):
        cfg = StackConfig(2, d, 2 * d, 2)
        rng = np.random.default_rng(seed)
        params = {}
        layers.init_stack(params, "aux", cfg, rng, np.float64)
        layers.init_norm(params, "aux/head/norm", d, np.float64)
        params["aux/head/w"] = ad.parameter(rng.normal(size=(d, 320)) * 0.02)
        return cfg, params

    def test_uniform_and_saturated_entropy(self):
        cfg, params = self.make()
        assert abs(float(ad.entropy_from_logits(np.zeros((1, 320)))[0])
                   - np.log(320)) < 1e-12
        sat = np.zeros((1, 320))
        sat[0, 7] = 1000.0
        assert float(ad.entropy_from_logits(sat)[0]) < 1e-9

    def test_entropy_matches_oracle(self, rng):
        cfg, params = self.make()
        x = ad.constant(rng.normal(size=(1, 5, 16)))
        _, logits, ent = layers.aux_entropy_head(params, "aux", x,
                                                 layers.causal_mask(5),
                                                 np.arange(5), cfg)
        for i in range(5):
            assert abs(ent[0, i] - oracles.naive_entropy(logits.data[0, i])) <= 1e-10

    def test_gradient_stops_at_input(self, rng):
        cfg, params = self.make()
        x = ad.parameter(rng.normal(size=(1, 4, 16)))
        _, logits, _ = layers.aux_entropy_head(params, "aux", x,
                                               layers.causal_mask(4),
                                               np.arange(4), cfg)
        ad.backward(ad.cross_entropy(logits, np.zeros((1, 4), dtype=int)))
        assert x.grad is None
        assert params["aux/head/w"].grad is not None
