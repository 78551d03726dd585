"""Tests for attention: exact MHA, masked / sunk patterns, mean attention."""

import math

import numpy as np
import pytest

from attention import (
    AttentionParams,
    MaskPattern,
    PatternKind,
    PatternMode,
    exact_mha,
    mean_attention_matrix,
    mha_with_pattern,
)
from tensor_core import DegenerateMaskError, ShapeError


def _oracle(x, p, weights=None):
    """Per-head loop in float64; `weights` post-processes each head's probabilities."""
    x = x.astype(np.float64)
    out = np.zeros((x.shape[0], p.model_dim))
    for h in range(p.heads):
        q = x @ p.q_weight[h].T.astype(np.float64) + p.q_bias[h]
        k = x @ p.k_weight[h].T.astype(np.float64) + p.k_bias[h]
        v = x @ p.v_weight[h].T.astype(np.float64) + p.v_bias[h]
        logits = q @ k.T / math.sqrt(p.head_dim)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        if weights is not None:
            probs = weights(logits, probs)
        out += probs @ v @ p.o_weight[h].T.astype(np.float64)
    return out + p.o_bias


def _zero_queries(p):
    return AttentionParams(np.zeros_like(p.q_weight), np.zeros_like(p.q_bias), p.k_weight, p.k_bias,
                           p.v_weight, p.v_bias, p.o_weight, p.o_bias)


class TestAttentionParams:
    def test_head_product_must_match(self):
        with pytest.raises(ShapeError):
            AttentionParams(np.zeros((2, 3, 5)), np.zeros((2, 3)), np.zeros((2, 3, 5)), np.zeros((2, 3)),
                            np.zeros((2, 3, 5)), np.zeros((2, 3)), np.zeros((2, 5, 3)), np.zeros(5))

    def test_fused_split_is_head_major(self, small_params):
        qkv_w, qkv_b, out_w, out_b = small_params.fused()
        d = small_params.head_dim
        np.testing.assert_array_equal(qkv_w[d:2 * d], small_params.q_weight[1])
        np.testing.assert_array_equal(out_w[:, d:2 * d], small_params.o_weight[1])
        again = AttentionParams.from_fused(qkv_w, qkv_b, out_w, out_b, small_params.heads)
        np.testing.assert_array_equal(again.v_weight, small_params.v_weight)


class TestMaskPattern:
    def test_type_one_bits(self):
        bits = MaskPattern.type_one({2}, 4).bits
        assert not bits[:, 2].any()
        assert bits[:, [0, 1, 3]].all()

    def test_type_two_keeps_self(self):
        bits = MaskPattern.type_two({2}, 4).bits
        assert bits[2, 2]
        assert not bits[[0, 1, 3], 2].any()

    def test_cls_not_allowed(self):
        with pytest.raises(ValueError):
            MaskPattern.type_one({0}, 4)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            MaskPattern.type_one({4}, 4)

    def test_complement_is_custom(self):
        pattern = MaskPattern.type_one({1}, 3)
        comp = pattern.complement()
        assert comp.kind is PatternKind.CUSTOM
        np.testing.assert_array_equal(comp.bits, ~pattern.bits)


class TestExactMha:
    def test_single_token(self, small_params, rng):
        x = rng.standard_normal((1, 8)).astype(np.float32)
        np.testing.assert_allclose(exact_mha(x, small_params), _oracle(x, small_params), atol=1e-5)
        v_sum = sum(
            (x.astype(np.float64) @ small_params.v_weight[h].T + small_params.v_bias[h]) @ small_params.o_weight[h].T
            for h in range(small_params.heads))
        np.testing.assert_allclose(exact_mha(x, small_params), v_sum + small_params.o_bias, atol=1e-5)

    def test_zero_queries_average_values(self, small_params, small_tokens):
        p = _zero_queries(small_params)
        out = exact_mha(small_tokens, p)
        np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-5)

    def test_matches_naive_oracle(self, rng):
        p = AttentionParams.random(heads=2, head_dim=3, seed=11)
        x = rng.standard_normal((8, 6)).astype(np.float32)
        np.testing.assert_allclose(exact_mha(x, p), _oracle(x, p), atol=1e-5)

    def test_column_mismatch(self, small_params):
        with pytest.raises(ShapeError):
            exact_mha(np.ones((3, 5)), small_params)

    def test_permutation_equivariance(self, small_params, small_tokens):
        perm = np.concatenate([[0], 1 + np.random.Generator(np.random.Philox(5)).permutation(12)])
        out = exact_mha(small_tokens, small_params)
        np.testing.assert_allclose(exact_mha(small_tokens[perm], small_params), out[perm], atol=1e-5)


class TestPatterns:
    @pytest.mark.parametrize("mode", list(PatternMode))
    def test_full_pattern_is_exact(self, small_params, small_tokens, mode):
        out = mha_with_pattern(small_tokens, small_params, MaskPattern.full(13), mode)
        np.testing.assert_allclose(out, exact_mha(small_tokens, small_params), atol=1e-6)

    def test_type_one_over_all_tokens_attends_cls(self, small_params, small_tokens):
        pattern = MaskPattern.type_one(range(1, 13), 13)
        out = mha_with_pattern(small_tokens, small_params, pattern, PatternMode.MASK)
        cls_only = _oracle(small_tokens[:1], small_params)
        np.testing.assert_allclose(out, np.broadcast_to(cls_only, out.shape), atol=1e-5)

    def test_type_two_sinking_rows(self, small_params, small_tokens):
        t = 4
        two = mha_with_pattern(small_tokens, small_params, MaskPattern.type_two({t}, 13), PatternMode.SINK)
        one = mha_with_pattern(small_tokens, small_params, MaskPattern.type_one({t}, 13), PatternMode.SINK)
        exact = exact_mha(small_tokens, small_params)
        np.testing.assert_allclose(two[t], exact[t], atol=1e-6)
        others = [i for i in range(13) if i != t]
        np.testing.assert_allclose(two[others], one[others], atol=1e-6)

    def test_masked_tokens_only_affect_their_own_rows(self, small_params, small_tokens):
        interest = {3, 7}
        pattern = MaskPattern.type_one(interest, 13)
        base = mha_with_pattern(small_tokens, small_params, pattern, PatternMode.MASK)
        bumped = small_tokens.copy()
        bumped[list(interest)] += 5.0
        out = mha_with_pattern(bumped, small_params, pattern, PatternMode.MASK)
        rest = [i for i in range(13) if i not in interest]
        np.testing.assert_allclose(out[rest], base[rest], atol=1e-5)

    def test_sink_partition_sums_to_exact(self, small_params, small_tokens):
        pattern = MaskPattern.type_one({2, 5}, 13)
        a = mha_with_pattern(small_tokens, small_params, pattern, PatternMode.SINK)
        b = mha_with_pattern(small_tokens, small_params, pattern.complement(), PatternMode.SINK)
        exact = exact_mha(small_tokens, small_params)
        bias = small_params.o_bias.astype(np.float64)
        np.testing.assert_allclose((a - bias) + (b - bias), exact - bias, atol=1e-5)

    @pytest.mark.parametrize("mode", list(PatternMode))
    @pytest.mark.parametrize("seed", range(10))
    def test_custom_pattern_permutation_equivariance(self, small_params, small_tokens, mode, seed):
        rng = np.random.Generator(np.random.Philox(seed))
        bits = rng.random((13, 13)) < 0.5
        np.fill_diagonal(bits, True)
        perm = np.concatenate([[0], 1 + rng.permutation(12)])
        out = mha_with_pattern(small_tokens, small_params, MaskPattern.custom(bits), mode)
        moved = mha_with_pattern(small_tokens[perm], small_params,
                                 MaskPattern.custom(bits[np.ix_(perm, perm)]), mode)
        np.testing.assert_allclose(moved, out[perm], atol=1e-5)

    def test_all_false_sink_leaves_bias(self, small_params, small_tokens):
        pattern = MaskPattern.custom(np.zeros((13, 13), dtype=bool))
        out = mha_with_pattern(small_tokens, small_params, pattern, PatternMode.SINK)
        np.testing.assert_allclose(out, np.broadcast_to(small_params.o_bias, out.shape), atol=1e-7)

    def test_all_false_mask_is_degenerate(self, small_params, small_tokens):
        pattern = MaskPattern.custom(np.zeros((13, 13), dtype=bool))
        with pytest.raises(DegenerateMaskError):
            mha_with_pattern(small_tokens, small_params, pattern, PatternMode.MASK)

    def test_size_mismatch(self, small_params, small_tokens):
        with pytest.raises(ShapeError):
            mha_with_pattern(small_tokens, small_params, MaskPattern.full(5), PatternMode.MASK)


class TestMeanAttention:
    def test_rows_sum_to_one(self, small_params, small_tokens):
        a = mean_attention_matrix(small_tokens, small_params)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)

    def test_zero_qk_is_uniform(self, small_params, small_tokens):
        p = AttentionParams(np.zeros_like(small_params.q_weight), np.zeros_like(small_params.q_bias),
                            np.zeros_like(small_params.k_weight), np.zeros_like(small_params.k_bias),
                            small_params.v_weight, small_params.v_bias, small_params.o_weight, small_params.o_bias)
        np.testing.assert_allclose(mean_attention_matrix(small_tokens, p), 1.0 / 13, atol=1e-7)

    def test_matches_averaging_oracle(self, small_params, small_tokens):
        x = small_tokens.astype(np.float64)
        total = np.zeros((13, 13))
        for h in range(small_params.heads):
            q = x @ small_params.q_weight[h].T + small_params.q_bias[h]
            k = x @ small_params.k_weight[h].T + small_params.k_bias[h]
            logits = q @ k.T / math.sqrt(small_params.head_dim)
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            total += e / e.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(mean_attention_matrix(small_tokens, small_params), total / 2, atol=1e-6)

    def test_single_head(self, rng):
        p = AttentionParams.random(heads=1, head_dim=4, seed=2)
        x = rng.standard_normal((5, 4)).astype(np.float32)
        x64 = x.astype(np.float64)
        logits = (x64 @ p.q_weight[0].T) @ (x64 @ p.k_weight[0].T).T / 2.0
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        np.testing.assert_allclose(mean_attention_matrix(x, p), e / e.sum(axis=1, keepdims=True), atol=1e-6)
