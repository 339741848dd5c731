"""
Test Suite: Cross-attention fusion and feature-space diversity
"""

import math

import numpy as np
import pytest

from src.errors import NonFiniteError, ShapeError
from src.feature_diversity import (COLUMN_EPS, EPS, AttentionParams, FeatureBlock, FeatureFusion, FusedBatch,
                                   FusionPlan, conditional_probabilities, default_block_pairs, diverse_feat_loss,
                                   feature_kl, fuse_cross_attention, fused_feature_kl, similarity_kernel,
                                   token_count)
from src.tensor_autodiff import Tensor, grad_check


def _kernel(a, b):
    return (a @ b / ((np.linalg.norm(a) + EPS) * (np.linalg.norm(b) + EPS)) + 1.0) / 2.0


def _brute_force_p(g):
    n = g.shape[0]
    p = np.zeros((n, n))
    for j in range(n):
        denominator = sum(_kernel(g[k], g[j]) for k in range(n) if k != j)
        for i in range(n):
            if i != j:
                p[i, j] = _kernel(g[i], g[j]) / (denominator + COLUMN_EPS)
    return p


def _brute_force_kl(g_from, g_to):
    p, q = _brute_force_p(g_from), _brute_force_p(g_to)
    n = g_from.shape[0]
    total = 0.0
    for j in range(n):
        for i in range(n):
            if i != j:
                total += p[i, j] * math.log((p[i, j] + EPS) / (q[i, j] + EPS))
    return total / n


class TestSimilarityKernel:
    """Cosine kernel mapped into [0, 1]"""

    def test_parallel_orthogonal_opposite(self):
        a = Tensor(np.array([1.0, 0.0]))
        assert similarity_kernel(a, Tensor(np.array([2.0, 0.0]))).item() == pytest.approx(1.0, abs=1e-7)
        assert similarity_kernel(a, Tensor(np.array([0.0, 3.0]))).item() == pytest.approx(0.5, abs=1e-12)
        assert similarity_kernel(a, Tensor(np.array([-1.0, 0.0]))).item() == pytest.approx(0.0, abs=1e-7)

    def test_zero_vector_is_finite(self):
        out = similarity_kernel(Tensor(np.zeros(3)), Tensor(np.ones(3))).item()
        assert out == pytest.approx(0.5)


class TestConditionalProbabilities:
    """p_{i|j} normalised over k != j"""

    @pytest.mark.parametrize("n", [2, 3, 4, 5])
    def test_matches_brute_force(self, n):
        rng = np.random.default_rng(n)
        g = rng.standard_normal((n, 6))
        p = conditional_probabilities(FusedBatch(Tensor(g))).P.data
        assert np.max(np.abs(p - _brute_force_p(g))) < 1e-10

    def test_columns_sum_to_one_with_zero_diagonal(self, rng):
        g = rng.standard_normal((5, 4))
        p = conditional_probabilities(FusedBatch(Tensor(g))).P.data
        assert np.allclose(p.sum(axis=0), 1.0, atol=1e-9)
        assert np.all(np.diag(p) == 0.0)
        assert np.all(p >= 0)

    def test_two_samples_give_certain_neighbour(self, rng):
        p = conditional_probabilities(FusedBatch(Tensor(rng.standard_normal((2, 3))))).P.data
        assert np.allclose(p, [[0.0, 1.0], [1.0, 0.0]])

    def test_opposite_pair_stays_finite(self):
        """Exactly anti-parallel samples have zero kernel mass in each column"""
        g = FusedBatch(Tensor(np.array([[1e9, 0.0], [-1e9, 0.0]])))
        p = conditional_probabilities(g).P.data
        assert np.all(np.isfinite(p))
        assert np.all(p >= 0.0) and np.all(p <= 1.0)
        assert np.isfinite(feature_kl(g, FusedBatch(Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])))).item())

    def test_non_finite_fused_features_rejected(self):
        with pytest.raises(NonFiniteError, match="fused features contains NaN or Inf"):
            FusedBatch(Tensor(np.array([[1.0, np.nan], [0.0, 1.0]])))

    def test_single_sample_rejected(self):
        with pytest.raises(ShapeError, match="2 samples"):
            conditional_probabilities(FusedBatch(Tensor(np.ones((1, 3)))))


class TestFeatureKL:
    """KL[P || Q] over fused batches"""

    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_matches_brute_force(self, n):
        rng = np.random.default_rng(100 + n)
        a, b = rng.standard_normal((n, 4)), rng.standard_normal((n, 4))
        value = feature_kl(FusedBatch(Tensor(a)), FusedBatch(Tensor(b))).item()
        assert value == pytest.approx(_brute_force_kl(a, b), abs=1e-10)

    def test_identical_batches(self, rng):
        g = FusedBatch(Tensor(rng.standard_normal((4, 3))))
        divergence = feature_kl(g, g)
        assert divergence.item() == pytest.approx(0.0, abs=1e-12)
        assert diverse_feat_loss(divergence).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_non_negative(self, rng):
        for _ in range(10):
            a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
            assert feature_kl(FusedBatch(Tensor(a)), FusedBatch(Tensor(b))).item() >= -1e-7

    def test_batch_size_mismatch(self, rng):
        with pytest.raises(ShapeError):
            feature_kl(FusedBatch(Tensor(rng.standard_normal((3, 2)))), FusedBatch(Tensor(rng.standard_normal((4, 2)))))

    def test_diversity_loss_decreases_with_divergence(self):
        values = [diverse_feat_loss(Tensor(np.array(d))).item() for d in (0.0, 0.1, 1.0, 10.0)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestCrossAttention:
    """Fusion of neighbouring blocks"""

    def test_token_count(self):
        assert token_count(64, 4) == 4
        assert token_count(2, 4) == 2
        assert token_count(3, 4) == 1

    def test_fused_shape(self, rng):
        block_k = FeatureBlock.from_dense(2, Tensor(rng.standard_normal((5, 8))), tokens=4)
        block_next = FeatureBlock.from_dense(3, Tensor(rng.standard_normal((5, 6))), tokens=4)
        assert block_k.m == 4 and block_k.token_dim == 2
        assert block_next.m == 2 and block_next.token_dim == 3
        attn = AttentionParams(query_dim=3, key_dim=2, attn_dim=16, rng=rng)
        fused = fuse_cross_attention(block_k, block_next, attn)
        assert fused.G.shape == (5, 16)

    def test_scale_changes_attention(self, rng):
        block_k = FeatureBlock.from_dense(1, Tensor(rng.standard_normal((3, 8))))
        block_next = FeatureBlock.from_dense(2, Tensor(rng.standard_normal((3, 8))))
        scaled = AttentionParams(2, 2, 16, np.random.default_rng(0), scale=True)
        unscaled = AttentionParams(2, 2, 16, np.random.default_rng(0), scale=False)
        a = fuse_cross_attention(block_k, block_next, scaled).G.data
        b = fuse_cross_attention(block_k, block_next, unscaled).G.data
        assert not np.allclose(a, b)

    def test_batch_mismatch(self, rng):
        block_k = FeatureBlock.from_dense(1, Tensor(rng.standard_normal((3, 4))))
        block_next = FeatureBlock.from_dense(2, Tensor(rng.standard_normal((4, 4))))
        with pytest.raises(ShapeError):
            fuse_cross_attention(block_k, block_next, AttentionParams(1, 1, 4, rng))

    def test_gradient_through_pipeline(self, rng):
        features_k = Tensor(rng.standard_normal((4, 8)))
        features_next = Tensor(rng.standard_normal((4, 8)))
        attn = AttentionParams(query_dim=2, key_dim=2, attn_dim=3, rng=rng)
        peer = FusedBatch(Tensor(rng.standard_normal((4, 3))))

        def loss(fk, fn, wq, wk, wv):
            attn.w_q, attn.w_k, attn.w_v = wq, wk, wv
            fused = fuse_cross_attention(FeatureBlock.from_dense(1, fk), FeatureBlock.from_dense(2, fn), attn)
            return diverse_feat_loss(feature_kl(peer, fused))

        report = grad_check(loss, [features_k, features_next, attn.w_q, attn.w_k, attn.w_v])
        print(f"feature pipeline max rel error {report.max_error:.2e}")
        assert report.passed


class TestFeatureFusion:
    """Per-network attention modules and block pairing"""

    def test_default_pairs(self):
        assert default_block_pairs(1) == []
        assert default_block_pairs(2) == [(1, 2)]
        assert default_block_pairs(3) == [(2, 3)]
        assert default_block_pairs(4) == [(2, 3), (3, 4)]
        assert default_block_pairs(6) == [(5, 6)]

    def test_fuse_each_pair(self, rng):
        fusion = FeatureFusion((8, 8, 4, 3), FusionPlan(pairs=((2, 3), (3, 4)), attn_dim=5), rng)
        features = [Tensor(rng.standard_normal((6, w))) for w in (8, 8, 4, 3)]
        batches = fusion.fuse(features)
        assert [b.G.shape for b in batches] == [(6, 5), (6, 5)]
        assert len(fusion.parameters()) == 6
        assert 'attn.1.w_v' in fusion.named_parameters()

    def test_non_neighbouring_pair_rejected(self, rng):
        with pytest.raises(ShapeError):
            FeatureFusion((8, 8, 4), FusionPlan(pairs=((1, 3),)), rng)

    def test_summed_kl_over_pairs(self, rng):
        a = [FusedBatch(Tensor(rng.standard_normal((4, 3)))) for _ in range(2)]
        b = [FusedBatch(Tensor(rng.standard_normal((4, 3)))) for _ in range(2)]
        total = fused_feature_kl(a, b).item()
        assert total == pytest.approx(feature_kl(a[0], b[0]).item() + feature_kl(a[1], b[1]).item())

    def test_convention_warning_logged_once(self, rng, caplog):
        import src.feature_diversity as module

        module._convention_logged = False
        with caplog.at_level('WARNING', logger='src.feature_diversity'):
            FeatureFusion((8, 8, 4), FusionPlan(pairs=((2, 3),)), rng)
            FeatureFusion((8, 8, 4), FusionPlan(pairs=((2, 3),)), rng)
        assert sum('k != j' in r.getMessage() for r in caplog.records) == 1

    def test_token_fallback_is_reported(self, rng, caplog):
        with caplog.at_level('WARNING', logger='src.feature_diversity'):
            fusion = FeatureFusion((8, 8, 2), FusionPlan(pairs=((2, 3),), tokens=4), rng)
        messages = [r.getMessage() for r in caplog.records if 'attention.tokens' in r.getMessage()]
        assert messages == ["attention.tokens=4 does not split block 3 (width 2) evenly; using 2 tokens"]
        assert fusion.modules[0].w_q.shape[0] == 1

    def test_dividing_token_count_is_silent(self, rng, caplog):
        with caplog.at_level('WARNING', logger='src.feature_diversity'):
            FeatureFusion((8, 8, 4), FusionPlan(pairs=((2, 3),), tokens=4), rng)
        assert not any('attention.tokens' in r.getMessage() for r in caplog.records)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
