"""
Feature Diversity Module
Cross-attention fusion of neighbouring block features, cosine-kernel
conditional distributions over a batch, and the feature-space diversity loss.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .tensor_autodiff import Tensor, get_default_dtype, softplus

logger = logging.getLogger(__name__)

EPS = 1e-8
COLUMN_EPS = 1e-12
DEFAULT_TOKENS = 4
DEFAULT_ATTN_DIM = 16

_convention_logged = False


def token_count(width: int, tokens: int) -> int:
    """Number of equal tokens a dense feature of ``width`` is chunked into"""
    return math.gcd(width, tokens)


@dataclass
class FeatureBlock:
    """Features of block ``block_index`` laid out as n samples x m tokens x token dim"""
    block_index: int
    tokens: Tensor

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ShapeError(f"FeatureBlock needs (n, m, token_dim) tokens, got {self.tokens.shape}")

    @classmethod
    def from_dense(cls, block_index: int, features: Tensor, tokens: int = DEFAULT_TOKENS) -> 'FeatureBlock':
        """Chunk an n x h hidden vector into m equal tokens"""
        if features.ndim != 2:
            raise ShapeError(f"dense block features must be 2-D, got {features.shape}")
        n, width = features.shape
        m = token_count(width, tokens)
        return cls(block_index, features.reshape(n, m, width // m))

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def m(self) -> int:
        return self.tokens.shape[1]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[2]


class AttentionParams:
    """
    Query / key / value projections into a shared attention dimension

    Args:
        query_dim: token dim of block k+1 (queries)
        key_dim: token dim of block k (keys and values)
        attn_dim: d_a
        rng: random stream for initialisation
        scale: divide scores by sqrt(d_a) before the softmax
    """

    def __init__(self, query_dim: int, key_dim: int, attn_dim: int = DEFAULT_ATTN_DIM,
                 rng: Optional[np.random.Generator] = None, scale: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = get_default_dtype()
        self.attn_dim = attn_dim
        self.scale = scale
        self.w_q = Tensor((rng.standard_normal((query_dim, attn_dim)) / math.sqrt(query_dim)).astype(dtype),
                          requires_grad=True)
        self.w_k = Tensor((rng.standard_normal((key_dim, attn_dim)) / math.sqrt(key_dim)).astype(dtype),
                          requires_grad=True)
        self.w_v = Tensor((rng.standard_normal((key_dim, attn_dim)) / math.sqrt(key_dim)).astype(dtype),
                          requires_grad=True)

    def parameters(self) -> List[Tensor]:
        return [self.w_q, self.w_k, self.w_v]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {'w_q': self.w_q, 'w_k': self.w_k, 'w_v': self.w_v}


@dataclass
class FusedBatch:
    """One fused vector of dimension d_a per sample"""
    G: Tensor

    def __post_init__(self):
        if self.G.ndim != 2:
            raise ShapeError(f"fused batch must be n x d_a, got {self.G.shape}")
        self.G.check_finite("fused features")

    @property
    def n(self) -> int:
        return self.G.shape[0]

    def detach(self) -> 'FusedBatch':
        return FusedBatch(self.G.detach())


@dataclass
class FeatureDistribution:
    """P[i, j] = p_{i|j}; each column sums to 1 over i != j, zero diagonal"""
    P: Tensor


def _project(tokens: Tensor, weight: Tensor) -> Tensor:
    n, m, dim = tokens.shape
    if weight.shape[0] != dim:
        raise ShapeError(f"projection expects token dim {weight.shape[0]}, got {dim}")
    return (tokens.reshape(n * m, dim) @ weight).reshape(n, m, weight.shape[1])


def fuse_cross_attention(block_k: FeatureBlock, block_next: FeatureBlock, attn: AttentionParams) -> FusedBatch:
    """
    softmax[(W_Q F_{k+1})(W_K F_k)^T / sqrt(d_a)] W_V F_k, mean-pooled over tokens

    Args:
        block_k: features of block k (keys and values)
        block_next: features of block k+1 (queries)
        attn: projections

    Returns:
        FusedBatch of shape n x d_a
    """
    if block_k.n != block_next.n:
        raise ShapeError(f"batch sizes differ between blocks: {block_k.n} vs {block_next.n}")
    if block_k.n < 1:
        raise ShapeError("cannot fuse an empty batch")
    queries = _project(block_next.tokens, attn.w_q)
    keys = _project(block_k.tokens, attn.w_k)
    values = _project(block_k.tokens, attn.w_v)
    scores = queries @ keys.transpose()
    if attn.scale:
        scores = scores / math.sqrt(attn.attn_dim)
    fused = scores.softmax() @ values
    return FusedBatch(fused.mean(axis=1))


def similarity_kernel(a: Tensor, b: Tensor) -> Tensor:
    """K(a, b) = (a.b / ((|a| + eps)(|b| + eps)) + 1) / 2, in [0, 1]"""
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"similarity_kernel needs two equal-length vectors, got {a.shape} and {b.shape}")
    cosine = (a * b).sum() / ((a.norm() + EPS) * (b.norm() + EPS))
    return (cosine + 1.0) * 0.5


def _off_diagonal(n: int, dtype) -> Tensor:
    return Tensor((1.0 - np.eye(n)).astype(dtype))


def conditional_probabilities(fused: FusedBatch) -> FeatureDistribution:
    """
    p_{i|j} = K(F'_i, F'_j) / (sum_{k != j} K(F'_k, F'_j) + eps), with p_{j|j} = 0

    Raises:
        ShapeError: fewer than two samples
    """
    n = fused.n
    if n < 2:
        raise ShapeError(f"conditional probabilities need at least 2 samples, got {n}")
    G = fused.G
    dim = G.shape[1]
    norms = G.norm(axis=1) + EPS
    unit = G / norms.reshape(n, 1).expand(n, dim)
    kernel = (unit @ unit.transpose() + 1.0) * 0.5
    masked = kernel * _off_diagonal(n, G.data.dtype)
    column_sums = masked.sum(axis=0)
    return FeatureDistribution(masked / (column_sums + COLUMN_EPS).reshape(1, n).expand(n, n))


def feature_kl(fused_from: FusedBatch, fused_to: FusedBatch) -> Tensor:
    """
    KL[P || Q] = (1/n) sum_j sum_{i != j} P_{i|j} log((P_{i|j} + eps) / (Q_{i|j} + eps))

    P is built from ``fused_from``, Q from ``fused_to``.
    """
    if fused_from.n != fused_to.n:
        raise ShapeError(f"feature_kl: batch sizes differ, {fused_from.n} vs {fused_to.n}")
    n = fused_from.n
    p = conditional_probabilities(fused_from).P
    q = conditional_probabilities(fused_to).P
    terms = p * ((p + EPS).log() - (q + EPS).log())
    return (terms * _off_diagonal(n, terms.data.dtype)).sum() / float(n)


def diverse_feat_loss(divergence: Tensor) -> Tensor:
    """log(1 + exp(-D_KL)) as softplus(-D_KL)"""
    return softplus(-divergence)


def default_block_pairs(num_blocks: int) -> List[Tuple[int, int]]:
    """(2,3) for three blocks, (2,3)+(3,4) for four, the last two blocks otherwise"""
    if num_blocks < 2:
        return []
    if num_blocks == 3:
        return [(2, 3)]
    if num_blocks == 4:
        return [(2, 3), (3, 4)]
    return [(num_blocks - 1, num_blocks)]


@dataclass(frozen=True)
class FusionPlan:
    """Which neighbouring blocks are fused and how"""
    pairs: Tuple[Tuple[int, int], ...]
    tokens: int = DEFAULT_TOKENS
    attn_dim: int = DEFAULT_ATTN_DIM
    scale: bool = True


class FeatureFusion:
    """
    One network's attention modules, one per fused block pair

    Args:
        block_widths: feature width at the end of each block
        plan: fused pairs (1-based block indices) and attention settings
        rng: random stream for the projections
    """

    def __init__(self, block_widths: Sequence[int], plan: FusionPlan, rng: Optional[np.random.Generator] = None):
        global _convention_logged
        rng = rng if rng is not None else np.random.default_rng(0)
        self.plan = plan
        self.modules: List[AttentionParams] = []
        for k, k_next in plan.pairs:
            if not (1 <= k < k_next <= len(block_widths)) or k_next != k + 1:
                raise ShapeError(f"block pair {(k, k_next)} is not a neighbouring pair of {len(block_widths)} blocks")
            key_width, query_width = block_widths[k - 1], block_widths[k_next - 1]
            for block, width in ((k, key_width), (k_next, query_width)):
                if token_count(width, plan.tokens) != plan.tokens:
                    logger.warning("attention.tokens=%d does not split block %d (width %d) evenly; using %d tokens",
                                   plan.tokens, block, width, token_count(width, plan.tokens))
            key_dim = key_width // token_count(key_width, plan.tokens)
            query_dim = query_width // token_count(query_width, plan.tokens)
            self.modules.append(AttentionParams(query_dim, key_dim, plan.attn_dim, rng, plan.scale))
        if self.modules and not _convention_logged:
            logger.warning("feature distributions normalise p_{i|j} over k != j (each column is a proper "
                           "distribution given sample j)")
            _convention_logged = True

    def parameters(self) -> List[Tensor]:
        return [p for module in self.modules for p in module.parameters()]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {f"attn.{i}.{name}": p for i, module in enumerate(self.modules)
                for name, p in module.named_parameters().items()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def fuse(self, features: Sequence[Tensor]) -> List[FusedBatch]:
        """Fused batch for every planned pair, from a forward pass's block features"""
        batches = []
        for (k, k_next), module in zip(self.plan.pairs, self.modules):
            block_k = FeatureBlock.from_dense(k, features[k - 1], self.plan.tokens)
            block_next = FeatureBlock.from_dense(k_next, features[k_next - 1], self.plan.tokens)
            batches.append(fuse_cross_attention(block_k, block_next, module))
        return batches


def fused_feature_kl(batches_from: Sequence[FusedBatch], batches_to: Sequence[FusedBatch]) -> Tensor:
    """Sum of feature_kl over the fused pairs"""
    if not batches_from or len(batches_from) != len(batches_to):
        raise ShapeError(f"need matching non-empty fused batch lists, got {len(batches_from)} and {len(batches_to)}")
    total = feature_kl(batches_from[0], batches_to[0])
    for source, target in zip(batches_from[1:], batches_to[1:]):
        total = total + feature_kl(source, target)
    return total
