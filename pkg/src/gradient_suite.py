"""
Gradient Suite Module
Finite-difference checks of every loss term on small random models.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from .feature_diversity import FeatureFusion, FusionPlan, diverse_feat_loss, fused_feature_kl
from .mutual_trainer import Hyperparams, init_peers, logit_loss_from_terms, soft_logits, total_losses
from .posterior_geometry import DiagonalGaussian, diverse_param_loss, kl_diag_gaussian, w2_squared
from .random_streams import stream
from .tensor_autodiff import Tensor, grad_check, no_grad, precision
from .variational_net import Architecture, BnnModel, SamplingMode, elbo_terms

logger = logging.getLogger(__name__)

MICRO_WIDTHS = (3, 8, 8, 3)
BATCH = 4
DATASET_SIZE = 100
ATTN_DIM = 4


@dataclass
class GradRow:
    name: str
    parameters: int
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tol)


def _micro_batch(rng: np.random.Generator):
    x = rng.standard_normal((BATCH, MICRO_WIDTHS[0]))
    y = rng.integers(0, MICRO_WIDTHS[-1], BATCH)
    return x, y


def _nearby_copy(model: BnnModel, rng: np.random.Generator, scale: float = 0.05) -> BnnModel:
    """Second model whose posterior sits a small W2 distance away"""
    other = BnnModel(model.architecture, model.mode, model.prior, rng)
    mu, rho = model.flatten()
    other.unflatten(mu + scale * rng.standard_normal(mu.shape), rho + scale * rng.standard_normal(rho.shape))
    return other


def _check(name: str, f: Callable[[], Tensor], point: Sequence[Tensor], h: float, tol: float) -> GradRow:
    report = grad_check(lambda *_: f(), point, h=h, tol=tol)
    row = GradRow(name=name, parameters=int(sum(p.size for p in point)), max_error=report.max_error, tol=tol)
    logger.info("gradcheck %-24s params=%4d max rel err=%.3e %s", name, row.parameters, row.max_error,
                'ok' if row.passed else 'FAIL')
    return row


def run_gradient_suite(seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> List[GradRow]:
    """
    Check backward() against central differences for each loss term

    Rows: ELBO under both sampling modes, the logit loss at T = 1 and T = 3,
    the parameter diversity loss under W2 and KL, the feature diversity
    pipeline and one peer's total loss.
    """
    rows = []
    with precision('float64'):
        rng = stream(seed, 'gradcheck')
        arch = Architecture.one_layer_per_block(MICRO_WIDTHS)
        x, y = _micro_batch(rng)

        for mode in (SamplingMode.BBB, SamplingMode.RADIAL):
            model = BnnModel(arch, mode, rng=rng)
            noise = model.draw_noise(rng)
            rows.append(_check(f"elbo ({mode.value})",
                               lambda: elbo_terms(model, x, y, noise, DATASET_SIZE).loss,
                               model.parameters(), h, tol))

        model = BnnModel(arch, rng=rng)
        peer = BnnModel(arch, rng=rng)
        noise = model.draw_noise(rng)
        for temperature in (1.0, 3.0):
            with no_grad():
                peer_probs = soft_logits(peer.forward(x, rng).logits, temperature).data
            rows.append(_check(f"logit loss (T={temperature:g})",
                               lambda: logit_loss_from_terms(elbo_terms(model, x, y, noise, DATASET_SIZE),
                                                             peer_probs, temperature)[0],
                               model.parameters(), h, tol))

        near = _nearby_copy(model, rng)
        fixed = DiagonalGaussian.from_model(near).detach()
        rows.append(_check("diversity loss (w2)",
                           lambda: diverse_param_loss(w2_squared(DiagonalGaussian.from_model(model), fixed)),
                           model.parameters(), h, tol))
        rows.append(_check("diversity loss (kl)",
                           lambda: diverse_param_loss(kl_diag_gaussian(DiagonalGaussian.from_model(model), fixed)),
                           model.parameters(), h, tol))

        plan = FusionPlan(pairs=((2, 3),), attn_dim=ATTN_DIM)
        fusion = FeatureFusion(arch.block_widths, plan, rng)
        peer_fusion = FeatureFusion(arch.block_widths, plan, rng)
        with no_grad():
            peer_fused = peer_fusion.fuse(peer.forward(x, rng).features)

        def feature_pipeline() -> Tensor:
            features = model.forward_with_noise(x, noise).features
            return diverse_feat_loss(fused_feature_kl(peer_fused, fusion.fuse(features)))

        rows.append(_check("feature diversity", feature_pipeline,
                           model.parameters() + fusion.parameters(), h, tol))

        pair = init_peers(arch, rng, rng, plan)
        hyper = Hyperparams(temperature=3.0, alpha=1.0, beta=2.0)
        pair.b2.unflatten(*_nearby_copy(pair.b1, rng).flatten())
        rows.append(_check("total loss (B1)",
                           lambda: total_losses(pair, x, y, hyper, np.random.default_rng(seed), DATASET_SIZE)[0],
                           pair.opt1.params, h, tol))
    return rows


def format_table(rows: Sequence[GradRow]) -> str:
    """Plain-text pass/fail table"""
    width = max(len(r.name) for r in rows) if rows else 4
    lines = [f"{'term':<{width}}  params  max rel error  result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.parameters:>6}  {r.max_error:>13.3e}  {'pass' if r.passed else 'FAIL'}")
    return '\n'.join(lines)
