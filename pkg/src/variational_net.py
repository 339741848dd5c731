"""
Variational Network Module
Gaussian mean-field layers (Bayes by Backprop and Radial sampling), the prior KL,
the per-network ELBO loss, and the deterministic point network used to
pre-train a peer's means.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import LabelError, ShapeError
from .tensor_autodiff import Tensor, concat, get_default_dtype, no_grad, softplus

logger = logging.getLogger(__name__)

DEFAULT_SIGMA_INIT = 0.05
RHO_JITTER = 0.05
MIN_NOISE_NORM = 1e-12


class SamplingMode(str, Enum):
    """Weight sampling rule; one per network for a whole run"""
    BBB = 'bbb'
    RADIAL = 'radial'


@dataclass(frozen=True)
class PriorSpec:
    """Isotropic Gaussian prior N(mean, std^2) over every weight and bias"""
    std: float = 0.1
    mean: float = 0.0

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"prior std must be > 0, got {self.std}")


@dataclass(frozen=True)
class Architecture:
    """
    Layer widths and block partition shared by both peers

    ``widths`` lists input, hidden and class dimensions; ``block_boundaries``
    are the exclusive end indices of each block over the layers, so
    (1, 2, 3) puts each of three layers in its own block.
    """
    widths: Tuple[int, ...]
    block_boundaries: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, 'widths', tuple(int(w) for w in self.widths))
        object.__setattr__(self, 'block_boundaries', tuple(int(b) for b in self.block_boundaries))
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must hold at least two positive sizes, got {self.widths}")
        bounds = self.block_boundaries
        increasing = all(nxt > cur for cur, nxt in zip(bounds, bounds[1:]))
        if not bounds or bounds[0] <= 0 or not increasing or bounds[-1] != self.num_layers:
            raise ValueError(
                f"block_boundaries must be strictly increasing and end at {self.num_layers}, got {bounds}")

    @classmethod
    def one_layer_per_block(cls, widths: Sequence[int]) -> 'Architecture':
        return cls(tuple(widths), tuple(range(1, len(widths))))

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    @property
    def num_blocks(self) -> int:
        return len(self.block_boundaries)

    @property
    def block_widths(self) -> Tuple[int, ...]:
        """Feature width at the end of each block"""
        return tuple(self.widths[b] for b in self.block_boundaries)

    @property
    def num_parameters(self) -> int:
        return sum(i * o + o for i, o in zip(self.widths, self.widths[1:]))

    def to_dict(self) -> Dict:
        return {'widths': list(self.widths), 'block_boundaries': list(self.block_boundaries)}

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:16]


def sigma_from_rho(rho: Tensor) -> Tensor:
    """sigma = softplus(rho), elementwise positive"""
    return softplus(rho)


def rho_from_sigma(sigma: float) -> float:
    """Inverse of softplus for a positive scalar"""
    return float(np.log(np.expm1(sigma)))


@dataclass
class LayerNoise:
    """Standardised perturbations for one layer; w = mu + sigma * noise"""
    weight: np.ndarray
    bias: np.ndarray


def radial_direction(shape: Tuple[int, ...], rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """
    Unit direction eps/||eps|| over a whole tensor and a half-normal radius

    Args:
        shape: tensor shape
        rng: random stream

    Returns:
        (direction with unit L2 norm, radius r = |N(0, 1)|)
    """
    while True:
        eps = rng.standard_normal(shape)
        norm = float(np.sqrt(np.sum(eps * eps)))
        if norm > MIN_NOISE_NORM:
            break
        logger.debug("resampling radial direction with vanishing norm %.3g", norm)
    radius = abs(float(rng.standard_normal()))
    return eps / norm, radius


class VariationalLayer:
    """
    Dense layer with a diagonal Gaussian posterior over weights and biases

    Args:
        in_dim: input width
        out_dim: output width
        rng: random stream for the initial means and pre-stds
        sigma_init: target initial standard deviation
    """

    def __init__(self, in_dim: int, out_dim: int, rng: Optional[np.random.Generator] = None,
                 sigma_init: float = DEFAULT_SIGMA_INIT):
        self.in_dim = in_dim
        self.out_dim = out_dim
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = get_default_dtype()
        rho0 = rho_from_sigma(sigma_init)
        self.mu_w = Tensor((rng.standard_normal((in_dim, out_dim)) * math.sqrt(2.0 / in_dim)).astype(dtype),
                           requires_grad=True)
        self.rho_w = Tensor((rho0 + rng.uniform(-RHO_JITTER, RHO_JITTER, (in_dim, out_dim))).astype(dtype),
                            requires_grad=True)
        self.mu_b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)
        self.rho_b = Tensor((rho0 + rng.uniform(-RHO_JITTER, RHO_JITTER, out_dim)).astype(dtype),
                            requires_grad=True)

    @property
    def num_parameters(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim

    def parameters(self) -> List[Tensor]:
        return [self.mu_w, self.rho_w, self.mu_b, self.rho_b]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {'mu_w': self.mu_w, 'rho_w': self.rho_w, 'mu_b': self.mu_b, 'rho_b': self.rho_b}

    def sigma_w(self) -> Tensor:
        return sigma_from_rho(self.rho_w)

    def sigma_b(self) -> Tensor:
        return sigma_from_rho(self.rho_b)

    def draw_noise(self, rng: np.random.Generator, mode: SamplingMode) -> LayerNoise:
        if mode == SamplingMode.BBB:
            return LayerNoise(rng.standard_normal(self.mu_w.shape), rng.standard_normal(self.mu_b.shape))
        weight_dir, weight_r = radial_direction(self.mu_w.shape, rng)
        bias_dir, bias_r = radial_direction(self.mu_b.shape, rng)
        return LayerNoise(weight_dir * weight_r, bias_dir * bias_r)

    def perturbed(self, noise: Optional[LayerNoise]) -> Tuple[Tensor, Tensor]:
        """Reparameterised weights mu + sigma * noise; the means when noise is None"""
        if noise is None:
            return self.mu_w, self.mu_b
        dtype = self.mu_w.data.dtype
        weight = self.mu_w + self.sigma_w() * Tensor(noise.weight.astype(dtype))
        bias = self.mu_b + self.sigma_b() * Tensor(noise.bias.astype(dtype))
        return weight, bias


def sample_bbb(layer: VariationalLayer, rng: np.random.Generator) -> Tuple[Tensor, Tensor]:
    """w = mu + sigma * eps, eps ~ N(0, I); differentiable in mu and rho"""
    return layer.perturbed(layer.draw_noise(rng, SamplingMode.BBB))


def sample_radial(layer: VariationalLayer, rng: np.random.Generator) -> Tuple[Tensor, Tensor]:
    """w = mu + sigma * (eps/||eps||) * r, one r per tensor; differentiable in mu and rho"""
    return layer.perturbed(layer.draw_noise(rng, SamplingMode.RADIAL))


@dataclass
class ForwardOutput:
    """Logits and the per-block feature tensors (n x block width)"""
    logits: Tensor
    features: List[Tensor] = field(default_factory=list)


def _as_batch(x: Union[Tensor, np.ndarray], input_dim: int) -> Tensor:
    batch = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=get_default_dtype()))
    if batch.ndim != 2 or batch.shape[1] != input_dim:
        raise ShapeError(f"expected a batch of shape (n, {input_dim}), got {batch.shape}")
    return batch


def _dense_stack(batch: Tensor, weights: Sequence[Tuple[Tensor, Tensor]], boundaries: Sequence[int]) -> ForwardOutput:
    features = []
    hidden = batch
    last = len(weights) - 1
    ends = set(boundaries)
    for index, (weight, bias) in enumerate(weights):
        n, width = hidden.shape[0], weight.shape[1]
        hidden = hidden @ weight + bias.reshape(1, width).expand(n, width)
        if index < last:
            hidden = hidden.relu()
        if index + 1 in ends:
            features.append(hidden)
    return ForwardOutput(logits=hidden, features=features)


class BnnModel:
    """
    Variational Bayesian MLP

    Args:
        architecture: widths and block partition
        mode: sampling rule (BBB or Radial)
        prior: Gaussian prior over all parameters
        rng: random stream for initialisation
        sigma_init: initial posterior standard deviation
    """

    def __init__(self, architecture: Architecture, mode: SamplingMode = SamplingMode.BBB,
                 prior: PriorSpec = PriorSpec(), rng: Optional[np.random.Generator] = None,
                 sigma_init: float = DEFAULT_SIGMA_INIT):
        self.architecture = architecture
        self.mode = SamplingMode(mode)
        self.prior = prior
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = architecture.widths
        self.layers = [VariationalLayer(i, o, rng, sigma_init) for i, o in zip(widths, widths[1:])]

    @property
    def num_parameters(self) -> int:
        """Dimension d of the flat parameter vector"""
        return sum(layer.num_parameters for layer in self.layers)

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {f"layers.{i}.{name}": p
                for i, layer in enumerate(self.layers) for name, p in layer.named_parameters().items()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # ---------------------------------------------------------------- sampling
    def draw_noise(self, rng: np.random.Generator) -> List[LayerNoise]:
        """One posterior sample's worth of perturbations"""
        return [layer.draw_noise(rng, self.mode) for layer in self.layers]

    def forward(self, x: Union[Tensor, np.ndarray], rng: np.random.Generator) -> ForwardOutput:
        """Single-sample forward pass: logits and per-block features"""
        return self.forward_with_noise(x, self.draw_noise(rng))

    def forward_with_noise(self, x: Union[Tensor, np.ndarray], noise: Sequence[LayerNoise]) -> ForwardOutput:
        if len(noise) != len(self.layers):
            raise ShapeError(f"expected noise for {len(self.layers)} layers, got {len(noise)}")
        batch = _as_batch(x, self.architecture.input_dim)
        weights = [layer.perturbed(n) for layer, n in zip(self.layers, noise)]
        return _dense_stack(batch, weights, self.architecture.block_boundaries)

    def forward_mean(self, x: Union[Tensor, np.ndarray]) -> ForwardOutput:
        """Forward pass of the mean network"""
        batch = _as_batch(x, self.architecture.input_dim)
        weights = [layer.perturbed(None) for layer in self.layers]
        return _dense_stack(batch, weights, self.architecture.block_boundaries)

    # ------------------------------------------------------------- posterior
    def kl_to_prior(self) -> Tensor:
        """
        Closed-form KL[q || p] summed over all d parameters

        sum_j log(s / sigma_j) + (sigma_j^2 + (mu_j - m)^2) / (2 s^2) - 1/2
        """
        s, m = self.prior.std, self.prior.mean
        total = None
        for layer in self.layers:
            for mu, rho in ((layer.mu_w, layer.rho_w), (layer.mu_b, layer.rho_b)):
                sigma = sigma_from_rho(rho)
                centred = mu - m if m else mu
                term = (sigma.square() + centred.square()) / (2.0 * s * s) - sigma.log() + (math.log(s) - 0.5)
                total = term.sum() if total is None else total + term.sum()
        return total

    def flat_posterior(self) -> Tuple[Tensor, Tensor]:
        """Differentiable flat (mu, sigma) vectors of length d"""
        mus, sigmas = [], []
        for layer in self.layers:
            mus.extend([layer.mu_w.reshape(-1), layer.mu_b])
            sigmas.extend([layer.sigma_w().reshape(-1), layer.sigma_b()])
        return concat(mus), concat(sigmas)

    def flatten(self) -> Tuple[np.ndarray, np.ndarray]:
        """Flat copies of (mu, rho)"""
        mu = np.concatenate([a.data.reshape(-1) for layer in self.layers for a in (layer.mu_w, layer.mu_b)])
        rho = np.concatenate([a.data.reshape(-1) for layer in self.layers for a in (layer.rho_w, layer.rho_b)])
        return mu, rho

    def unflatten(self, mu: np.ndarray, rho: np.ndarray) -> None:
        """Inverse of flatten"""
        if mu.shape != (self.num_parameters,) or rho.shape != (self.num_parameters,):
            raise ShapeError(f"expected flat vectors of length {self.num_parameters}, got {mu.shape} and {rho.shape}")
        offset = 0
        for layer in self.layers:
            for mean, pre in ((layer.mu_w, layer.rho_w), (layer.mu_b, layer.rho_b)):
                count = mean.size
                mean.data = mu[offset:offset + count].reshape(mean.shape).astype(mean.data.dtype)
                pre.data = rho[offset:offset + count].reshape(pre.shape).astype(pre.data.dtype)
                offset += count

    def load_means(self, point: 'DeterministicNet') -> None:
        """Copy a point network's weights into the posterior means"""
        if point.architecture.widths != self.architecture.widths:
            raise ShapeError(
                f"pretrained widths {point.architecture.widths} differ from {self.architecture.widths}")
        for layer, dense in zip(self.layers, point.layers):
            layer.mu_w.data = dense.weight.data.astype(layer.mu_w.data.dtype).copy()
            layer.mu_b.data = dense.bias.data.astype(layer.mu_b.data.dtype).copy()


def check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"labels must be a 1-D integer array, got dtype {labels.dtype} shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def one_hot(labels: np.ndarray, num_classes: int, dtype=None) -> np.ndarray:
    encoded = np.zeros((labels.shape[0], num_classes), dtype=dtype or get_default_dtype())
    encoded[np.arange(labels.shape[0]), labels] = 1.0
    return encoded


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch"""
    num_classes = logits.shape[1]
    labels = check_labels(labels, num_classes)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {logits.shape[0]} logits")
    target = Tensor(one_hot(labels, num_classes, logits.data.dtype))
    return -((logits.log_softmax() * target).sum(axis=1).mean())


@dataclass
class ElboTerms:
    """Pieces of the per-network conventional loss"""
    loss: Tensor
    kl: Tensor
    nll: Tensor
    output: ForwardOutput


def elbo_terms(model: BnnModel, x: Union[Tensor, np.ndarray], labels: np.ndarray,
               noise: Sequence[LayerNoise], dataset_size: int) -> ElboTerms:
    """ELBO for a fixed posterior sample"""
    if dataset_size <= 0:
        raise ValueError(f"dataset_size must be positive, got {dataset_size}")
    output = model.forward_with_noise(x, noise)
    nll = cross_entropy(output.logits, labels)
    kl = model.kl_to_prior()
    return ElboTerms(loss=kl / float(dataset_size) + nll, kl=kl, nll=nll, output=output)


def elbo_loss(model: BnnModel, x: Union[Tensor, np.ndarray], labels: np.ndarray,
              rng: np.random.Generator, dataset_size: int) -> Tensor:
    """
    Mini-batch ELBO: KL[q || p] / N + mean cross-entropy of one posterior sample

    Args:
        model: the network
        x: input batch (n x input_dim)
        labels: integer labels (n,)
        rng: random stream for the single weight sample
        dataset_size: N, the number of training examples

    Returns:
        scalar loss tensor
    """
    return elbo_terms(model, x, labels, model.draw_noise(rng), dataset_size).loss


class DenseLayer:
    """Point-estimate dense layer"""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        dtype = get_default_dtype()
        self.weight = Tensor((rng.standard_normal((in_dim, out_dim)) * math.sqrt(2.0 / in_dim)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)


class DeterministicNet:
    """
    Point-estimate network with the same architecture as the BNN peers

    Used to pre-train the means of one peer and as the DNN baseline.
    """

    def __init__(self, architecture: Architecture, rng: Optional[np.random.Generator] = None):
        self.architecture = architecture
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = architecture.widths
        self.layers = [DenseLayer(i, o, rng) for i, o in zip(widths, widths[1:])]

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {f"layers.{i}.{name}": p for i, layer in enumerate(self.layers)
                for name, p in (('weight', layer.weight), ('bias', layer.bias))}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x: Union[Tensor, np.ndarray]) -> ForwardOutput:
        batch = _as_batch(x, self.architecture.input_dim)
        return _dense_stack(batch, [(l.weight, l.bias) for l in self.layers], self.architecture.block_boundaries)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(x).logits.softmax().data
