"""
Posterior Geometry Module
Closed-form distances between diagonal Gaussian posteriors and the
parameter-space diversity loss.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np

from .errors import DomainError, ShapeError
from .tensor_autodiff import Tensor, get_default_dtype, softplus

VectorLike = Union[Tensor, np.ndarray, list, tuple]


class DistanceMetric(str, Enum):
    """Distance between the two peers' posteriors"""
    W2 = 'w2'
    KL = 'kl'


def _vector(value: VectorLike, name: str) -> Tensor:
    vec = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=get_default_dtype()))
    if vec.ndim != 1:
        raise ShapeError(f"{name} must be a vector, got shape {vec.shape}")
    return vec


def _same_length(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: dimension mismatch {a.shape[0]} vs {b.shape[0]}")


@dataclass
class DiagonalGaussian:
    """N(mu, diag(sigma^2)) over a flat parameter vector"""
    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        self.mu = _vector(self.mu, 'mu')
        self.sigma = _vector(self.sigma, 'sigma')
        _same_length(self.mu, self.sigma, 'DiagonalGaussian')
        if np.any(self.sigma.data <= 0):
            raise DomainError("DiagonalGaussian: sigma must be strictly positive")

    @classmethod
    def from_model(cls, model) -> 'DiagonalGaussian':
        """Posterior of a BnnModel, differentiable in its (mu, rho)"""
        mu, sigma = model.flat_posterior()
        return cls(mu, sigma)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def detach(self) -> 'DiagonalGaussian':
        return DiagonalGaussian(self.mu.detach(), self.sigma.detach())


def bures_squared_diag(sigma1: VectorLike, sigma2: VectorLike) -> Tensor:
    """
    Squared Bures distance between diag(sigma1^2) and diag(sigma2^2)

    The trace expression tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2) collapses to
    sum_j (sigma1_j - sigma2_j)^2 for diagonal covariances.
    """
    s1, s2 = _vector(sigma1, 'sigma1'), _vector(sigma2, 'sigma2')
    _same_length(s1, s2, 'bures_squared_diag')
    return (s1 - s2).square().sum()


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def bures_squared_matrix(cov1: np.ndarray, cov2: np.ndarray) -> float:
    """Full trace form of the squared Bures distance for small dense covariances"""
    cov1, cov2 = np.asarray(cov1, dtype=np.float64), np.asarray(cov2, dtype=np.float64)
    if cov1.shape != cov2.shape or cov1.ndim != 2 or cov1.shape[0] != cov1.shape[1]:
        raise ShapeError(f"bures_squared_matrix: need equal square matrices, got {cov1.shape} and {cov2.shape}")
    root1 = _psd_sqrt(cov1)
    cross = _psd_sqrt(root1 @ cov2 @ root1)
    return float(np.trace(cov1 + cov2 - 2.0 * cross))


def w2_squared(q1: DiagonalGaussian, q2: DiagonalGaussian) -> Tensor:
    """
    Squared 2-Wasserstein distance between diagonal Gaussians

    ||mu1 - mu2||^2 + ||sigma1 - sigma2||^2
    """
    _same_length(q1.mu, q2.mu, 'w2_squared')
    return (q1.mu - q2.mu).square().sum() + bures_squared_diag(q1.sigma, q2.sigma)


def kl_diag_gaussian(q1: DiagonalGaussian, q2: DiagonalGaussian) -> Tensor:
    """
    KL[q1 || q2] for diagonal Gaussians

    sum_j log(sigma2_j / sigma1_j) + (sigma1_j^2 + (mu1_j - mu2_j)^2) / (2 sigma2_j^2) - 1/2
    """
    _same_length(q1.mu, q2.mu, 'kl_diag_gaussian')
    ratio = (q1.sigma.square() + (q1.mu - q2.mu).square()) / (q2.sigma.square() * 2.0)
    return (q2.sigma.log() - q1.sigma.log() + ratio - 0.5).sum()


def posterior_distance(q1: DiagonalGaussian, q2: DiagonalGaussian,
                       metric: DistanceMetric = DistanceMetric.W2) -> Tensor:
    """Distance D between the peers' posteriors under the selected metric"""
    if DistanceMetric(metric) == DistanceMetric.KL:
        return kl_diag_gaussian(q1, q2)
    return w2_squared(q1, q2)


def diverse_param_loss(distance: Union[Tensor, float]) -> Tensor:
    """
    log(1 + exp(-D)), computed as softplus(-D)

    Lies in (0, ln 2] for D >= 0 and decreases strictly in D.
    """
    distance = distance if isinstance(distance, Tensor) else Tensor(np.asarray(distance, dtype=get_default_dtype()))
    return softplus(-distance)
