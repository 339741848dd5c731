"""
Evaluation Metrics Module
Posterior-ensemble prediction and the evaluation metrics: accuracy, NLL,
binned calibration error, BALD / entropy uncertainty and retention curves.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import LabelError, ShapeError
from .tensor_autodiff import no_grad
from .variational_net import BnnModel, check_labels

logger = logging.getLogger(__name__)

NLL_EPS = 1e-12
DEFAULT_SAMPLES = 50
DEFAULT_BINS = 20
DEFAULT_RETENTION = (0.2, 0.4, 0.6, 0.8)


@dataclass
class EnsemblePrediction:
    """
    Mean probabilities over S posterior samples plus every member's output

    ``members`` has shape S x n x C, ``mean`` n x C.
    """
    members: np.ndarray

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=np.float64)
        if self.members.ndim != 3 or self.members.shape[0] < 1:
            raise ShapeError(f"ensemble members must be S x n x C with S >= 1, got {self.members.shape}")
        self.mean = self.members.mean(axis=0)

    @classmethod
    def from_probabilities(cls, probs: np.ndarray) -> 'EnsemblePrediction':
        """Single-member ensemble wrapping one n x C probability matrix"""
        return cls(np.asarray(probs, dtype=np.float64)[None, ...])

    @property
    def num_samples(self) -> int:
        return self.members.shape[0]

    def __len__(self) -> int:
        return self.members.shape[1]

    @property
    def num_classes(self) -> int:
        return self.members.shape[2]

    @property
    def confidence(self) -> np.ndarray:
        return self.mean.max(axis=1)

    @property
    def predicted(self) -> np.ndarray:
        # np.argmax returns the lowest index on ties
        return self.mean.argmax(axis=1)


@dataclass
class MetricsReport:
    """Final metrics of one model on one dataset"""
    acc: float
    nll: float
    ece: float
    mce: float = 0.0
    retention: Dict[float, float] = field(default_factory=dict)
    samples: int = DEFAULT_SAMPLES
    seed: Optional[int] = None
    config_hash: Optional[str] = None

    def to_dict(self) -> Dict:
        return {'acc': self.acc, 'nll': self.nll, 'ece': self.ece, 'mce': self.mce,
                'retention': {f"{f:g}": v for f, v in sorted(self.retention.items())},
                'samples': self.samples, 'seed': self.seed, 'config_hash': self.config_hash}


def ensemble_predict(model: BnnModel, x: np.ndarray, samples: int, rng: np.random.Generator) -> EnsemblePrediction:
    """
    Average softmax outputs of ``samples`` posterior draws

    Args:
        model: trained BNN
        x: inputs (n x input_dim)
        samples: S >= 1
        rng: random stream for the draws

    Returns:
        EnsemblePrediction with all S members retained
    """
    if samples < 1:
        raise ValueError(f"ensemble size must be >= 1, got {samples}")
    members = []
    with no_grad():
        for _ in range(samples):
            members.append(model.forward(x, rng).logits.softmax().data)
    return EnsemblePrediction(np.stack(members))


def mean_network_predict(model: BnnModel, x: np.ndarray) -> EnsemblePrediction:
    """Prediction of the network evaluated at the posterior means"""
    with no_grad():
        return EnsemblePrediction.from_probabilities(model.forward_mean(x).logits.softmax().data)


def _labels(pred: EnsemblePrediction, labels: np.ndarray) -> np.ndarray:
    labels = check_labels(labels, pred.num_classes)
    if labels.shape[0] != len(pred):
        raise LabelError(f"{labels.shape[0]} labels for {len(pred)} predictions")
    return labels


def accuracy(pred: EnsemblePrediction, labels: np.ndarray) -> float:
    """Fraction of argmax(mean probabilities) equal to the label"""
    labels = _labels(pred, labels)
    if labels.size == 0:
        return float('nan')
    return float(np.mean(pred.predicted == labels))


def nll(pred: EnsemblePrediction, labels: np.ndarray) -> float:
    """Mean of -log(mean probability of the true class + 1e-12)"""
    labels = _labels(pred, labels)
    true_probs = pred.mean[np.arange(labels.shape[0]), labels]
    return float(np.mean(-np.log(true_probs + NLL_EPS)))


@dataclass
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    confidence: float
    accuracy: float


def _bin_index(confidence: np.ndarray, bins: int) -> np.ndarray:
    # equal-width bins over (0, 1]; bin b holds (b/bins, (b+1)/bins]
    # a confidence on an edge stays in the lower bin (0.15 * 20 == 3.0000000000000004)
    return np.clip(np.ceil(np.round(confidence * bins, 12)).astype(int) - 1, 0, bins - 1)


def reliability_table(pred: EnsemblePrediction, labels: np.ndarray, bins: int = DEFAULT_BINS) -> List[ReliabilityBin]:
    """Per-bin count, mean confidence and accuracy; empty bins report zeros"""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    labels = _labels(pred, labels)
    confidence = pred.confidence
    correct = (pred.predicted == labels).astype(np.float64)
    index = _bin_index(confidence, bins)
    table = []
    for b in range(bins):
        members = index == b
        count = int(members.sum())
        table.append(ReliabilityBin(
            lower=b / bins, upper=(b + 1) / bins, count=count,
            confidence=float(confidence[members].mean()) if count else 0.0,
            accuracy=float(correct[members].mean()) if count else 0.0))
    return table


def ece(pred: EnsemblePrediction, labels: np.ndarray, bins: int = DEFAULT_BINS) -> float:
    """
    Expected calibration error over equal-width confidence bins

    sum_b (|B_b| / N) |acc(B_b) - conf(B_b)|, confidence = max mean probability
    """
    table = reliability_table(pred, labels, bins)
    total = sum(b.count for b in table)
    if total == 0:
        return 0.0
    return float(sum(b.count / total * abs(b.accuracy - b.confidence) for b in table))


def mce(pred: EnsemblePrediction, labels: np.ndarray, bins: int = DEFAULT_BINS) -> float:
    """Largest |accuracy - confidence| gap over non-empty bins"""
    gaps = [abs(b.accuracy - b.confidence) for b in reliability_table(pred, labels, bins) if b.count]
    return float(max(gaps)) if gaps else 0.0


def _entropy(probs: np.ndarray) -> np.ndarray:
    safe = np.where(probs > 0, probs, 1.0)
    return -np.sum(probs * np.log(safe), axis=-1)


def predictive_entropy(pred: EnsemblePrediction) -> np.ndarray:
    """H(mean probabilities) per sample, in nats"""
    return _entropy(pred.mean)


def bald(pred: EnsemblePrediction) -> np.ndarray:
    """
    Mutual information between parameters and prediction per sample

    H(mean_s p_s) - mean_s H(p_s), in nats; clipped at 0 against rounding
    """
    if pred.num_samples < 2:
        logger.debug("BALD with a single ensemble member is identically zero")
    mutual_info = _entropy(pred.mean) - _entropy(pred.members).mean(axis=0)
    return np.maximum(mutual_info, 0.0)


def uncertainty(pred: EnsemblePrediction, kind: str = 'bald') -> np.ndarray:
    """Per-sample uncertainty by name ('bald' or 'entropy')"""
    if kind == 'bald':
        return bald(pred)
    if kind == 'entropy':
        return predictive_entropy(pred)
    raise ValueError(f"unknown uncertainty kind {kind!r}")


def retention_curve(pred: EnsemblePrediction, labels: np.ndarray, uncertainties: np.ndarray,
                    fractions: Sequence[float] = DEFAULT_RETENTION) -> Dict[float, float]:
    """
    Accuracy over the floor(f * N) least uncertain samples for each fraction f

    Ties in uncertainty are broken by sample index. A fraction that keeps no
    sample maps to NaN.

    Raises:
        ValueError: a fraction outside (0, 1]
    """
    labels = _labels(pred, labels)
    uncertainties = np.asarray(uncertainties, dtype=np.float64)
    if uncertainties.shape != (len(pred),):
        raise ShapeError(f"expected {len(pred)} uncertainties, got shape {uncertainties.shape}")
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"retention fraction must lie in (0, 1], got {f}")
    order = np.lexsort((np.arange(len(pred)), uncertainties))
    correct = pred.predicted == labels
    curve = {}
    for f in sorted(fractions):
        keep = int(np.floor(f * len(pred)))
        if keep == 0:
            logger.warning("retention fraction %g keeps no samples out of %d", f, len(pred))
            curve[float(f)] = float('nan')
            continue
        curve[float(f)] = float(np.mean(correct[order[:keep]]))
    return curve


def evaluate(pred: EnsemblePrediction, labels: np.ndarray, bins: int = DEFAULT_BINS,
             fractions: Sequence[float] = DEFAULT_RETENTION, uncertainty_kind: str = 'bald',
             seed: Optional[int] = None, config_hash: Optional[str] = None) -> MetricsReport:
    """All metrics of one prediction"""
    return MetricsReport(
        acc=accuracy(pred, labels), nll=nll(pred, labels), ece=ece(pred, labels, bins),
        mce=mce(pred, labels, bins),
        retention=retention_curve(pred, labels, uncertainty(pred, uncertainty_kind), fractions),
        samples=pred.num_samples, seed=seed, config_hash=config_hash)


def aggregate(reports: Sequence[MetricsReport]) -> Dict[str, Dict]:
    """
    Mean and standard deviation of each metric over seeds

    Returns:
        {'acc': {'mean': .., 'std': ..}, ..., 'retention': {fraction: {'mean', 'std'}}}
    """
    if not reports:
        return {}
    summary = {}
    for name in ('acc', 'nll', 'ece', 'mce'):
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        summary[name] = {'mean': float(values.mean()), 'std': float(values.std())}
    summary['retention'] = {}
    for f in sorted(reports[0].retention):
        values = np.array([r.retention.get(f, np.nan) for r in reports], dtype=np.float64)
        summary['retention'][f] = {'mean': float(values.mean()), 'std': float(values.std())}
    return summary
