"""
DML-BNN - Core Modules
Diversity-promoted mutual learning for a pair of variational Bayesian networks.
"""

__version__ = '0.1.0'

from .errors import (CheckpointError, ConfigError, DatasetError, DmlBnnError, DomainError, GraphError, LabelError,
                     NonFiniteError, ShapeError)
from .tensor_autodiff import Tensor, grad_check, no_grad
from .variational_net import Architecture, BnnModel, DeterministicNet, PriorSpec, SamplingMode
from .posterior_geometry import DiagonalGaussian, DistanceMetric, posterior_distance, w2_squared
from .feature_diversity import FeatureFusion, FusionPlan
from .mutual_trainer import Hyperparams, Method, PeerPair, TrainSchedule, init_peers, run_training, train_step
from .eval_metrics import EnsemblePrediction, MetricsReport, ensemble_predict

__all__ = [
    'Architecture',
    'BnnModel',
    'CheckpointError',
    'ConfigError',
    'DatasetError',
    'DeterministicNet',
    'DiagonalGaussian',
    'DistanceMetric',
    'DmlBnnError',
    'DomainError',
    'EnsemblePrediction',
    'FeatureFusion',
    'FusionPlan',
    'GraphError',
    'Hyperparams',
    'LabelError',
    'Method',
    'MetricsReport',
    'NonFiniteError',
    'PeerPair',
    'PriorSpec',
    'SamplingMode',
    'ShapeError',
    'Tensor',
    'TrainSchedule',
    'ensemble_predict',
    'grad_check',
    'init_peers',
    'no_grad',
    'posterior_distance',
    'run_training',
    'train_step',
    'w2_squared',
]
