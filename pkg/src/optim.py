"""
Optimizer Module
Adam with bias correction and a piecewise-constant learning-rate decay.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import NonFiniteError
from .tensor_autodiff import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moment accumulators mirroring the parameter shapes, plus the step count"""
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def copy(self) -> 'AdamState':
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v],
                         self.step, self.beta1, self.beta2, self.eps)


class Adam:
    """
    Adam over a fixed list of parameter tensors

    Parameters whose ``grad`` is None in a step are left untouched (their
    moments do not decay).

    Args:
        params: tensors to update in place
        lr: learning rate
        beta1: first-moment decay
        beta2: second-moment decay
        eps: denominator stabiliser
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState([np.zeros_like(p.data) for p in self.params],
                               [np.zeros_like(p.data) for p in self.params],
                               0, beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        total = sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None)
        return float(np.sqrt(total))

    def step(self, clip_norm: Optional[float] = None) -> float:
        """
        Apply one update from the accumulated gradients

        Args:
            clip_norm: rescale gradients to this global L2 norm when exceeded

        Returns:
            global gradient norm before clipping
        """
        for index, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"gradient of parameter {index} is NaN or Inf")
        norm = self.grad_norm()
        factor = 1.0
        if clip_norm is not None and norm > clip_norm:
            factor = clip_norm / norm
            logger.debug("clipping gradient norm %.4g to %.4g", norm, clip_norm)

        state = self.state
        state.step += 1
        bias1 = 1.0 - state.beta1 ** state.step
        bias2 = 1.0 - state.beta2 ** state.step
        for index, p in enumerate(self.params):
            if p.grad is None:
                continue
            grad = p.grad * factor if factor != 1.0 else p.grad
            state.m[index] = state.beta1 * state.m[index] + (1.0 - state.beta1) * grad
            state.v[index] = state.beta2 * state.v[index] + (1.0 - state.beta2) * (grad * grad)
            m_hat = state.m[index] / bias1
            v_hat = state.v[index] / bias2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        return norm


@dataclass
class StepDecay:
    """
    Piecewise-constant schedule: base_lr divided by ``factor`` after each decay epoch

    Epochs are counted from the start of the stage the schedule belongs to.
    """
    base_lr: float
    decay_epochs: Sequence[int] = field(default_factory=list)
    factor: float = 10.0

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for d in self.decay_epochs if epoch >= d)
        return self.base_lr / (self.factor ** passed)
