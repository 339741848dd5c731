"""
Mutual Trainer Module
Two-peer training loop: logit mutual distillation, the shared parameter
diversity loss, per-network feature diversity losses, sequential Adam
updates (B1 then B2) and the two-stage schedule.
"""

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .datasets import Dataset
from .errors import NonFiniteError, ShapeError
from .eval_metrics import accuracy, ensemble_predict
from .feature_diversity import FeatureFusion, FusedBatch, FusionPlan, diverse_feat_loss, fused_feature_kl
from .optim import Adam, AdamState, StepDecay
from .posterior_geometry import (DiagonalGaussian, DistanceMetric, diverse_param_loss,
                                 posterior_distance)
from .tensor_autodiff import Tensor, no_grad
from .variational_net import (Architecture, BnnModel, DeterministicNet, ElboTerms, LayerNoise, PriorSpec,
                              SamplingMode, cross_entropy, elbo_terms)

logger = logging.getLogger(__name__)


class Method(str, Enum):
    """Training recipes compared by the harness"""
    VANILLA = 'vanilla'
    DML = 'dml'
    OURS = 'ours'
    PARAM_ONLY = 'param_only'
    FEAT_ONLY = 'feat_only'


class InitMode(str, Enum):
    """How the peers' means are initialised"""
    SCRATCH = 'scratch'
    PRETRAINED_B2 = 'pretrained_b2'
    PRETRAINED_BOTH = 'pretrained_both'


@dataclass(frozen=True)
class Hyperparams:
    """
    Loss weights of the total objective

    Args:
        temperature: T > 0 softening both peers' logits
        alpha: weight of the parameter diversity loss
        beta: weight of the feature diversity loss (forced to 0 in stage 1)
        metric: posterior distance (w2 or kl)
        mutual: include the logit distillation term
        clip_norm: optional global gradient-norm clip
    """
    temperature: float = 3.0
    alpha: float = 1.0
    beta: float = 2.0
    metric: DistanceMetric = DistanceMetric.W2
    mutual: bool = True
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be > 0 when set, got {self.clip_norm}")
        object.__setattr__(self, 'metric', DistanceMetric(self.metric))

    def for_stage(self, stage: int) -> 'Hyperparams':
        return replace(self, beta=0.0) if stage == 1 else self

    def for_method(self, method: Union[Method, str]) -> 'Hyperparams':
        method = Method(method)
        if method == Method.VANILLA:
            return replace(self, mutual=False, alpha=0.0, beta=0.0)
        if method == Method.DML:
            return replace(self, mutual=True, alpha=0.0, beta=0.0)
        if method == Method.PARAM_ONLY:
            return replace(self, mutual=True, beta=0.0)
        if method == Method.FEAT_ONLY:
            return replace(self, mutual=True, alpha=0.0)
        return replace(self, mutual=True)


@dataclass(frozen=True)
class TrainSchedule:
    """Two-stage epoch plan; decay epochs count from the start of their stage"""
    stage1_epochs: int = 40
    stage2_epochs: int = 20
    lr: float = 1e-3
    stage1_decay_epochs: Tuple[int, ...] = (16, 24, 32, 36)
    stage2_decay_epochs: Tuple[int, ...] = (6, 12, 18)
    decay_factor: float = 10.0
    batch_size: int = 64

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("stage epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")

    def stages(self) -> List[Tuple[int, int, StepDecay]]:
        return [(1, self.stage1_epochs, StepDecay(self.lr, self.stage1_decay_epochs, self.decay_factor)),
                (2, self.stage2_epochs, StepDecay(self.lr, self.stage2_decay_epochs, self.decay_factor))]


@dataclass
class PeerPair:
    """The two peers with their attention modules and disjoint optimizers"""
    b1: BnnModel
    b2: BnnModel
    fusion1: FeatureFusion
    fusion2: FeatureFusion
    opt1: Adam
    opt2: Adam

    def __post_init__(self):
        if self.b1.architecture != self.b2.architecture:
            raise ShapeError("peers must share one architecture")
        ids1 = {id(p) for p in self.opt1.params}
        if any(id(p) in ids1 for p in self.opt2.params):
            raise ValueError("peer optimizers must own disjoint parameter sets")

    @property
    def attn1(self):
        return self.fusion1.modules

    @property
    def attn2(self):
        return self.fusion2.modules

    def snapshot(self) -> Dict:
        return {'params1': [p.data.copy() for p in self.opt1.params],
                'params2': [p.data.copy() for p in self.opt2.params],
                'state1': self.opt1.state.copy(), 'state2': self.opt2.state.copy()}

    def restore(self, snapshot: Dict) -> None:
        for p, data in zip(self.opt1.params, snapshot['params1']):
            p.data = data.copy()
        for p, data in zip(self.opt2.params, snapshot['params2']):
            p.data = data.copy()
        self.opt1.state = snapshot['state1'].copy()
        self.opt2.state = snapshot['state2'].copy()
        self.opt1.zero_grad()
        self.opt2.zero_grad()


@dataclass
class StepMetrics:
    """Loss components of one iteration (None where a term is absent)"""
    elbo_b1: float
    elbo_b2: float
    logit_kl_b1: Optional[float]
    logit_kl_b2: Optional[float]
    diverse_param: float
    diverse_feat_b1: Optional[float]
    diverse_feat_b2: Optional[float]
    param_distance: float
    total_b1: float
    total_b2: float


@dataclass
class EpochRecord:
    """One history row"""
    method: str
    seed: int
    stage: int
    epoch: int
    lr: float
    elbo_b1: float
    elbo_b2: float
    logit_kl_b1: Optional[float]
    logit_kl_b2: Optional[float]
    diverse_param: float
    diverse_feat_b1: Optional[float]
    diverse_feat_b2: Optional[float]
    param_distance: float
    total_b1: float
    total_b2: float
    val_acc_b1: Optional[float] = None
    val_acc_b2: Optional[float] = None
    status: str = 'ok'

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TrainingResult:
    """Outcome of run_training"""
    pair: PeerPair
    history: List[EpochRecord] = field(default_factory=list)
    status: str = 'ok'
    last_good_epoch: int = 0
    failure: Optional[str] = None


# --------------------------------------------------------------------------
# logit distillation
# --------------------------------------------------------------------------
def soft_logits(z: Tensor, temperature: float) -> Tensor:
    """softmax(z / T) row-wise"""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return (z / float(temperature)).softmax()


def distillation_kl(peer_probs: np.ndarray, own_logits: Tensor, temperature: float) -> Tensor:
    """Batch mean of KL[peer || softmax(own / T)]; the peer side is a constant"""
    peer_probs = np.asarray(peer_probs, dtype=own_logits.data.dtype)
    if peer_probs.shape != own_logits.shape:
        raise ShapeError(f"peer probabilities {peer_probs.shape} do not match logits {own_logits.shape}")
    peer_log = np.log(np.where(peer_probs > 0, peer_probs, 1.0))
    own_log = (own_logits / float(temperature)).log_softmax()
    per_sample = (Tensor(peer_probs) * (Tensor(peer_log) - own_log)).sum(axis=1)
    return per_sample.mean()


def logit_loss_from_terms(elbo: ElboTerms, peer_probs: np.ndarray, temperature: float) -> Tuple[Tensor, Tensor]:
    kl = distillation_kl(peer_probs, elbo.output.logits, temperature)
    return elbo.loss + kl * (temperature * temperature), kl


def logit_loss(model: BnnModel, peer_probs: np.ndarray, x: np.ndarray, y: np.ndarray,
               rng: np.random.Generator, temperature: float, dataset_size: int) -> Tensor:
    """
    ELBO of ``model`` plus T^2 * KL[peer || self] on softened probabilities

    Args:
        model: the network being trained
        peer_probs: the peer's softmax(z / T), treated as constants
        x, y: mini-batch
        rng: stream for the single weight sample
        temperature: T
        dataset_size: N for the KL weighting

    Returns:
        scalar loss
    """
    elbo = elbo_terms(model, x, y, model.draw_noise(rng), dataset_size)
    if peer_probs.shape[1] != model.architecture.num_classes:
        raise ShapeError(f"peer has {peer_probs.shape[1]} classes, model has {model.architecture.num_classes}")
    return logit_loss_from_terms(elbo, peer_probs, temperature)[0]


# --------------------------------------------------------------------------
# per-network objective
# --------------------------------------------------------------------------
@dataclass
class PeerView:
    """A peer's outputs on the batch, detached from any graph"""
    probs: np.ndarray
    fused: List[FusedBatch]


@dataclass
class NetworkLoss:
    total: Tensor
    elbo: Tensor
    logit_kl: Optional[Tensor]
    diverse_param: Tensor
    distance: Tensor
    diverse_feat: Optional[Tensor]


def _peer_view(model: BnnModel, fusion: FeatureFusion, x: np.ndarray, noise: Sequence[LayerNoise],
               temperature: float) -> PeerView:
    with no_grad():
        output = model.forward_with_noise(x, noise)
        probs = soft_logits(output.logits, temperature).data
        fused = fusion.fuse(output.features) if _fusable(fusion, x) else []
    return PeerView(probs=probs, fused=fused)


def _fusable(fusion: FeatureFusion, x: np.ndarray) -> bool:
    return bool(fusion.modules) and len(x) >= 2


def network_loss(model: BnnModel, fusion: FeatureFusion, x: np.ndarray, y: np.ndarray,
                 noise: Sequence[LayerNoise], dataset_size: int, hyper: Hyperparams,
                 peer: PeerView, distance: Tensor) -> NetworkLoss:
    """
    L = L_logits + alpha * L_diverse_param + beta * L_diverse_feat for one peer

    ``distance`` must be differentiable only through this network's posterior;
    the peer's contributions arrive as constants in ``peer``.
    """
    elbo = elbo_terms(model, x, y, noise, dataset_size)
    total = elbo.loss
    kl = None
    if hyper.mutual:
        total, kl = logit_loss_from_terms(elbo, peer.probs, hyper.temperature)
    param_term = diverse_param_loss(distance)
    if hyper.alpha > 0:
        total = total + param_term * hyper.alpha
    feat_term = None
    if peer.fused and _fusable(fusion, x):
        own_fused = fusion.fuse(elbo.output.features)
        feat_term = diverse_feat_loss(fused_feature_kl(peer.fused, own_fused))
        if hyper.beta > 0:
            total = total + feat_term * hyper.beta
    return NetworkLoss(total=total, elbo=elbo.loss, logit_kl=kl, diverse_param=param_term,
                       distance=distance, diverse_feat=feat_term)


def _value(t: Optional[Tensor]) -> Optional[float]:
    return None if t is None else t.item()


def _step_metrics(loss1: NetworkLoss, loss2: NetworkLoss) -> StepMetrics:
    return StepMetrics(
        elbo_b1=loss1.elbo.item(), elbo_b2=loss2.elbo.item(),
        logit_kl_b1=_value(loss1.logit_kl), logit_kl_b2=_value(loss2.logit_kl),
        diverse_param=loss1.diverse_param.item(),
        diverse_feat_b1=_value(loss1.diverse_feat), diverse_feat_b2=_value(loss2.diverse_feat),
        param_distance=loss1.distance.item(),
        total_b1=loss1.total.item(), total_b2=loss2.total.item(),
    )


def shared_distances(pair: PeerPair, metric: DistanceMetric) -> Tuple[Tensor, Tensor]:
    """
    D(q1, q2) evaluated once, as two graphs with one side detached each

    Returns:
        (distance differentiable in B1 only, distance differentiable in B2 only);
        both hold the same value
    """
    q1 = DiagonalGaussian.from_model(pair.b1)
    q2 = DiagonalGaussian.from_model(pair.b2)
    return posterior_distance(q1, q2.detach(), metric), posterior_distance(q1.detach(), q2, metric)


def total_losses(pair: PeerPair, x: np.ndarray, y: np.ndarray, hyper: Hyperparams,
                 rng: np.random.Generator, dataset_size: int) -> Tuple[Tensor, Tensor, StepMetrics]:
    """
    Both peers' total losses against each other's current parameters

    Args:
        pair: the peers
        x, y: mini-batch
        hyper: loss weights
        rng: stream for one weight sample per network (B1 first)
        dataset_size: N

    Returns:
        (L^B1, L^B2, step metrics); both share one L_diverse_param value
    """
    noise1, noise2 = pair.b1.draw_noise(rng), pair.b2.draw_noise(rng)
    d1, d2 = shared_distances(pair, hyper.metric)
    view1 = _peer_view(pair.b1, pair.fusion1, x, noise1, hyper.temperature)
    view2 = _peer_view(pair.b2, pair.fusion2, x, noise2, hyper.temperature)
    loss1 = network_loss(pair.b1, pair.fusion1, x, y, noise1, dataset_size, hyper, view2, d1)
    loss2 = network_loss(pair.b2, pair.fusion2, x, y, noise2, dataset_size, hyper, view1, d2)
    return loss1.total, loss2.total, _step_metrics(loss1, loss2)


def _update(loss: Tensor, optimizer: Adam, clip_norm: Optional[float], name: str) -> None:
    loss.check_finite(f"loss of {name}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step(clip_norm)


def train_step(pair: PeerPair, x: np.ndarray, y: np.ndarray, hyper: Hyperparams,
               rng: np.random.Generator, dataset_size: int) -> StepMetrics:
    """
    One iteration: update B1 on L^B1, then B2 on L^B2 against the updated B1

    Each network draws one weight sample per iteration; B2's view of B1 reuses
    B1's sample with B1's new parameters. On a non-finite loss or gradient both
    peers and both optimizers are restored and NonFiniteError is raised.
    """
    snapshot = pair.snapshot()
    try:
        noise1, noise2 = pair.b1.draw_noise(rng), pair.b2.draw_noise(rng)
        d1, d2 = shared_distances(pair, hyper.metric)

        view2 = _peer_view(pair.b2, pair.fusion2, x, noise2, hyper.temperature)
        loss1 = network_loss(pair.b1, pair.fusion1, x, y, noise1, dataset_size, hyper, view2, d1)
        _update(loss1.total, pair.opt1, hyper.clip_norm, 'B1')

        view1 = _peer_view(pair.b1, pair.fusion1, x, noise1, hyper.temperature)
        loss2 = network_loss(pair.b2, pair.fusion2, x, y, noise2, dataset_size, hyper, view1, d2)
        _update(loss2.total, pair.opt2, hyper.clip_norm, 'B2')
    except NonFiniteError as exc:
        pair.restore(snapshot)
        logger.error("aborting step, parameters restored: %s", exc)
        raise
    metrics = _step_metrics(loss1, loss2)
    logger.debug("step %s", metrics)
    return metrics


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------
def init_peers(architecture: Architecture, rng: np.random.Generator, attention_rng: np.random.Generator,
               plan: FusionPlan, mode: SamplingMode = SamplingMode.BBB, prior: PriorSpec = PriorSpec(),
               pretrained: Optional[DeterministicNet] = None, init_mode: InitMode = InitMode.PRETRAINED_B2,
               lr: float = 1e-3) -> PeerPair:
    """
    Build B1 (random) and B2 (means from ``pretrained`` when given)

    Args:
        architecture: shared architecture
        rng: stream for the posterior initialisation (B1 drawn first)
        attention_rng: stream for the attention projections
        plan: feature fusion plan
        mode: sampling rule for both peers
        prior: weight prior
        pretrained: deterministic network whose weights seed the means
        init_mode: which peers take the pretrained means
        lr: initial learning rate

    Returns:
        PeerPair
    """
    init_mode = InitMode(init_mode)
    b1 = BnnModel(architecture, mode, prior, rng)
    b2 = BnnModel(architecture, mode, prior, rng)
    if pretrained is not None:
        if init_mode in (InitMode.PRETRAINED_B2, InitMode.PRETRAINED_BOTH):
            b2.load_means(pretrained)
        if init_mode == InitMode.PRETRAINED_BOTH:
            b1.load_means(pretrained)
    elif init_mode != InitMode.SCRATCH:
        logger.info("no pretrained model given; both peers start from scratch")
    fusion1 = FeatureFusion(architecture.block_widths, plan, attention_rng)
    fusion2 = FeatureFusion(architecture.block_widths, plan, attention_rng)
    opt1 = Adam(b1.parameters() + fusion1.parameters(), lr=lr)
    opt2 = Adam(b2.parameters() + fusion2.parameters(), lr=lr)
    return PeerPair(b1, b2, fusion1, fusion2, opt1, opt2)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled index batches; a trailing batch of one sample joins the previous batch"""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def _epoch_means(steps: List[StepMetrics]) -> Dict[str, Optional[float]]:
    means = {}
    for f in fields(StepMetrics):
        values = [getattr(s, f.name) for s in steps]
        means[f.name] = None if any(v is None for v in values) else float(np.mean(values))
    return means


def run_training(pair: PeerPair, train: Dataset, hyper: Hyperparams, schedule: TrainSchedule,
                 rng: np.random.Generator, validation: Optional[Dataset] = None,
                 eval_rng: Optional[np.random.Generator] = None, history_samples: int = 5,
                 method: str = Method.OURS.value, seed: int = 0) -> TrainingResult:
    """
    Two-stage training: stage 1 with beta = 0, stage 2 with beta restored and
    the learning rate reset

    Args:
        pair: peers to train in place
        train: training data
        hyper: loss weights for stage 2 (stage 1 forces beta = 0)
        schedule: epochs, learning rates and batch size
        rng: training stream (shuffling and weight samples)
        validation: optional data for per-epoch ensemble accuracy
        eval_rng: stream for the validation ensembles
        history_samples: ensemble size of the per-epoch validation accuracy
        method, seed: labels copied into the history

    Returns:
        TrainingResult; status 'FAILED' with the last good epoch on a non-finite loss
    """
    if len(train) == 0:
        raise ValueError("cannot train on an empty dataset")
    eval_rng = eval_rng if eval_rng is not None else np.random.default_rng(0)
    result = TrainingResult(pair=pair)
    epoch_counter = 0
    for stage, epochs, decay in schedule.stages():
        if epochs == 0:
            continue
        stage_hyper = hyper.for_stage(stage)
        logger.info("%s seed %d: stage %d for %d epochs (alpha=%g beta=%g T=%g)", method, seed, stage,
                    epochs, stage_hyper.alpha, stage_hyper.beta, stage_hyper.temperature)
        for epoch in range(epochs):
            epoch_counter += 1
            lr = decay.lr_at(epoch)
            pair.opt1.lr = lr
            pair.opt2.lr = lr
            steps = []
            try:
                for index in minibatches(len(train), schedule.batch_size, rng):
                    steps.append(train_step(pair, train.x[index], train.y[index], stage_hyper, rng, len(train)))
            except NonFiniteError as exc:
                result.status = 'FAILED'
                result.failure = str(exc)
                logger.error("%s seed %d failed in epoch %d: %s", method, seed, epoch_counter, exc)
                return result
            record = EpochRecord(method=method, seed=seed, stage=stage, epoch=epoch_counter, lr=lr,
                                 **_epoch_means(steps))
            if validation is not None and len(validation) and history_samples > 0:
                record.val_acc_b1 = accuracy(ensemble_predict(pair.b1, validation.x, history_samples, eval_rng),
                                             validation.y)
                record.val_acc_b2 = accuracy(ensemble_predict(pair.b2, validation.x, history_samples, eval_rng),
                                             validation.y)
            result.history.append(record)
            result.last_good_epoch = epoch_counter
            logger.info("%s seed %d epoch %d: total %.4f / %.4f, D %.4g, val acc %s / %s", method, seed,
                        epoch_counter, record.total_b1, record.total_b2, record.param_distance,
                        record.val_acc_b1, record.val_acc_b2)
    return result


def pretrain_deterministic(net: DeterministicNet, train: Dataset, epochs: int, lr: float, batch_size: int,
                           rng: np.random.Generator, decay_epochs: Sequence[int] = (),
                           decay_factor: float = 10.0) -> List[float]:
    """
    Train a point network with cross-entropy and Adam

    Returns:
        mean training loss per epoch
    """
    if len(train) == 0:
        raise ValueError("cannot train on an empty dataset")
    optimizer = Adam(net.parameters(), lr=lr)
    decay = StepDecay(lr, decay_epochs, decay_factor)
    losses = []
    for epoch in range(epochs):
        optimizer.lr = decay.lr_at(epoch)
        epoch_losses = []
        for index in minibatches(len(train), batch_size, rng):
            loss = cross_entropy(net.forward(train.x[index]).logits, train.y[index])
            _update(loss, optimizer, None, 'deterministic net')
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)))
        logger.info("pretrain epoch %d: loss %.4f", epoch + 1, losses[-1])
    return losses
