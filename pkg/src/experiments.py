"""
Experiments Module
End-to-end commands: train, compare, eval, pretrain-deterministic and
make-data. Each command resolves its random streams from (seed, name) so a
replay with the same config and seed reproduces every file.
"""

import json
import logging
import os
from dataclasses import asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import (checkpoint_from_deterministic, checkpoint_from_peer, load_checkpoint, restore_deterministic,
                         restore_peer, save_checkpoint)
from .config import TrainConfig
from .datasets import Dataset, make_dataset, save_csv_vectors
from .errors import ConfigError
from .eval_metrics import EnsemblePrediction, MetricsReport, ensemble_predict, evaluate, reliability_table
from .mutual_trainer import InitMode, Method, TrainingResult, init_peers, pretrain_deterministic, run_training
from .random_streams import stream
from .reporting import ResultRow, RunReport, failed_record
from .tensor_autodiff import precision
from .variational_net import BnnModel, DeterministicNet, SamplingMode

logger = logging.getLogger(__name__)

DNN = 'dnn'


def describe_plan(config: TrainConfig, command: str, methods: Sequence[str]) -> str:
    """Human-readable summary of what a command would do"""
    arch = config.to_architecture()
    s = config.schedule
    h = config.hyper
    lines = [
        f"command:       {command}",
        f"config hash:   {config.hash()}",
        f"output dir:    {config.output_dir}",
        f"dataset:       {config.dataset.kind} (n={config.dataset.n}, noise={config.dataset.noise})",
        f"architecture:  widths={list(arch.widths)} blocks={list(arch.block_boundaries)} "
        f"({arch.num_parameters} weights per peer)",
        f"sampling:      {config.sampling}, prior std {config.prior_std}",
        f"methods:       {', '.join(methods)}",
        f"seeds:         {config.seeds}",
        f"schedule:      stage 1 {s.stage1_epochs} epochs (decay at {s.stage1_decay_epochs}), "
        f"stage 2 {s.stage2_epochs} epochs (decay at {s.stage2_decay_epochs}), lr {s.lr}, batch {s.batch_size}",
        f"losses:        T={h.temperature} alpha={h.alpha} beta={h.beta} metric={h.metric}",
        f"feature pairs: {[list(p) for p in config.block_pairs()]}",
        f"init:          {config.init.mode}"
        + (f" from {config.init.pretrained_path}" if config.init.pretrained_path else ''),
        f"evaluation:    S={config.metrics.samples}, {config.metrics.bins} bins, "
        f"retention {config.metrics.retention} by {config.metrics.uncertainty}",
    ]
    return '\n'.join(lines)


def load_data(config: TrainConfig, seed: int) -> Tuple[Dataset, Dataset]:
    """Dataset for ``seed``, checked against the architecture"""
    train, validation = make_dataset(config.to_dataset_spec(), stream(seed, 'data'))
    arch = config.to_architecture()
    if train.num_features != arch.input_dim:
        raise ConfigError('architecture.widths',
                          f"input width {arch.input_dim} does not match {train.num_features} dataset features")
    classes = max(train.num_classes, validation.num_classes)
    if classes > arch.num_classes:
        raise ConfigError('architecture.widths', f"output width {arch.num_classes} is below {classes} classes")
    return train, validation


def _warn_single_block(config: TrainConfig) -> None:
    if not config.block_pairs() and config.hyper.beta > 0:
        logger.warning("network has %d block(s); feature diversity is disabled despite beta=%g",
                       config.to_architecture().num_blocks, config.hyper.beta)


def train_deterministic(config: TrainConfig, seed: int, train: Dataset) -> DeterministicNet:
    """Point network of the peers' architecture trained with cross-entropy"""
    rng = stream(seed, 'pretrain')
    net = DeterministicNet(config.to_architecture(), rng)
    s = config.schedule
    pretrain_deterministic(net, train, config.init.pretrain_epochs, s.lr, s.batch_size, rng,
                           s.stage1_decay_epochs, s.decay_factor)
    return net


def obtain_pretrained(config: TrainConfig, seed: int, train: Dataset) -> DeterministicNet:
    """Load ``init.pretrained_path`` or train a point network on the fly"""
    if config.init.pretrained_path:
        ckpt = load_checkpoint(config.init.pretrained_path, expected=config.to_architecture())
        return restore_deterministic(ckpt)
    return train_deterministic(config, seed, train)


def train_peers(config: TrainConfig, method: str, seed: int, train: Dataset, validation: Dataset,
                pretrained: Optional[DeterministicNet]) -> Tuple[TrainingResult, np.random.Generator]:
    """Initialise and train one peer pair under ``method``; also returns the spent training stream"""
    init_mode = InitMode(config.init.mode)
    pair = init_peers(config.to_architecture(), stream(seed, 'init'), stream(seed, 'attention'),
                      config.to_fusion_plan(), SamplingMode(config.sampling), config.to_prior(),
                      pretrained if init_mode != InitMode.SCRATCH else None, init_mode, config.schedule.lr)
    hyper = config.to_hyperparams().for_method(method)
    train_rng = stream(seed, 'train')
    result = run_training(pair, train, hyper, config.to_schedule(), train_rng, validation,
                          stream(seed, 'history'), config.metrics.history_samples, method, seed)
    return result, train_rng


def evaluate_peer(model: BnnModel, data: Dataset, config: TrainConfig, seed: int,
                  rng: np.random.Generator) -> MetricsReport:
    pred = ensemble_predict(model, data.x, config.metrics.samples, rng)
    return evaluate(pred, data.y, config.metrics.bins, config.metrics.retention, config.metrics.uncertainty,
                    seed=seed, config_hash=config.hash())


def evaluate_deterministic(net: DeterministicNet, data: Dataset, config: TrainConfig, seed: int) -> MetricsReport:
    pred = EnsemblePrediction.from_probabilities(net.predict_proba(data.x))
    return evaluate(pred, data.y, config.metrics.bins, config.metrics.retention, 'entropy',
                    seed=seed, config_hash=config.hash())


def _save_pair(result: TrainingResult, config: TrainConfig, method: str, seed: int,
               train_rng: np.random.Generator) -> List[str]:
    directory = os.path.join(config.output_dir, 'checkpoints', f"seed_{seed}")
    pair = result.pair
    paths = []
    for peer, model, fusion, optimizer in (('b1', pair.b1, pair.fusion1, pair.opt1),
                                           ('b2', pair.b2, pair.fusion2, pair.opt2)):
        path = os.path.join(directory, f"{method}_{peer}.ckpt")
        metadata = {'method': method, 'peer': peer, 'seed': seed, 'config_hash': config.hash()}
        save_checkpoint(checkpoint_from_peer(model, fusion, optimizer, train_rng, metadata), path)
        paths.append(path)
    return paths


def _write_resolved_config(config: TrainConfig) -> None:
    os.makedirs(config.output_dir, exist_ok=True)
    with open(os.path.join(config.output_dir, 'config.resolved.json'), 'w') as handle:
        json.dump(config.to_dict(), handle, indent=2, sort_keys=True)


def run_methods(config: TrainConfig, methods: Sequence[str], include_dnn: bool) -> RunReport:
    """
    Train and evaluate every method for every seed under matched streams

    Args:
        config: validated configuration
        methods: method names to train
        include_dnn: add the deterministic baseline rows

    Returns:
        RunReport (also written to ``config.output_dir``)
    """
    _warn_single_block(config)
    report = RunReport(config_hash=config.hash())
    _write_resolved_config(config)
    for seed in config.seeds:
        train, validation = load_data(config, seed)
        needs_point_net = include_dnn or InitMode(config.init.mode) != InitMode.SCRATCH
        pretrained = obtain_pretrained(config, seed, train) if needs_point_net else None
        if include_dnn:
            metrics = evaluate_deterministic(pretrained, validation, config, seed)
            report.rows.append(ResultRow(DNN, DNN, seed, config.hash(), metrics))
        for method in methods:
            logger.info("training %s, seed %d", method, seed)
            result, train_rng = train_peers(config, method, seed, train, validation, pretrained)
            report.history.extend(result.history)
            if result.status != 'ok':
                report.failures.append(failed_record(method, seed, result.last_good_epoch))
                continue
            _save_pair(result, config, method, seed, train_rng)
            eval_rng = stream(seed, 'eval')
            for peer, model in (('b1', result.pair.b1), ('b2', result.pair.b2)):
                metrics = evaluate_peer(model, validation, config, seed, eval_rng)
                report.rows.append(ResultRow(method, peer, seed, config.hash(), metrics))
                logger.info("%s %s seed %d: acc %.4f nll %.4f ece %.4f", method, peer, seed, metrics.acc,
                            metrics.nll, metrics.ece)
    report.write(config.output_dir)
    return report


def cmd_train(config: TrainConfig, dry_run: bool = False) -> Optional[RunReport]:
    """Two-stage training of the full method for every configured seed"""
    methods = [Method.OURS.value]
    if dry_run:
        print(describe_plan(config, 'train', methods))
        return None
    with precision(config.precision):
        return run_methods(config, methods, include_dnn=False)


def cmd_compare(config: TrainConfig, dry_run: bool = False) -> Optional[RunReport]:
    """Vanilla, DML, the full method (and any ablations) plus the DNN baseline"""
    if dry_run:
        print(describe_plan(config, 'compare', [DNN] + config.methods))
        return None
    with precision(config.precision):
        return run_methods(config, config.methods, include_dnn=True)


def cmd_eval(config: TrainConfig, checkpoint_path: str, seed: Optional[int] = None,
             dry_run: bool = False) -> Optional[MetricsReport]:
    """
    Ensemble metrics of a saved peer on the validation split

    Raises:
        CheckpointError: the checkpoint's architecture differs from the config's
    """
    seed = config.seeds[0] if seed is None else seed
    if dry_run:
        print(describe_plan(config, 'eval', [checkpoint_path]))
        return None
    with precision(config.precision):
        ckpt = load_checkpoint(checkpoint_path, expected=config.to_architecture())
        _, validation = load_data(config, seed)
        if ckpt.kind == 'deterministic':
            pred = EnsemblePrediction.from_probabilities(restore_deterministic(ckpt).predict_proba(validation.x))
            kind = 'entropy'
        else:
            model, _, _ = restore_peer(ckpt)
            pred = ensemble_predict(model, validation.x, config.metrics.samples, stream(seed, 'eval'))
            kind = config.metrics.uncertainty
        metrics = evaluate(pred, validation.y, config.metrics.bins, config.metrics.retention, kind,
                           seed=seed, config_hash=config.hash())
        bins = [asdict(b) for b in reliability_table(pred, validation.y, config.metrics.bins)]
    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, 'eval.json')
    with open(path, 'w') as handle:
        json.dump({'checkpoint': checkpoint_path, **metrics.to_dict(), 'reliability': bins}, handle, indent=2,
                  sort_keys=True)
    logger.info("wrote %s", path)
    return metrics


def cmd_pretrain(config: TrainConfig, dry_run: bool = False) -> Optional[Dict[int, str]]:
    """Train and save the deterministic point network for each seed"""
    if dry_run:
        print(describe_plan(config, 'pretrain-deterministic', [DNN]))
        return None
    paths = {}
    with precision(config.precision):
        for seed in config.seeds:
            train, validation = load_data(config, seed)
            net = train_deterministic(config, seed, train)
            metrics = evaluate_deterministic(net, validation, config, seed)
            path = os.path.join(config.output_dir, f"pretrained_seed{seed}.ckpt")
            save_checkpoint(checkpoint_from_deterministic(net, {'seed': seed, 'config_hash': config.hash(),
                                                                'acc': metrics.acc}), path)
            logger.info("deterministic net seed %d: acc %.4f nll %.4f", seed, metrics.acc, metrics.nll)
            paths[seed] = path
    return paths


def cmd_make_data(config: TrainConfig, dry_run: bool = False) -> Optional[Dict[str, str]]:
    """Write the seed's train / validation splits as CSV"""
    seed = config.seeds[0]
    if dry_run:
        print(describe_plan(config, 'make-data', []))
        return None
    train, validation = make_dataset(config.to_dataset_spec(), stream(seed, 'data'))
    paths = {}
    for name, data in (('train', train), ('validation', validation)):
        paths[name] = os.path.join(config.output_dir, f"{name}.csv")
        save_csv_vectors(data, paths[name])
    logger.info("wrote %s", ', '.join(paths.values()))
    return paths
