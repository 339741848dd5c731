"""
Checkpoint Module
Binary checkpoints: magic, length-prefixed canonical JSON header, then a flat
float64 little-endian payload. Saving a loaded checkpoint reproduces the file
byte for byte.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .errors import CheckpointError
from .feature_diversity import FeatureFusion, FusionPlan
from .optim import Adam, AdamState
from .variational_net import Architecture, BnnModel, DeterministicNet, PriorSpec, SamplingMode

logger = logging.getLogger(__name__)

MAGIC = b'DMLBNN01'
FORMAT_VERSION = 1
KIND_BNN = 'bnn'
KIND_DETERMINISTIC = 'deterministic'


@dataclass
class Checkpoint:
    """In-memory checkpoint; ``arrays`` keeps the payload order"""
    kind: str
    architecture: Architecture
    arrays: Dict[str, np.ndarray]
    sampling: Optional[str] = None
    prior_std: Optional[float] = None
    fusion: Optional[Dict[str, Any]] = None
    rng_state: Optional[Dict[str, Any]] = None
    optimizer: Optional[Dict[str, Any]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def arch_hash(self) -> str:
        return self.architecture.hash()

    def header(self) -> Dict[str, Any]:
        entries, offset = [], 0
        for name, array in self.arrays.items():
            entries.append({'name': name, 'shape': list(array.shape), 'offset': offset})
            offset += int(array.size)
        return {
            'format_version': FORMAT_VERSION,
            'kind': self.kind,
            'arch_hash': self.arch_hash,
            'architecture': self.architecture.to_dict(),
            'sampling': self.sampling,
            'prior_std': self.prior_std,
            'fusion': self.fusion,
            'entries': entries,
            'rng_state': self.rng_state,
            'optimizer': self.optimizer,
            'metadata': self.metadata,
        }


def _plan_to_dict(plan: FusionPlan) -> Dict[str, Any]:
    return {'pairs': [list(p) for p in plan.pairs], 'tokens': plan.tokens, 'attn_dim': plan.attn_dim,
            'scale': plan.scale}


def _plan_from_dict(data: Dict[str, Any]) -> FusionPlan:
    return FusionPlan(pairs=tuple(tuple(p) for p in data['pairs']), tokens=data['tokens'],
                      attn_dim=data['attn_dim'], scale=data['scale'])


def checkpoint_from_peer(model: BnnModel, fusion: Optional[FeatureFusion] = None, optimizer: Optional[Adam] = None,
                         rng: Optional[np.random.Generator] = None,
                         metadata: Optional[Dict[str, Any]] = None) -> Checkpoint:
    """
    Snapshot one BNN peer with its attention modules, Adam state and rng

    Args:
        model: the peer
        fusion: its feature fusion modules
        optimizer: its optimizer (moments are stored when given)
        rng: generator whose state is recorded
        metadata: free-form labels (method, seed, config hash)
    """
    arrays = {name: p.data.copy() for name, p in model.named_parameters().items()}
    if fusion is not None:
        arrays.update({name: p.data.copy() for name, p in fusion.named_parameters().items()})
    optimizer_header = None
    if optimizer is not None:
        state = optimizer.state
        for index, (m, v) in enumerate(zip(state.m, state.v)):
            arrays[f"adam.m.{index}"] = m.copy()
            arrays[f"adam.v.{index}"] = v.copy()
        optimizer_header = {'step': state.step, 'beta1': state.beta1, 'beta2': state.beta2, 'eps': state.eps,
                            'lr': optimizer.lr, 'count': len(state.m)}
    return Checkpoint(
        kind=KIND_BNN, architecture=model.architecture, arrays=arrays, sampling=model.mode.value,
        prior_std=model.prior.std, fusion=_plan_to_dict(fusion.plan) if fusion is not None else None,
        rng_state=rng.bit_generator.state if rng is not None else None, optimizer=optimizer_header,
        metadata=dict(metadata or {}))


def checkpoint_from_deterministic(net: DeterministicNet, metadata: Optional[Dict[str, Any]] = None) -> Checkpoint:
    arrays = {name: p.data.copy() for name, p in net.named_parameters().items()}
    return Checkpoint(kind=KIND_DETERMINISTIC, architecture=net.architecture, arrays=arrays,
                      metadata=dict(metadata or {}))


def _canonical(header: Dict[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    """Write ``checkpoint`` to ``path`` (parent directories are created)"""
    header = _canonical(checkpoint.header())
    if checkpoint.arrays:
        payload = np.concatenate([a.reshape(-1).astype('<f8') for a in checkpoint.arrays.values()]).tobytes()
    else:
        payload = b''
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as handle:
        handle.write(MAGIC)
        handle.write(struct.pack('<Q', len(header)))
        handle.write(header)
        handle.write(payload)
    logger.info("wrote checkpoint %s (%d arrays)", path, len(checkpoint.arrays))


def load_checkpoint(path: str, expected: Optional[Architecture] = None) -> Checkpoint:
    """
    Read a checkpoint file

    Args:
        path: file to read
        expected: architecture the checkpoint must match

    Raises:
        CheckpointError: bad magic, truncated data, unknown version or
            architecture hash mismatch
    """
    if not os.path.exists(path):
        raise CheckpointError(f"{path}: file not found")
    with open(path, 'rb') as handle:
        raw = handle.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    start = len(MAGIC) + 8
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header length")
    (header_len,) = struct.unpack('<Q', raw[len(MAGIC):start])
    if len(raw) < start + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}")
    if header.get('format_version') != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")

    try:
        architecture = Architecture(tuple(header['architecture']['widths']),
                                    tuple(header['architecture']['block_boundaries']))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid architecture: {exc}")
    if architecture.hash() != header.get('arch_hash'):
        raise CheckpointError(f"{path}: architecture hash does not match the stored architecture")
    if expected is not None and expected.hash() != architecture.hash():
        raise CheckpointError(f"{path}: architecture {architecture.widths} does not match expected {expected.widths}")

    payload = np.frombuffer(raw, dtype='<f8', offset=start + header_len)
    arrays = {}
    for entry in header.get('entries', []):
        count = int(np.prod(entry['shape'])) if entry['shape'] else 1
        begin = entry['offset']
        if begin + count > payload.size:
            raise CheckpointError(f"{path}: payload too short for entry {entry['name']}")
        arrays[entry['name']] = payload[begin:begin + count].reshape(entry['shape']).astype(np.float64)
    return Checkpoint(kind=header['kind'], architecture=architecture, arrays=arrays,
                      sampling=header.get('sampling'), prior_std=header.get('prior_std'),
                      fusion=header.get('fusion'), rng_state=header.get('rng_state'),
                      optimizer=header.get('optimizer'), metadata=header.get('metadata') or {})


def _assign(target: Dict[str, Any], arrays: Dict[str, np.ndarray], source: str) -> None:
    for name, tensor in target.items():
        if name not in arrays:
            raise CheckpointError(f"{source}: missing entry {name}")
        if arrays[name].shape != tensor.shape:
            raise CheckpointError(f"{source}: entry {name} has shape {arrays[name].shape}, expected {tensor.shape}")
        tensor.data = arrays[name].astype(tensor.data.dtype).copy()


def restore_peer(checkpoint: Checkpoint) -> Tuple[BnnModel, Optional[FeatureFusion], Optional[AdamState]]:
    """Rebuild a BNN peer, its attention modules and its Adam state"""
    if checkpoint.kind != KIND_BNN:
        raise CheckpointError(f"expected a {KIND_BNN} checkpoint, got {checkpoint.kind}")
    model = BnnModel(checkpoint.architecture, SamplingMode(checkpoint.sampling), PriorSpec(std=checkpoint.prior_std))
    _assign(model.named_parameters(), checkpoint.arrays, 'checkpoint')
    fusion = None
    if checkpoint.fusion is not None:
        fusion = FeatureFusion(checkpoint.architecture.block_widths, _plan_from_dict(checkpoint.fusion))
        _assign(fusion.named_parameters(), checkpoint.arrays, 'checkpoint')
    state = None
    if checkpoint.optimizer is not None:
        opt = checkpoint.optimizer
        count = opt['count']
        state = AdamState(m=[checkpoint.arrays[f"adam.m.{i}"].copy() for i in range(count)],
                          v=[checkpoint.arrays[f"adam.v.{i}"].copy() for i in range(count)],
                          step=opt['step'], beta1=opt['beta1'], beta2=opt['beta2'], eps=opt['eps'])
    return model, fusion, state


def restore_optimizer(checkpoint: Checkpoint, model: BnnModel, fusion: Optional[FeatureFusion],
                      state: Optional[AdamState]) -> Adam:
    params: List = model.parameters() + (fusion.parameters() if fusion is not None else [])
    lr = checkpoint.optimizer['lr'] if checkpoint.optimizer else 1e-3
    optimizer = Adam(params, lr=lr)
    if state is not None:
        optimizer.state = state
    return optimizer


def restore_rng(checkpoint: Checkpoint) -> Optional[np.random.Generator]:
    """Generator resumed at the recorded state, or None"""
    if checkpoint.rng_state is None:
        return None
    rng = np.random.default_rng()
    rng.bit_generator.state = checkpoint.rng_state
    return rng


def restore_deterministic(checkpoint: Checkpoint) -> DeterministicNet:
    if checkpoint.kind != KIND_DETERMINISTIC:
        raise CheckpointError(f"expected a {KIND_DETERMINISTIC} checkpoint, got {checkpoint.kind}")
    net = DeterministicNet(checkpoint.architecture)
    _assign(net.named_parameters(), checkpoint.arrays, 'checkpoint')
    return net
