"""Shared pytest configuration for the project test suite."""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest


# Ensure the repository root (which contains the ``src`` package) is importable.
ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

FIXTURES = Path(__file__).resolve().parent / 'fixtures'


@pytest.fixture(autouse=True)
def float64_default():
    """Every test starts (and ends) in float64."""
    from src.tensor_autodiff import set_default_dtype

    set_default_dtype('float64')
    yield
    set_default_dtype('float64')


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def micro_arch():
    """Three single-layer blocks, small enough for finite differences; two-dim tokens at block 2."""
    from src.variational_net import Architecture

    return Architecture.one_layer_per_block((3, 8, 8, 3))


@pytest.fixture
def micro_batch(rng):
    x = rng.standard_normal((6, 3))
    y = np.array([0, 1, 2, 0, 1, 2])
    return x, y


@pytest.fixture
def smoke_config_dict(tmp_path) -> dict:
    """Two-moons config small enough for end-to-end runs in a few seconds."""
    return {
        'architecture': {'widths': [2, 16, 16, 2]},
        'schedule': {'stage1_epochs': 2, 'stage2_epochs': 1, 'batch_size': 32,
                     'stage1_decay_epochs': [1], 'stage2_decay_epochs': []},
        'dataset': {'kind': 'two_moons', 'n': 120, 'noise': 0.1},
        'attention': {'attn_dim': 4},
        'init': {'mode': 'pretrained_b2', 'pretrain_epochs': 2},
        'metrics': {'samples': 4, 'history_samples': 2},
        'seeds': [0],
        'output_dir': str(tmp_path / 'run'),
    }
