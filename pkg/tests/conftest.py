import dataclasses
import os
import sys

import numpy as np
import pytest

# Add repository root to path for module imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from models import DynamicsModel
from track import straight_track
from vehicle_sim import nominal_system

TINY_MODEL = {
    "context_dim": 4,
    "sit_width": 8,
    "sit_heads": 2,
    "sit_layers": 1,
    "sit_ffn_width": 8,
    "adm_hidden": 6,
    "adm_head_width": 6,
    "history_cap": 16,
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return DynamicsModel(TINY_MODEL, seed=7)


@pytest.fixture
def straight():
    return straight_track(20.0, width=1.0)


@pytest.fixture
def easy_system():
    """Nominal dynamics with grippy tires and no noise."""
    return dataclasses.replace(nominal_system().noise_free(), friction_coeff=1.2, system_id="sys-easy")
