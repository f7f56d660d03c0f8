"""
Pytest configuration and shared fixtures for Quiet Meter
"""

import pytest
from pathlib import Path
from typing import Dict, Any

import numpy as np
import yaml

# Add project root to path
import sys
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.ess import DESK_SCALE_BATTERY, EssParams
from core.household import HouseholdModel, Trace
from core.inference import CostMatrix
from core.synthesis import OptimizerConfig, StateSpace


# ============================================================================
# Session-level fixtures
# ============================================================================

@pytest.fixture(scope="session")
def test_config_dir(tmp_path_factory):
    """Create temporary config directory"""
    return tmp_path_factory.mktemp("config")


# ============================================================================
# Battery fixtures
# ============================================================================

@pytest.fixture
def desk_params() -> EssParams:
    """12 V 100 Ah battery with one-minute slots"""
    return EssParams.from_mapping(DESK_SCALE_BATTERY)


@pytest.fixture
def lossless_params() -> EssParams:
    """Ideal converters, no resistance and no self-discharge"""
    values = dict(DESK_SCALE_BATTERY, r_ohms=0.0, eta_c=1.0, eta_d=1.0, gamma_per_month=0.0)
    return EssParams.from_mapping(values)


@pytest.fixture
def tiny_params() -> EssParams:
    """16 Wh store so that three 8 Wh energy levels span it"""
    return EssParams(
        v_oc=12.0,
        r_internal=0.006,
        eta_c=0.95,
        eta_d=0.95,
        gamma_step=0.0,
        beta=1.0 / 60.0,
        i_max=80.0,
        i_min_mag=80.0,
        z_max=16.0,
        dt=1.0 / 60.0,
    )


# ============================================================================
# Household fixtures
# ============================================================================

@pytest.fixture
def kettle_model() -> HouseholdModel:
    """Kettle household over {0, 500, 1000, 1500} W"""
    return HouseholdModel.from_tables(
        prior=[0.95, 0.05],
        transition=[[0.98, 0.34], [0.02, 0.65]],
        emission=[[1.0, 0.0], [0.0, 0.17], [0.0, 0.14], [0.0, 0.17]],
        q=500.0,
        x_max=1700.0,
        hypothesis_names=("OFF", "ON"),
    )


@pytest.fixture
def tiny_model() -> HouseholdModel:
    """Two hypotheses seen through noisy {0, 500} W readings"""
    return HouseholdModel(
        prior=[0.5, 0.5],
        transition=[[0.9, 0.3], [0.1, 0.7]],
        emission=[[0.8, 0.2], [0.2, 0.8]],
        q=500.0,
        x_max=500.0,
    )


@pytest.fixture
def costs() -> CostMatrix:
    return CostMatrix.zero_one(2)


@pytest.fixture
def pulse_trace() -> Trace:
    """One kettle use of three slots inside an otherwise idle day"""
    labels = np.array([0, 0, 1, 1, 1, 0, 0, 0])
    watts = np.array([0, 0, 1500, 1500, 1500, 0, 0, 0], dtype=float)
    return Trace(slots=np.arange(8), x_watts=watts, h_labels=labels)


# ============================================================================
# Synthesis fixtures
# ============================================================================

@pytest.fixture
def tiny_space(tiny_model, tiny_params) -> StateSpace:
    """|X| = 2, |Y| = 3, |Z| = 3 and a three-point belief lattice"""
    return StateSpace(tiny_model, tiny_params, e=8.0, belief_resolution=3, d_min=-500.0, d_max=0.0)


@pytest.fixture
def kettle_space(kettle_model, desk_params) -> StateSpace:
    """Kettle household on the desk battery with 100 Wh energy steps"""
    return StateSpace(kettle_model, desk_params, e=100.0, belief_resolution=3, d_min=-1000.0, d_max=1000.0)


@pytest.fixture
def exact_optimizer() -> OptimizerConfig:
    """Deterministic kernels only"""
    return OptimizerConfig(stochastic_search=False)


# ============================================================================
# Configuration fixtures
# ============================================================================

@pytest.fixture
def small_config_dict(tmp_path) -> Dict[str, Any]:
    """Fast end-to-end configuration writing into tmp_path"""
    return {
        'household': {'source': 'tables', 'training_days': 60},
        'grids': {
            'q': 500.0,
            'x_max': 1700.0,
            'e': 100.0,
            'belief_resolution': 3,
            'horizon': 12,
            'slot_seconds': 60.0,
            'd_min': -500.0,
            'd_max': 500.0,
        },
        'soc_fractions': [0.5],
        'seeds': {'synthesis': 0, 'data': 3, 'controller': 0},
        'optimizer': {'starts': 1, 'iterations': 5},
        'validation': {'days': 3},
        'output': {'formats': ['yaml', 'markdown'], 'directory': str(tmp_path / "results")},
        'logging': {'level': 'WARNING', 'console': False},
    }


@pytest.fixture
def config_file(small_config_dict, tmp_path) -> str:
    """Write the small configuration to a file"""
    config_path = tmp_path / "test_config.yaml"
    with open(config_path, 'w') as f:
        yaml.dump(small_config_dict, f)
    return str(config_path)
