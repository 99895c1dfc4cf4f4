"""Shared parameter sets and fixtures."""
from pathlib import Path

import pytest

from herdlab.model import ModelParams

DATA_DIR = Path(__file__).parent / "data"

# alpha above every mode threshold: bifurcations accumulate at delta_d from below
CASE1 = ModelParams(delta=-25.0, kappa=1.0, alpha=0.2, length=20.0, rho=0.05, u1_mean=0.594)
# alpha below every mode threshold: bifurcations accumulate at delta_d from above
CASE2 = ModelParams(delta=60.0, kappa=1.0, alpha=0.001, length=50.0, rho=0.05, u1_mean=0.211325)


@pytest.fixture
def case1() -> ModelParams:
    return CASE1


@pytest.fixture
def case2() -> ModelParams:
    return CASE2


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR
