import numpy as np
import pytest

from wiener_minimax.csnr import RunningCostFn, solve
from wiener_minimax.model import builtin_bessel, constant_model


@pytest.fixture(scope="session")
def const_model():
    return constant_model(0.0, 1.0, 1.0, cost_rate=1.0)


@pytest.fixture(scope="session")
def bessel_model():
    return builtin_bessel(3.0, 4.0)


@pytest.fixture(scope="session")
def csnr_unit():
    """Closed-form solution for rho0 = 1 and unit running cost."""
    return solve(1.0, RunningCostFn.constant(1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
