import math

import pytest
from hypothesis import HealthCheck, settings

from dissipative_smp.controls import LinearFeedback
from dissipative_smp.models import builtin_model, riccati_gain
from dissipative_smp.runtime import tune_allocator
from dissipative_smp.sde import TimeGrid

tune_allocator()

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# Riccati root for a = -1, r = 0.5, computed by hand: P^2 + 2.5 P - 1 = 0.
P_STAR = (-2.5 + math.sqrt(2.5**2 + 4.0)) / 2.0


@pytest.fixture(scope="session")
def lq_model():
    return builtin_model("lq_scalar", {"a": -1.0, "sigma0": 0.5})


@pytest.fixture(scope="session")
def lq_variant():
    return builtin_model("lq_scalar", {"a": -1.0, "sigma0": 0.5, "sigma_u": 0.5})


@pytest.fixture(scope="session")
def small_grid():
    return TimeGrid(4.0, 0.01, 0.5, tail_tolerance=0.2)


@pytest.fixture(scope="session")
def optimal_feedback():
    return LinearFeedback([[-riccati_gain(-1.0, 0.5)]])
