"""Shared fixtures: one small synthetic experiment reused across the suite."""
import numpy as np
import pytest

from csibts.csi_sim import base_scenario, derive_round, generate_round
from csibts.preprocess import build_store


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_rounds():
    """Rounds 1/2/6 at 200 packets per case; enough frames for unit tests."""
    base = base_scenario(seed=0)
    return {
        1: generate_round(base, 200, 1, "synthetic"),
        2: generate_round(derive_round(base, "none", 2), 200, 2, "synthetic"),
        6: generate_round(derive_round(base, "severe", 6), 200, 6, "synthetic"),
    }


@pytest.fixture(scope="session")
def tiny_store(tiny_rounds):
    return build_store(tiny_rounds[1], tau=50, stride=1, part="all")
