import numpy as np
import pytest

from almdp.envs import random_mdp
from almdp.mdp_core import TabularMDP


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def one_state_mdp():
    """1 state, 1 action, r=1, gamma=0.5; V*=2, x*=2 analytically."""
    return TabularMDP(
        transition=np.ones((1, 1, 1)), reward=np.ones((1, 1)), rho0=np.ones(1), gamma=0.5
    )


@pytest.fixture
def mdp4(rng):
    return random_mdp(4, 3, 0.9, rng)
