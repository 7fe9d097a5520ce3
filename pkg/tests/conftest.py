import numpy as np
import pytest

from tools.data import generate_chain_dataset, split
from tools.env import exact_q, make_chain_mdp, single_action_policy


@pytest.fixture
def chain():
    return make_chain_mdp(n_states=20, p_advance=0.5, discount=0.9)


@pytest.fixture
def chain_policy(chain):
    return single_action_policy(chain)


@pytest.fixture
def chain_q(chain, chain_policy):
    return exact_q(chain, chain_policy)


@pytest.fixture
def chain_data(chain):
    return generate_chain_dataset(chain, 2000, seed=3)


@pytest.fixture
def chain_split(chain_data):
    return split(chain_data, 0.9, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
