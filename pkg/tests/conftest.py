import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from torsamp.energy import AnalyticOracle, Reward
from torsamp.fixtures import toy1_potential, toy2_potential
from torsamp.gfn import Condition

from helpers import make_chain

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy1_condition():
    graph, local = make_chain(4, "toy1")
    oracle = AnalyticOracle(toy1_potential(), graph)
    reward = Reward(oracle=oracle, graph=graph, local=local, kT=1.0)
    return Condition(graph=graph, local=local, reward=reward, condition_id="toy1")


@pytest.fixture(scope="session")
def toy2_condition():
    graph, local = make_chain(5, "toy2")
    oracle = AnalyticOracle(toy2_potential(), graph)
    reward = Reward(oracle=oracle, graph=graph, local=local, kT=1.0)
    return Condition(graph=graph, local=local, reward=reward, condition_id="toy2")


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
