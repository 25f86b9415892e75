import importlib.resources

import numpy as np
import pytest

from etform.cli import parse_config
from etform.critic import CostWeights
from etform.dos import DoSSchedule
from etform.dynamics import SystemMatrices
from etform.sim import run
from etform.topology import Topology


def bundled_config_path(name: str):
    return importlib.resources.files("etform.data") / name


# the five-follower benchmark graph: edges 1-3, 1-5, 2-4, 2-5, 3-4 (1-based),
# leader pinned to followers 1 and 2
BENCH_EDGES = [(0, 2), (0, 4), (1, 3), (1, 4), (2, 3)]


def bench_topology() -> Topology:
    adj = np.zeros((5, 5))
    for i, j in BENCH_EDGES:
        adj[i, j] = adj[j, i] = 1.0
    return Topology(adj, np.array([1.0, 1.0, 0.0, 0.0, 0.0]))


BENCH_X_INIT = np.array(
    [[0.6, 3.0], [-0.2, 4.0], [-1.5, 5.0], [-1.5, 0.8], [-0.2, 1.5]]
)


@pytest.fixture(scope="session")
def bench_top():
    return bench_topology()


@pytest.fixture(scope="session")
def bench_system():
    return SystemMatrices(np.eye(2), 0.9 * np.eye(2))


@pytest.fixture(scope="session")
def bench_costs():
    return CostWeights(0.4 * np.eye(2), 0.1 * np.eye(2), 0.01 * np.eye(2))


@pytest.fixture(scope="session")
def bench_schedule():
    return DoSSchedule.from_windows([[0.1, 2.0], [4.0, 6.0], [8.0, 9.0]])


@pytest.fixture(scope="session")
def paper_experiment():
    return parse_config(bundled_config_path("paper.cfg"))


@pytest.fixture(scope="session")
def regulation_experiment():
    return parse_config(bundled_config_path("regulation.cfg"))


@pytest.fixture(scope="session")
def regulation_log(regulation_experiment):
    return run(regulation_experiment.sim)
