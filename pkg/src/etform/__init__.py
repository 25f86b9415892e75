"""etform: event-triggered optimal formation control under DoS attacks.

A deterministic simulator and solver library for leader-follower multi-agent
formation control with:

- graph-coupled formation errors over an undirected follower graph with
  leader pinning (``topology``, ``dynamics``);
- a per-agent critic that learns the value function online from the Bellman
  residual, updating only at event-trigger instants (``critic``);
- a denial-of-service attack schedule that severs all communication during
  attack windows, plus the frequency / length-rate admissibility bounds
  (``dos``);
- offline policy iteration over the same feature basis with an independent
  algebraic-Riccati cross-check (``policy_iteration``);
- a fixed-step RK4 closed-loop simulator with a compiled stepping kernel and
  a pure-python fallback (``sim``, ``engine``);
- an experiment runner reading TOML configs and writing CSV logs (``cli``).
"""

from .critic import Basis, CostWeights, CriticState, TriggerParams
from .dos import DoSSchedule, StabilityConstants
from .dynamics import MasState, Nonlinearity, SystemMatrices
from .sim import SimConfig, TrajectoryLog
from .topology import FormationSpec, Topology

__version__ = "0.1.0"

__all__ = [
    "Basis",
    "CostWeights",
    "CriticState",
    "TriggerParams",
    "DoSSchedule",
    "StabilityConstants",
    "MasState",
    "Nonlinearity",
    "SystemMatrices",
    "SimConfig",
    "TrajectoryLog",
    "FormationSpec",
    "Topology",
    "__version__",
]
