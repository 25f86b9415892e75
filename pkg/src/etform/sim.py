"""Fixed-step closed-loop simulator of the attacked, event-triggered system.

Per step the simulator gates controls on the attack schedule, evaluates each
agent's trigger, applies event-gated critic updates, integrates leader and
followers with classical RK4 under zero-order-hold controls, and logs every
quantity of interest. Identical configs produce bit-identical logs on the same
backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import engine
from .critic import Basis, CostWeights, TriggerParams
from .dos import DoSSchedule
from .dynamics import Nonlinearity, SystemMatrices
from .engine.common import (
    BASIS_QUADRATIC,
    BASIS_TANH,
    FOLLOWER_CUSTOM,
    FOLLOWER_SCALED_SIN,
    FOLLOWER_ZERO,
    LEADER_CUSTOM,
    LEADER_PLANAR_DRIFT,
    LEADER_ZERO,
    StepProblem,
    snap_dos_flags,
)
from .topology import FormationSpec, Topology

__all__ = ["SimConfig", "TrajectoryLog", "InterEventStats", "rk4_step", "run",
           "cumulative_cost", "inter_event_stats"]


@dataclass
class SimConfig:
    """Complete experiment definition for one closed-loop run."""

    topology: Topology
    formation: FormationSpec
    system: SystemMatrices
    nonlinearity: Nonlinearity
    cost_weights: CostWeights
    trigger: TriggerParams
    basis: Basis
    initial_weights: np.ndarray       # (k,) shared or (n, k) per agent
    learning_rate: float = 0.1
    dos_schedule: DoSSchedule = field(default_factory=DoSSchedule.empty)
    x0_init: np.ndarray | None = None  # leader initial state, default zeros
    x_init: np.ndarray | None = None   # follower initial states, default zeros
    dt: float = 1e-3
    t_final: float = 10.0
    seed: int = 0
    retrigger_after_attack: bool = True
    normalize_updates: bool = True
    backend: str = "auto"

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.t_final < self.dt:
            raise ValueError(f"t_final must be at least dt, got {self.t_final}")
        if not 0.0 < self.learning_rate < 1.0:
            raise ValueError(f"learning rate must lie in (0, 1), got {self.learning_rate}")
        if self.trigger.check_period > 0.0 and self.trigger.check_period < self.dt:
            raise ValueError("trigger check_period must be at least the step size dt")
        w = np.asarray(self.initial_weights, dtype=float)
        n = self.topology.n_followers
        if w.shape not in ((self.basis.size,), (n, self.basis.size)):
            raise ValueError(
                f"initial_weights must have shape ({self.basis.size},) or "
                f"({n}, {self.basis.size}), got {w.shape}"
            )

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))


@dataclass
class TrajectoryLog:
    """Time-indexed record of one run. All series share the time grid; trigger
    events are a subset of the grid points."""

    times: np.ndarray           # (rows,)
    leader: np.ndarray          # (rows, d)
    followers: np.ndarray       # (rows, n, d)
    errors: np.ndarray          # (rows, n, d)
    controls: np.ndarray        # (rows, n, m) applied controls
    delta_norms: np.ndarray     # (rows, n)
    weights: np.ndarray         # (rows, n, k)
    cost_rates: np.ndarray      # (rows, n)
    cum_costs: np.ndarray       # (rows, n)
    dos_active: np.ndarray      # (rows,) bool
    trigger_steps: np.ndarray   # (events,) grid index of each event
    trigger_agents: np.ndarray  # (events,) agent index of each event
    dt: float
    diverged: bool = False
    divergence_step: int | None = None
    backend: str = "python"

    @property
    def n_agents(self) -> int:
        return self.errors.shape[1]

    def trigger_times(self, i: int) -> np.ndarray:
        return self.trigger_steps[self.trigger_agents == i] * self.dt


@dataclass
class InterEventStats:
    counts: np.ndarray          # (n,) events per agent
    min_intervals: np.ndarray   # (n,) smallest gap between events; nan if < 2 events
    trigger_fraction: np.ndarray  # (n,) events / attack-free instants
    attack_free_instants: int


def rk4_step(
    deriv: Callable[[float, np.ndarray], np.ndarray],
    state: np.ndarray,
    t: float,
    dt: float,
) -> np.ndarray:
    """One classical 4th-order Runge-Kutta step of xdot = deriv(t, x).

    Controls (and anything else inside deriv) are held constant over the step
    by construction of the closed-loop caller; aborts on non-finite values.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    state = np.asarray(state, dtype=float)
    k1 = np.asarray(deriv(t, state), dtype=float)
    k2 = np.asarray(deriv(t + 0.5 * dt, state + 0.5 * dt * k1), dtype=float)
    k3 = np.asarray(deriv(t + 0.5 * dt, state + 0.5 * dt * k2), dtype=float)
    k4 = np.asarray(deriv(t + dt, state + dt * k3), dtype=float)
    out = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite state after RK4 step at t={t}")
    return out


def _follower_form_tags(nl: Nonlinearity) -> tuple[int, np.ndarray]:
    if nl.follower_form is None:
        return FOLLOWER_CUSTOM, np.zeros(2)
    kind = nl.follower_form[0]
    if kind == "zero":
        return FOLLOWER_ZERO, np.zeros(2)
    if kind == "scaled_sin":
        return FOLLOWER_SCALED_SIN, np.array(nl.follower_form[1:3], dtype=float)
    return FOLLOWER_CUSTOM, np.zeros(2)


def _leader_form_tags(nl: Nonlinearity) -> tuple[int, np.ndarray]:
    if nl.leader_form is None:
        return LEADER_CUSTOM, np.zeros(4)
    kind = nl.leader_form[0]
    if kind == "zero":
        return LEADER_ZERO, np.zeros(4)
    if kind == "planar_drift":
        return LEADER_PLANAR_DRIFT, np.array(nl.leader_form[1:5], dtype=float)
    return LEADER_CUSTOM, np.zeros(4)


def pack_problem(config: SimConfig) -> StepProblem:
    """Flatten a SimConfig into the array bundle both engines consume."""
    top = config.topology
    n = top.n_followers
    d = config.system.state_dim
    m = config.system.input_dim
    basis = config.basis
    if basis.input_dim != d:
        raise ValueError(f"basis input_dim {basis.input_dim} != state dim {d}")

    adj = top.adjacency
    indptr = np.zeros(n + 1, dtype=np.int64)
    indices: list[int] = []
    nbr_weights: list[float] = []
    for i in range(n):
        nbr = np.flatnonzero(adj[i] > 0.0)
        indices.extend(int(j) for j in nbr)
        nbr_weights.extend(float(adj[i, j]) for j in nbr)
        indptr[i + 1] = len(indices)

    kappa = adj.sum(axis=1) + top.pinning
    r_inv_bt = np.linalg.solve(config.cost_weights.r_self, config.system.b_in.T)
    gain = np.stack([-0.5 * float(kappa[i]) * r_inv_bt for i in range(n)])

    iota = config.formation.offsets
    c_vec = np.zeros((n, d))
    for i in range(n):
        acc = top.pinning[i] * iota[i]
        for j in np.flatnonzero(adj[i] > 0.0):
            acc = acc + adj[i, j] * (iota[i] - iota[j])
        c_vec[i] = config.system.a_sys @ acc

    w_init = np.asarray(config.initial_weights, dtype=float)
    if w_init.ndim == 1:
        w_init = np.tile(w_init, (n, 1))
    if w_init.shape != (n, basis.size):
        raise ValueError(
            f"initial weights must have shape ({n}, {basis.size}) or ({basis.size},)"
        )

    follower_kind, follower_params = _follower_form_tags(config.nonlinearity)
    leader_kind, leader_params = _leader_form_tags(config.nonlinearity)
    if leader_kind == LEADER_PLANAR_DRIFT and d != 2:
        raise ValueError("the planar_drift leader form requires a 2-dimensional state")

    n_steps = config.n_steps
    check_stride = 1
    if config.trigger.check_period > 0.0:
        check_stride = max(1, int(round(config.trigger.check_period / config.dt)))

    x0_init = (
        np.zeros(d) if config.x0_init is None else np.asarray(config.x0_init, dtype=float)
    )
    x_init = (
        np.zeros((n, d)) if config.x_init is None else np.asarray(config.x_init, dtype=float)
    )
    if x0_init.shape != (d,) or x_init.shape != (n, d):
        raise ValueError("initial states inconsistent with topology/state dimension")

    return StepProblem(
        n=n,
        d=d,
        m=m,
        k=basis.size,
        n_steps=n_steps,
        dt=config.dt,
        a_sys=np.array(config.system.a_sys, dtype=float),
        b_in=np.array(config.system.b_in, dtype=float),
        indptr=indptr,
        indices=np.array(indices, dtype=np.int64),
        nbr_weights=np.array(nbr_weights, dtype=float),
        pinning=np.array(top.pinning, dtype=float),
        kappa=np.asarray(kappa, dtype=float),
        gain=gain,
        offsets=np.array(iota, dtype=float),
        c_vec=c_vec,
        q=np.array(config.cost_weights.q, dtype=float),
        r_self=np.array(config.cost_weights.r_self, dtype=float),
        r_neighbor=np.array(config.cost_weights.r_neighbor, dtype=float),
        lam_min_r_self=config.cost_weights.lam_min_r_self,
        lam_max_r_self=config.cost_weights.lam_max_r_self,
        lam_min_r_neighbor=config.cost_weights.lam_min_r_neighbor,
        basis_kind=BASIS_QUADRATIC if basis.kind == "quadratic" else BASIS_TANH,
        hidden=(
            np.zeros((basis.size, d)) if basis.hidden is None else np.array(basis.hidden)
        ),
        follower_kind=follower_kind,
        follower_params=follower_params,
        leader_kind=leader_kind,
        leader_params=leader_params,
        follower_map=config.nonlinearity.follower,
        leader_map=config.nonlinearity.leader,
        trig_m=config.trigger.lipschitz_m,
        check_stride=check_stride,
        alpha=config.learning_rate,
        normalize=config.normalize_updates,
        retrigger=config.retrigger_after_attack,
        dos_flags=snap_dos_flags(config.dos_schedule.windows(), config.dt, n_steps),
        x0_init=x0_init,
        x_init=x_init,
        w_init=w_init,
    )


def run(config: SimConfig) -> TrajectoryLog:
    """Simulate the closed loop and return the full trajectory log.

    Deterministic: identical config (including seed and backend) gives a
    bit-identical log. On divergence the log is truncated at the last finite
    state and flagged rather than raising.
    """
    problem = pack_problem(config)
    result, backend = engine.run_steps(problem, config.backend)
    return TrajectoryLog(
        times=result.times,
        leader=result.leader,
        followers=result.followers,
        errors=result.errors,
        controls=result.controls,
        delta_norms=result.delta_norms,
        weights=result.weights,
        cost_rates=result.cost_rates,
        cum_costs=result.cum_costs,
        dos_active=result.dos_active,
        trigger_steps=result.trigger_steps,
        trigger_agents=result.trigger_agents,
        dt=config.dt,
        diverged=result.diverged,
        divergence_step=result.divergence_step,
        backend=backend,
    )


def cumulative_cost(log: TrajectoryLog, i: int) -> float:
    """Trapezoidal integral of agent i's logged cost rate over the run."""
    if not 0 <= i < log.n_agents:
        raise IndexError(f"agent index {i} out of range [0, {log.n_agents})")
    return float(np.trapezoid(log.cost_rates[:, i], log.times))


def inter_event_stats(log: TrajectoryLog) -> InterEventStats:
    """Per-agent trigger counts, smallest inter-event gap, and event rate
    relative to the attack-free portion of the grid."""
    n = log.n_agents
    counts = np.zeros(n, dtype=np.int64)
    min_intervals = np.full(n, np.nan)
    free_instants = int((~log.dos_active).sum())
    for i in range(n):
        steps = np.sort(log.trigger_steps[log.trigger_agents == i])
        counts[i] = steps.size
        if steps.size >= 2:
            min_intervals[i] = float(np.min(np.diff(steps))) * log.dt
    fraction = counts / max(free_instants, 1)
    return InterEventStats(
        counts=counts,
        min_intervals=min_intervals,
        trigger_fraction=fraction,
        attack_free_instants=free_instants,
    )
