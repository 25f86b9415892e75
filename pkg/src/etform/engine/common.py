"""Packed array form of a simulation problem, shared by both engines.

The closed-loop stepping kernel exists twice: a pure-python reference
(py_engine) and a compiled Cython version (_speedup). Both consume the same
StepProblem, a flat bundle of float64/int64 arrays with every derived constant
precomputed, and must implement identical step semantics:

  per grid instant k (t = k*dt):
    1. formation errors from current states;
    2. attacked step: applied controls are exactly zero, holds untouched,
       no triggers, no learning; the control snapshot is zeroed (that is what
       was actually applied, and what re-entry updates must see);
    3. free step: per agent, measurement error delta against the held error,
       trigger when forced (k == 0, or first free step after an attack with
       retrigger on) or when |delta|^2 >= threshold with |delta| > 0; a
       triggered agent first descends its Bellman residual (reading all
       controls from the previous step's snapshot, so agent order is
       irrelevant), then refreshes its held error and held control;
    4. log the instant, then advance one RK4 step with controls held constant;
    5. trapezoidal accumulation of the per-agent cost rate.

  Divergence (non-finite state) truncates the log at the last valid instant.

Basis kinds and drift nonlinearities are encoded as small integer tags plus
parameter vectors so the compiled kernel never calls back into Python; custom
callables force the python engine.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

BASIS_QUADRATIC = 0
BASIS_TANH = 1

FOLLOWER_ZERO = 0
FOLLOWER_SCALED_SIN = 1
FOLLOWER_CUSTOM = -1

LEADER_ZERO = 0
LEADER_PLANAR_DRIFT = 1
LEADER_CUSTOM = -1


@dataclass
class StepProblem:
    # sizes and grid
    n: int                 # followers
    d: int                 # state dimension
    m: int                 # input dimension
    k: int                 # basis size
    n_steps: int
    dt: float
    # linear system
    a_sys: np.ndarray      # (d, d)
    b_in: np.ndarray       # (d, m)
    # graph in CSR form over neighbor sets
    indptr: np.ndarray     # (n+1,) int64
    indices: np.ndarray    # (nnz,) int64
    nbr_weights: np.ndarray  # (nnz,) adjacency weights a_ij
    pinning: np.ndarray    # (n,)
    kappa: np.ndarray      # (n,) degree + pinning
    gain: np.ndarray       # (n, m, d): -(kappa/2) R^-1 B^T
    offsets: np.ndarray    # (n, d)
    c_vec: np.ndarray      # (n, d): A (sum_j a_ij (iota_i - iota_j) + b_i iota_i)
    # cost
    q: np.ndarray          # (d, d)
    r_self: np.ndarray     # (m, m)
    r_neighbor: np.ndarray # (m, m)
    lam_min_r_self: float
    lam_max_r_self: float
    lam_min_r_neighbor: float
    # basis
    basis_kind: int
    hidden: np.ndarray     # (k, d); zeros for the quadratic kind
    # drift nonlinearities
    follower_kind: int
    follower_params: np.ndarray  # (2,) amplitude, frequency
    leader_kind: int
    leader_params: np.ndarray    # (4,) drift, cos_amp, sin_amp, sin_freq
    follower_map: Callable | None
    leader_map: Callable | None
    # trigger and learning
    trig_m: float
    check_stride: int
    alpha: float
    normalize: bool
    retrigger: bool
    # attack schedule, snapped to the grid
    dos_flags: np.ndarray  # (n_steps+1,) uint8
    # initial conditions
    x0_init: np.ndarray    # (d,)
    x_init: np.ndarray     # (n, d)
    w_init: np.ndarray     # (n, k)

    def kernel_compatible(self) -> bool:
        """Compiled kernel handles the tagged parametric forms only."""
        return (
            self.follower_kind != FOLLOWER_CUSTOM
            and self.leader_kind != LEADER_CUSTOM
            and self.basis_kind in (BASIS_QUADRATIC, BASIS_TANH)
        )


@dataclass
class StepResult:
    times: np.ndarray          # (rows,)
    leader: np.ndarray         # (rows, d)
    followers: np.ndarray      # (rows, n, d)
    errors: np.ndarray         # (rows, n, d)
    controls: np.ndarray       # (rows, n, m)
    delta_norms: np.ndarray    # (rows, n)
    weights: np.ndarray        # (rows, n, k)
    cost_rates: np.ndarray     # (rows, n)
    cum_costs: np.ndarray      # (rows, n)
    dos_active: np.ndarray     # (rows,) bool
    trigger_steps: np.ndarray  # (events,) int64
    trigger_agents: np.ndarray # (events,) int64
    diverged: bool
    divergence_step: int | None


def snap_dos_flags(windows: list[tuple[float, float]], dt: float, n_steps: int) -> np.ndarray:
    """Attack windows -> per-instant flags, boundaries snapped to the nearest step."""
    flags = np.zeros(n_steps + 1, dtype=np.uint8)
    for start, end in windows:
        i0 = int(round(start / dt))
        i1 = int(round(end / dt))
        i0 = max(i0, 0)
        i1 = min(i1, n_steps + 1)
        if i1 > i0:
            flags[i0:i1] = 1
    return flags


def follower_drift(problem: StepProblem, x: np.ndarray) -> np.ndarray:
    """Follower nonlinearity evaluated rowwise on (n, d) states."""
    if problem.follower_kind == FOLLOWER_ZERO:
        return np.zeros_like(x)
    if problem.follower_kind == FOLLOWER_SCALED_SIN:
        amp, freq = problem.follower_params
        return amp * np.sin(freq * x)
    return np.apply_along_axis(problem.follower_map, -1, x)


def leader_drift(problem: StepProblem, x0: np.ndarray) -> np.ndarray:
    if problem.leader_kind == LEADER_ZERO:
        return np.zeros_like(x0)
    if problem.leader_kind == LEADER_PLANAR_DRIFT:
        drift, cos_amp, sin_amp, sin_freq = problem.leader_params
        return np.array(
            [drift, cos_amp * np.cos(x0[0]) + sin_amp * np.sin(sin_freq * x0[0])]
        )
    return problem.leader_map(x0)


def features_of(problem: StepProblem, e: np.ndarray) -> np.ndarray:
    """Quadratic basis ordering: squares, cross monomials (i<j), linears."""
    if problem.basis_kind == BASIS_QUADRATIC:
        d = problem.d
        out = np.empty(problem.k)
        out[:d] = e * e
        idx = d
        for i in range(d):
            for j in range(i + 1, d):
                out[idx] = e[i] * e[j]
                idx += 1
        out[idx:] = e
        return out
    return np.tanh(problem.hidden @ e)


def jacobian_of(problem: StepProblem, e: np.ndarray) -> np.ndarray:
    if problem.basis_kind == BASIS_QUADRATIC:
        d = problem.d
        jac = np.zeros((problem.k, d))
        for i in range(d):
            jac[i, i] = 2.0 * e[i]
        idx = d
        for i in range(d):
            for j in range(i + 1, d):
                jac[idx, i] = e[j]
                jac[idx, j] = e[i]
                idx += 1
        jac[idx:, :] = np.eye(d)
        return jac
    th = np.tanh(problem.hidden @ e)
    return (1.0 - th * th)[:, None] * problem.hidden
