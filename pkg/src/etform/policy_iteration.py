"""Offline policy iteration for the coupled error-regulation game.

Alternates policy evaluation and policy improvement over a finite feature
basis. Evaluation is least-squares collocation: for each agent, the Bellman
identity  weights . regressor + cost_rate = 0  is imposed at randomly drawn
joint error samples and solved in the least-squares sense. Improvement reads
the minimizing control off the evaluated value gradient.

The solver targets the homogeneous game over the error coordinates: drift
nonlinearity mismatch and formation-offset forcing are dropped, because with
persistent forcing the undiscounted infinite-horizon cost is unbounded and no
stationary value exists. The online critic handles those terms adaptively; the
offline solution is the regulation core (and on a linear single-agent
reduction it must match the algebraic Riccati solution, which is the
verification oracle shipped alongside).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from .critic import Basis, CostWeights
from .dynamics import SystemMatrices
from .topology import Topology

__all__ = [
    "PiConfig",
    "PiResult",
    "RankDeficientError",
    "policy_evaluation",
    "policy_improvement",
    "run_pi",
    "riccati_oracle",
]

Policy = Callable[[np.ndarray], np.ndarray]


class RankDeficientError(RuntimeError):
    """Collocation matrix is numerically rank deficient (insufficient
    excitation in the sample set)."""

    def __init__(self, agent: int, condition_number: float):
        self.agent = agent
        self.condition_number = condition_number
        super().__init__(
            f"agent {agent}: collocation matrix rank deficient "
            f"(condition number {condition_number:.3e}); "
            "draw more or more diverse sample points"
        )


@dataclass(frozen=True)
class PiConfig:
    n_collocation_points: int = 256
    sampling_box: tuple[tuple[float, float], ...] = ((-5.0, 5.0), (-5.0, 5.0))
    max_iterations: int = 50
    tolerance: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.tolerance <= 0.0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class PiResult:
    weights: np.ndarray            # (n_agents, basis.size)
    iterations: int
    converged: bool
    residual_norms: np.ndarray     # (n_agents,) final LS residual 2-norms
    condition_numbers: np.ndarray  # (n_agents,) final collocation conditioning
    weight_change_trace: list[float] = field(default_factory=list)


def draw_samples(n_agents: int, config: PiConfig) -> np.ndarray:
    """Joint collocation samples, shape (n_points, n_agents, dim)."""
    rng = np.random.default_rng(config.seed)
    box = np.asarray(config.sampling_box, dtype=float)
    lo, hi = box[:, 0], box[:, 1]
    return rng.uniform(
        lo, hi, size=(config.n_collocation_points, n_agents, box.shape[0])
    )


def _game_error_deriv(
    e_i: np.ndarray,
    u_i: np.ndarray,
    neighbor_controls: list[np.ndarray],
    neighbor_weights: list[float],
    kappa_i: float,
    system: SystemMatrices,
) -> np.ndarray:
    """Error flow of the homogeneous game: A e + kappa B u - B sum a_ij u_j."""
    out = system.a_sys @ e_i + kappa_i * (system.b_in @ u_i)
    for a_ij, u_j in zip(neighbor_weights, neighbor_controls):
        out = out - a_ij * (system.b_in @ u_j)
    return out


def policy_evaluation(
    policies: Sequence[Policy],
    basis: Basis,
    system: SystemMatrices,
    topology: Topology,
    cost_weights: CostWeights,
    config: PiConfig,
    samples: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fit each agent's value weights to the current joint policies.

    Returns (weights (n, size), residual_norms (n,), condition_numbers (n,)).
    Raises RankDeficientError when a collocation matrix has no usable rank.
    All agents are evaluated against the same (previous-iterate) policies, so
    the result is independent of agent ordering.
    """
    n = topology.n_followers
    if samples is None:
        samples = draw_samples(n, config)
    n_pts = samples.shape[0]
    if n_pts < basis.size:
        raise ValueError(
            f"need at least {basis.size} collocation points, got {n_pts}"
        )

    weights = np.zeros((n, basis.size))
    residual_norms = np.zeros(n)
    cond = np.zeros(n)
    adj = topology.adjacency
    for i in range(n):
        nbr = np.flatnonzero(adj[i] > 0.0)
        kappa_i = float(adj[i].sum() + topology.pinning[i])
        phi_rows = np.empty((n_pts, basis.size))
        rho = np.empty(n_pts)
        for s in range(n_pts):
            e_i = samples[s, i]
            u_i = policies[i](e_i)
            nbr_controls = [policies[j](samples[s, j]) for j in nbr]
            nbr_weights = [float(adj[i, j]) for j in nbr]
            edot = _game_error_deriv(e_i, u_i, nbr_controls, nbr_weights, kappa_i, system)
            phi_rows[s] = basis.jacobian(e_i) @ edot
            rho[s] = (
                float(e_i @ cost_weights.q @ e_i)
                + float(u_i @ cost_weights.r_self @ u_i)
                + sum(float(u_j @ cost_weights.r_neighbor @ u_j) for u_j in nbr_controls)
            )
        svals = np.linalg.svd(phi_rows, compute_uv=False)
        cond[i] = float(svals[0] / svals[-1]) if svals[-1] > 0.0 else np.inf
        if svals[-1] <= 1e-10 * svals[0]:
            raise RankDeficientError(i, cond[i])
        sol, _res, _rank, _sv = np.linalg.lstsq(phi_rows, -rho, rcond=None)
        weights[i] = sol
        residual_norms[i] = float(np.linalg.norm(phi_rows @ sol + rho))
    return weights, residual_norms, cond


def policy_improvement(
    weights: np.ndarray,
    basis: Basis,
    topology: Topology,
    b_in: np.ndarray,
    r_self: np.ndarray,
) -> list[Policy]:
    """Greedy policies u_i(e) = -(kappa_i/2) R^-1 B^T dV_i/de for the given weights."""
    r_inv_bt = np.linalg.solve(r_self, b_in.T)
    policies: list[Policy] = []
    for i in range(topology.n_followers):
        kappa_i = float(topology.adjacency[i].sum() + topology.pinning[i])
        w_i = np.array(weights[i], dtype=float)

        def policy(e, _w=w_i, _k=kappa_i):
            return -0.5 * _k * (r_inv_bt @ (basis.jacobian(e).T @ _w))

        policies.append(policy)
    return policies


def _stabilizing_linear_gain(system: SystemMatrices, kappa: float) -> float:
    """Scalar k > 0 such that A - kappa k B is Hurwitz (initial admissible policy)."""
    b_eff = kappa * system.b_in
    abscissa = float(np.max(np.linalg.eigvals(system.a_sys).real))
    smin = float(np.linalg.svd(b_eff, compute_uv=False)[-1])
    if smin <= 0.0:
        raise ValueError("input matrix is rank deficient; no scalar gain stabilizes")
    k = max(0.1, 2.0 * (abscissa + 0.5) / smin)
    for _ in range(60):
        cl = system.a_sys - b_eff * k
        if float(np.max(np.linalg.eigvals(cl).real)) < 0.0:
            return k
        k *= 2.0
    raise ValueError("failed to find a stabilizing scalar feedback gain")


def default_initial_policies(
    system: SystemMatrices, topology: Topology
) -> list[Policy]:
    """Admissible starting point: u = -k e with k stabilizing each agent's loop."""
    policies: list[Policy] = []
    for i in range(topology.n_followers):
        kappa = float(topology.adjacency[i].sum() + topology.pinning[i])
        k = _stabilizing_linear_gain(system, kappa)

        def policy(e, _k=k):
            e = np.asarray(e, dtype=float)
            return -_k * e

        policies.append(policy)
    return policies


def run_pi(
    basis: Basis,
    system: SystemMatrices,
    topology: Topology,
    cost_weights: CostWeights,
    config: PiConfig,
    initial_policies: Sequence[Policy] | None = None,
    samples: np.ndarray | None = None,
) -> PiResult:
    """Iterate evaluation / improvement until the weights stop moving.

    Jacobi-style coupling: every agent is evaluated against all agents'
    previous-iterate policies, then all policies are improved at once.
    Convergence is declared when the largest per-agent weight change drops
    below config.tolerance.
    """
    n = topology.n_followers
    if samples is None:
        samples = draw_samples(n, config)
    policies = (
        list(initial_policies)
        if initial_policies is not None
        else default_initial_policies(system, topology)
    )
    weights_prev = np.zeros((n, basis.size))
    trace: list[float] = []
    residual_norms = np.zeros(n)
    cond = np.zeros(n)
    for it in range(1, config.max_iterations + 1):
        weights, residual_norms, cond = policy_evaluation(
            policies, basis, system, topology, cost_weights, config, samples=samples
        )
        change = float(np.max(np.linalg.norm(weights - weights_prev, axis=1)))
        trace.append(change)
        policies = policy_improvement(weights, basis, topology, system.b_in, cost_weights.r_self)
        weights_prev = weights
        if change < config.tolerance:
            return PiResult(
                weights=weights,
                iterations=it,
                converged=True,
                residual_norms=residual_norms,
                condition_numbers=cond,
                weight_change_trace=trace,
            )
    return PiResult(
        weights=weights_prev,
        iterations=config.max_iterations,
        converged=False,
        residual_norms=residual_norms,
        condition_numbers=cond,
        weight_change_trace=trace,
    )


def riccati_oracle(
    a_sys: np.ndarray,
    b_eff: np.ndarray,
    q: np.ndarray,
    r: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 60,
) -> np.ndarray:
    """Solve A'P + PA - P B R^-1 B' P + Q = 0 by Newton iterations on Lyapunov
    equations (Kleinman), starting from a stabilizing gain built via the
    shifted-Gramian construction. Independent of the collocation solver; used
    to cross-check it on linear-quadratic reductions.

    Raises ValueError when no stabilizing solution can be constructed.
    """
    a = np.atleast_2d(np.asarray(a_sys, dtype=float))
    b = np.atleast_2d(np.asarray(b_eff, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    d = a.shape[0]
    r_inv = np.linalg.inv(r)

    abscissa = float(np.max(np.linalg.eigvals(a).real))
    if abscissa < 0.0:
        k = np.zeros((b.shape[1], d))
    else:
        # Shifted Gramian: W solves (A + beta I) W + W (A + beta I)' = 2 B R^-1 B',
        # and K = R^-1 B' W^-1 stabilizes A when (A, B) is controllable.
        beta = abscissa + 1.0
        shifted = a + beta * np.eye(d)
        w = solve_continuous_lyapunov(shifted, 2.0 * b @ r_inv @ b.T)
        if np.linalg.cond(w) > 1e12:
            raise ValueError("no stabilizing solution found (system not stabilizable)")
        k = r_inv @ b.T @ np.linalg.inv(w)
        if float(np.max(np.linalg.eigvals(a - b @ k).real)) >= 0.0:
            raise ValueError("no stabilizing solution found (seed gain failed)")

    p = np.zeros((d, d))
    for _ in range(max_iter):
        a_cl = a - b @ k
        p = solve_continuous_lyapunov(a_cl.T, -(q + k.T @ r @ k))
        p = 0.5 * (p + p.T)
        k = r_inv @ b.T @ p
        residual = a.T @ p + p @ a - p @ b @ r_inv @ b.T @ p + q
        if float(np.linalg.norm(residual, "fro")) < tol:
            return p
    residual_norm = float(np.linalg.norm(residual, "fro"))
    if residual_norm < 1e-10:
        return p
    raise ValueError(
        f"Riccati iteration did not reach residual 1e-10 (got {residual_norm:.3e})"
    )
