"""Per-agent critic: value approximation, control law, trigger, weight update.

Each agent carries a linear-in-parameters value approximator
V(e) = weights . features(e) over its own formation error. The approximate
optimal control is read off the value gradient at the most recently broadcast
(held) error and is kept constant between trigger events (zero-order hold).
The trainable weights jump only at trigger instants, descending the squared
local Bellman residual; between events they are exactly constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Basis",
    "CriticState",
    "CostWeights",
    "TriggerParams",
    "value_estimate",
    "value_gradient",
    "control_law",
    "cost_rate",
    "regressor",
    "hamiltonian_residual",
    "weight_update",
    "trigger_function",
    "measurement_error",
    "quadratic_form_weights",
]


@dataclass(frozen=True)
class Basis:
    """Feature map for the value approximator.

    kind "quadratic": the squared coordinates, then the cross monomials
    e_i e_j (i < j, row-major), then the linear terms; for a planar error this
    is [e1^2, e2^2, e1 e2, e1, e2]. The quadratic kind represents any
    quadratic value function exactly, which is what makes the Riccati
    cross-check possible. Squares lead the ordering so that the leading
    weights carry the definiteness of the learned value surface.

    kind "tanh": features tanh(H e) with a fixed random hidden matrix H drawn
    once from the given seed; only the output weights are ever trained.
    """

    kind: str
    input_dim: int
    size: int
    hidden: np.ndarray | None = None

    @classmethod
    def quadratic(cls, input_dim: int) -> "Basis":
        size = input_dim * (input_dim + 1) // 2 + input_dim
        return cls(kind="quadratic", input_dim=input_dim, size=size)

    @classmethod
    def tanh_random(cls, input_dim: int, size: int, seed: int = 0) -> "Basis":
        rng = np.random.default_rng(seed)
        hidden = rng.standard_normal((size, input_dim))
        hidden.setflags(write=False)
        return cls(kind="tanh", input_dim=input_dim, size=size, hidden=hidden)

    def features(self, e: np.ndarray) -> np.ndarray:
        e = np.asarray(e, dtype=float)
        if e.shape != (self.input_dim,):
            raise ValueError(f"expected error of shape ({self.input_dim},), got {e.shape}")
        if self.kind == "quadratic":
            d = self.input_dim
            out = np.empty(self.size)
            out[:d] = e * e
            k = d
            for i in range(d):
                for j in range(i + 1, d):
                    out[k] = e[i] * e[j]
                    k += 1
            out[k:] = e
            return out
        return np.tanh(self.hidden @ e)

    def jacobian(self, e: np.ndarray) -> np.ndarray:
        """d features / d e, shape (size, input_dim)."""
        e = np.asarray(e, dtype=float)
        if e.shape != (self.input_dim,):
            raise ValueError(f"expected error of shape ({self.input_dim},), got {e.shape}")
        if self.kind == "quadratic":
            d = self.input_dim
            jac = np.zeros((self.size, d))
            for i in range(d):
                jac[i, i] = 2.0 * e[i]
            k = d
            for i in range(d):
                for j in range(i + 1, d):
                    jac[k, i] = e[j]
                    jac[k, j] = e[i]
                    k += 1
            jac[k:, :] = np.eye(d)
            return jac
        th = np.tanh(self.hidden @ e)
        return (1.0 - th * th)[:, None] * self.hidden


@dataclass
class CriticState:
    """Trainable weights plus the zero-order-hold bookkeeping of one agent."""

    weights: np.ndarray        # (basis.size,)
    learning_rate: float
    t_last: float = 0.0        # most recent trigger instant
    held_error: np.ndarray | None = None
    held_control: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).copy()
        if not 0.0 < self.learning_rate < 1.0:
            raise ValueError(f"learning rate must lie in (0, 1), got {self.learning_rate}")


@dataclass(frozen=True)
class CostWeights:
    """Quadratic running-cost matrices: own error, own control, neighbor control.

    q must be positive definite, r_self positive definite, r_neighbor positive
    semidefinite (shared across all neighbor pairs). Extreme eigenvalues are
    computed once here because they enter the trigger threshold on every check.
    """

    q: np.ndarray
    r_self: np.ndarray
    r_neighbor: np.ndarray
    lam_min_r_self: float = field(init=False)
    lam_max_r_self: float = field(init=False)
    lam_min_r_neighbor: float = field(init=False)

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        rs = np.array(self.r_self, dtype=float)
        rn = np.array(self.r_neighbor, dtype=float)
        for name, mat in (("q", q), ("r_self", rs), ("r_neighbor", rn)):
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise ValueError(f"{name} must be square, got shape {mat.shape}")
            if not np.allclose(mat, mat.T):
                raise ValueError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(q)[0] <= 0.0:
            raise ValueError("q must be positive definite")
        rs_eigs = np.linalg.eigvalsh(rs)
        if rs_eigs[0] <= 0.0:
            raise ValueError("r_self must be positive definite")
        rn_eigs = np.linalg.eigvalsh(rn)
        if rn_eigs[0] < -1e-12:
            raise ValueError("r_neighbor must be positive semidefinite")
        for name, mat in (("q", q), ("r_self", rs), ("r_neighbor", rn)):
            mat.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r_self", rs)
        object.__setattr__(self, "r_neighbor", rn)
        object.__setattr__(self, "lam_min_r_self", float(rs_eigs[0]))
        object.__setattr__(self, "lam_max_r_self", float(rs_eigs[-1]))
        object.__setattr__(self, "lam_min_r_neighbor", float(max(rn_eigs[0], 0.0)))


@dataclass(frozen=True)
class TriggerParams:
    """Event-trigger tuning.

    lipschitz_m bounds how fast the sampled control law drifts from the
    continuous one per unit of measurement error; a larger value tightens the
    trigger threshold (more events). check_period spaces the trigger checks;
    0 means every integration step.
    """

    lipschitz_m: float = 1.0
    check_period: float = 0.0

    def __post_init__(self):
        if self.lipschitz_m <= 0.0:
            raise ValueError(f"lipschitz_m must be positive, got {self.lipschitz_m}")
        if self.check_period < 0.0:
            raise ValueError(f"check_period must be nonnegative, got {self.check_period}")


def value_estimate(basis: Basis, state: CriticState, e: np.ndarray) -> float:
    """V(e) = weights . features(e)."""
    return float(state.weights @ basis.features(e))


def value_gradient(basis: Basis, state: CriticState, e: np.ndarray) -> np.ndarray:
    """dV/de = jacobian(e)^T weights."""
    return basis.jacobian(e).T @ state.weights


def control_law(
    basis: Basis,
    state: CriticState,
    e_held: np.ndarray,
    d_i: float,
    b_i: float,
    b_in: np.ndarray,
    r_self: np.ndarray,
) -> np.ndarray:
    """u = -(d_i + b_i)/2 * r_self^-1 B^T dV/de evaluated at the held error.

    Between triggers the caller re-applies the same value (zero-order hold).
    """
    grad = value_gradient(basis, state, e_held)
    return -0.5 * (d_i + b_i) * np.linalg.solve(r_self, b_in.T @ grad)


def _neighbor_quad_sum(neighbor_controls, r_neighbor: np.ndarray) -> float:
    total = 0.0
    for u_j in neighbor_controls:
        u_j = np.asarray(u_j, dtype=float)
        total += float(u_j @ r_neighbor @ u_j)
    return total


def cost_rate(
    e: np.ndarray,
    u: np.ndarray,
    neighbor_controls: Sequence[np.ndarray],
    cost_weights: CostWeights,
) -> float:
    """Instantaneous running cost: e'Qe + u'R u + sum_j uj'Rn uj."""
    e = np.asarray(e, dtype=float)
    u = np.asarray(u, dtype=float)
    return (
        float(e @ cost_weights.q @ e)
        + float(u @ cost_weights.r_self @ u)
        + _neighbor_quad_sum(neighbor_controls, cost_weights.r_neighbor)
    )


def regressor(basis: Basis, e: np.ndarray, error_deriv_value: np.ndarray) -> np.ndarray:
    """Learning regressor: jacobian(e) @ edot; the weight-space direction along
    which the value estimate changes as the error flows."""
    return basis.jacobian(e) @ np.asarray(error_deriv_value, dtype=float)


def hamiltonian_residual(
    basis: Basis,
    state: CriticState,
    e: np.ndarray,
    u: np.ndarray,
    neighbor_controls: Sequence[np.ndarray],
    error_deriv_value: np.ndarray,
    cost_weights: CostWeights,
) -> float:
    """Bellman residual: cost_rate + weights . (jacobian(e) @ edot).

    Zero at the exact value function under optimal play; its magnitude is the
    critic's training signal.
    """
    sig = regressor(basis, e, error_deriv_value)
    return cost_rate(e, u, neighbor_controls, cost_weights) + float(sig @ state.weights)


def weight_update(
    state: CriticState,
    basis: Basis,
    sigma: np.ndarray,
    e: np.ndarray,
    u: np.ndarray,
    neighbor_controls: Sequence[np.ndarray],
    cost_weights: CostWeights,
    normalize: bool = False,
) -> np.ndarray:
    """One event-gated gradient step on the squared Bellman residual.

    Returns the post-jump weights; between trigger instants the weights are
    constant, so callers apply this only at events. The raw step (default)
    contracts the residual only while learning_rate * |sigma|^2 < 2; with
    normalize=True the step is scaled by 1/(1 + sigma.sigma)^2, the normalized
    gradient form whose step stays inside the contraction envelope regardless
    of regressor magnitude. The closed-loop simulator uses the normalized
    form; see the package notes on update stability.
    """
    sigma = np.asarray(sigma, dtype=float)
    residual = float(sigma @ state.weights) + cost_rate(e, u, neighbor_controls, cost_weights)
    rate = state.learning_rate
    if normalize:
        den = 1.0 + float(sigma @ sigma)
        rate = rate / (den * den)
    return state.weights - rate * residual * sigma


def trigger_function(
    delta: np.ndarray,
    u_held: np.ndarray,
    neighbor_controls: Sequence[np.ndarray],
    cost_weights: CostWeights,
    params: TriggerParams,
) -> float:
    """Event function g; an event is due when g >= 0.

    g = |delta|^2 - [sum_j lam_min(Rn) |u_j|^2 + lam_min(R) |u_held|^2]
                    / (lam_max(R)^2 M^2)

    Neighbor controls are each neighbor's last broadcast value; continuous
    neighbor signals are unobservable under event-triggered communication.
    """
    delta = np.asarray(delta, dtype=float)
    u_held = np.asarray(u_held, dtype=float)
    num = cost_weights.lam_min_r_self * float(u_held @ u_held)
    for u_j in neighbor_controls:
        u_j = np.asarray(u_j, dtype=float)
        num += cost_weights.lam_min_r_neighbor * float(u_j @ u_j)
    denom = cost_weights.lam_max_r_self**2 * params.lipschitz_m**2
    return float(delta @ delta) - num / denom


def measurement_error(e_held: np.ndarray, e_now: np.ndarray) -> np.ndarray:
    """Held error minus current error; exactly zero right after a trigger."""
    return np.asarray(e_held, dtype=float) - np.asarray(e_now, dtype=float)


def quadratic_form_weights(p: np.ndarray) -> np.ndarray:
    """Weights that make the quadratic basis reproduce e'Pe exactly.

    For the planar case: [p00, p11, p01 + p10, 0, 0] (squares first, then the
    cross monomial, zero on the linear features).
    """
    p = np.asarray(p, dtype=float)
    d = p.shape[0]
    w = [p[i, i] for i in range(d)]
    for i in range(d):
        for j in range(i + 1, d):
            w.append(p[i, j] + p[j, i])
    w.extend([0.0] * d)
    return np.array(w)
