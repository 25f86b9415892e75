"""Pure-python reference implementation of the closed-loop stepping kernel.

Semantics are specified in engine.common; the compiled kernel must agree with
this implementation (see tests/test_engine_parity.py). Numpy-vectorized over
agents where the order of floating-point operations does not matter for the
step semantics; per-agent loops where it does (trigger decisions, updates).
"""

from __future__ import annotations

import numpy as np

from .common import (
    StepProblem,
    StepResult,
    follower_drift,
    jacobian_of,
    leader_drift,
)


def run_steps(problem: StepProblem) -> StepResult:
    # intentionally-diverging configs overflow before the finite-state check
    # aborts the run; the overflow itself is expected, not noteworthy
    with np.errstate(over="ignore", invalid="ignore"):
        return _run_steps(problem)


def _run_steps(problem: StepProblem) -> StepResult:
    p = problem
    n, d, m, kk = p.n, p.d, p.m, p.k
    n_rows = p.n_steps + 1

    lap_b = _laplacian_plus_pinning(p)

    times = np.empty(n_rows)
    leader_log = np.empty((n_rows, d))
    followers_log = np.empty((n_rows, n, d))
    errors_log = np.empty((n_rows, n, d))
    controls_log = np.empty((n_rows, n, m))
    delta_log = np.empty((n_rows, n))
    weights_log = np.empty((n_rows, n, kk))
    rate_log = np.empty((n_rows, n))
    cost_log = np.empty((n_rows, n))
    dos_log = np.zeros(n_rows, dtype=bool)
    trig_steps: list[int] = []
    trig_agents: list[int] = []

    x0 = p.x0_init.astype(float).copy()
    x = p.x_init.astype(float).copy()
    w = p.w_init.astype(float).copy()
    e_held = np.zeros((n, d))
    u_prev = np.zeros((n, m))   # most recent *applied* control snapshot
    u_held = np.zeros((n, m))
    cum = np.zeros(n)
    thr_denom = p.lam_max_r_self**2 * p.trig_m**2

    # held errors start at the initial errors so the forced step-0 trigger
    # sees a zero measurement error
    e_held[:] = _errors(p, lap_b, x, x0)

    prev_active = False
    diverged = False
    divergence_step = None
    rows = n_rows

    for k in range(n_rows):
        t = k * p.dt
        active = bool(p.dos_flags[k])
        e = _errors(p, lap_b, x, x0)

        if active:
            u_app = np.zeros((n, m))
            delta_now = np.linalg.norm(e_held - e, axis=1)
            u_prev = np.zeros((n, m))
        else:
            forced = (k == 0) or (prev_active and p.retrigger)
            check = forced or (p.check_stride <= 1) or (k % p.check_stride == 0)
            delta_now = np.empty(n)
            if check:
                f_x = follower_drift(p, x)
                f0 = leader_drift(p, x0)
                ax0 = p.a_sys @ x0
                u_prev_norm2 = np.einsum("ij,ij->i", u_prev, u_prev)
                for i in range(n):
                    delta_vec = e_held[i] - e[i]
                    dn2 = float(delta_vec @ delta_vec)
                    lo, hi_ = p.indptr[i], p.indptr[i + 1]
                    nbr = p.indices[lo:hi_]
                    thr = (
                        p.lam_min_r_neighbor * float(u_prev_norm2[nbr].sum())
                        + p.lam_min_r_self * float(u_prev_norm2[i])
                    ) / thr_denom
                    if forced or (dn2 >= thr and dn2 > 0.0):
                        _update_and_refresh(
                            p, i, e[i], x, x0, f_x, f0, ax0, u_prev, w, e_held, u_held
                        )
                        trig_steps.append(k)
                        trig_agents.append(i)
                        delta_now[i] = 0.0
                    else:
                        delta_now[i] = np.sqrt(dn2)
            else:
                delta_now = np.linalg.norm(e_held - e, axis=1)
            u_app = u_held.copy()
            u_prev = u_app.copy()

        rate = _cost_rates(p, e, u_app)
        if k > 0:
            cum = cum + 0.5 * p.dt * (rate_log[k - 1] + rate)

        times[k] = t
        leader_log[k] = x0
        followers_log[k] = x
        errors_log[k] = e
        controls_log[k] = u_app
        delta_log[k] = delta_now
        weights_log[k] = w
        rate_log[k] = rate
        cost_log[k] = cum
        dos_log[k] = active
        prev_active = active

        if k == p.n_steps:
            break

        x0, x = _rk4(p, x0, x, u_app)
        if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(x))):
            diverged = True
            divergence_step = k + 1
            rows = k + 1
            break

    return StepResult(
        times=times[:rows],
        leader=leader_log[:rows],
        followers=followers_log[:rows],
        errors=errors_log[:rows],
        controls=controls_log[:rows],
        delta_norms=delta_log[:rows],
        weights=weights_log[:rows],
        cost_rates=rate_log[:rows],
        cum_costs=cost_log[:rows],
        dos_active=dos_log[:rows],
        trigger_steps=np.array(trig_steps, dtype=np.int64),
        trigger_agents=np.array(trig_agents, dtype=np.int64),
        diverged=diverged,
        divergence_step=divergence_step,
    )


def _laplacian_plus_pinning(p: StepProblem) -> np.ndarray:
    adj = np.zeros((p.n, p.n))
    for i in range(p.n):
        lo, hi = p.indptr[i], p.indptr[i + 1]
        adj[i, p.indices[lo:hi]] = p.nbr_weights[lo:hi]
    deg = adj.sum(axis=1)
    return np.diag(deg) - adj + np.diag(p.pinning)


def _errors(p: StepProblem, lap_b: np.ndarray, x: np.ndarray, x0: np.ndarray) -> np.ndarray:
    z = x - p.offsets
    return lap_b @ z - np.outer(p.pinning, x0)


def _update_and_refresh(p, i, e_i, x, x0, f_x, f0, ax0, u_prev, w, e_held, u_held):
    """Trigger body: Bellman-residual descent, then hold refresh.

    The agent's own control at the event instant is the hold about to be
    applied, so the regressor and cost use the freshly evaluated law at the
    current error (pre-update weights); neighbor quantities come from the
    previous-step snapshot, so the outcome does not depend on the order agents
    are visited within the step.
    """
    lo, hi = p.indptr[i], p.indptr[i + 1]
    nbr = p.indices[lo:hi]
    a_w = p.nbr_weights[lo:hi]

    jac = jacobian_of(p, e_i)
    u_fresh = p.gain[i] @ (jac.T @ w[i])
    edot = p.a_sys @ e_i + p.kappa[i] * (p.b_in @ u_fresh) + p.c_vec[i] + p.pinning[i] * ax0
    f_term = p.pinning[i] * (f_x[i] - f0)
    rho_nbr = 0.0
    for idx, j in enumerate(nbr):
        edot = edot - a_w[idx] * (p.b_in @ u_prev[j])
        f_term = f_term + a_w[idx] * (f_x[i] - f_x[j])
        rho_nbr += float(u_prev[j] @ p.r_neighbor @ u_prev[j])
    edot = edot + f_term

    sigma = jac @ edot
    rho = float(e_i @ p.q @ e_i) + float(u_fresh @ p.r_self @ u_fresh) + rho_nbr
    residual = float(sigma @ w[i]) + rho
    rate = p.alpha
    if p.normalize:
        den = 1.0 + float(sigma @ sigma)
        rate = rate / (den * den)
    w[i] = w[i] - rate * residual * sigma

    e_held[i] = e_i
    u_held[i] = p.gain[i] @ (jac.T @ w[i])


def _cost_rates(p: StepProblem, e: np.ndarray, u_app: np.ndarray) -> np.ndarray:
    own = np.einsum("ij,jk,ik->i", e, p.q, e) + np.einsum(
        "ij,jk,ik->i", u_app, p.r_self, u_app
    )
    nbr_quad = np.einsum("ij,jk,ik->i", u_app, p.r_neighbor, u_app)
    rate = own.copy()
    for i in range(p.n):
        lo, hi = p.indptr[i], p.indptr[i + 1]
        rate[i] += nbr_quad[p.indices[lo:hi]].sum()
    return rate


def _stacked_deriv(p: StepProblem, x0: np.ndarray, x: np.ndarray, u: np.ndarray):
    dx0 = leader_drift(p, x0)
    dx = x @ p.a_sys.T + u @ p.b_in.T + follower_drift(p, x)
    return dx0, dx


def _rk4(p: StepProblem, x0: np.ndarray, x: np.ndarray, u: np.ndarray):
    h = p.dt
    k1_0, k1 = _stacked_deriv(p, x0, x, u)
    k2_0, k2 = _stacked_deriv(p, x0 + 0.5 * h * k1_0, x + 0.5 * h * k1, u)
    k3_0, k3 = _stacked_deriv(p, x0 + 0.5 * h * k2_0, x + 0.5 * h * k2, u)
    k4_0, k4 = _stacked_deriv(p, x0 + h * k3_0, x + h * k3, u)
    x0_new = x0 + (h / 6.0) * (k1_0 + 2.0 * k2_0 + 2.0 * k3_0 + k4_0)
    x_new = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x0_new, x_new
