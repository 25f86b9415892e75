import math

import numpy as np
import pytest

from etform.critic import Basis, CostWeights, TriggerParams
from etform.dos import DoSSchedule
from etform.dynamics import Nonlinearity, SystemMatrices
from etform.sim import (
    SimConfig,
    TrajectoryLog,
    cumulative_cost,
    inter_event_stats,
    rk4_step,
    run,
)
from etform.topology import FormationSpec, Topology

from conftest import bench_topology

QUAD = Basis.quadratic(2)


def small_config(**overrides):
    """Single pinned agent regulating to a parked leader."""
    defaults = dict(
        topology=Topology(np.zeros((1, 1)), np.array([1.0])),
        formation=FormationSpec.zeros(1, 2),
        system=SystemMatrices(np.eye(2), 0.9 * np.eye(2)),
        nonlinearity=Nonlinearity.from_forms(("zero",), ("zero",), 0.0),
        cost_weights=CostWeights(0.4 * np.eye(2), 0.1 * np.eye(2), 0.01 * np.eye(2)),
        trigger=TriggerParams(lipschitz_m=60.0, check_period=1e-3),
        basis=QUAD,
        initial_weights=np.array([0.6, 0.6, 0.0, 0.0, 0.0]),
        learning_rate=0.1,
        x0_init=np.zeros(2),
        x_init=np.array([[1.0, 2.0]]),
        dt=1e-3,
        t_final=2.0,
        backend="python",
    )
    defaults.update(overrides)
    return SimConfig(**defaults)


# ---------------------------------------------------------------------------
# rk4_step
# ---------------------------------------------------------------------------


def test_rk4_exponential_decay():
    out = rk4_step(lambda t, x: -x, np.array([1.0]), 0.0, 0.1)
    assert abs(out[0] - math.exp(-0.1)) < 1e-7


def test_rk4_zero_derivative():
    state = np.array([3.0, -4.0])
    np.testing.assert_array_equal(rk4_step(lambda t, x: np.zeros(2), state, 0.0, 0.5), state)


def test_rk4_constant_derivative_exact():
    c = np.array([2.0, -1.0])
    out = rk4_step(lambda t, x: c, np.zeros(2), 0.0, 0.25)
    np.testing.assert_allclose(out, 0.25 * c, rtol=1e-15)


def test_rk4_rejects_bad_step_and_nonfinite():
    with pytest.raises(ValueError):
        rk4_step(lambda t, x: x, np.ones(1), 0.0, 0.0)
    with pytest.raises(FloatingPointError):
        rk4_step(lambda t, x: np.array([np.inf]), np.ones(1), 0.0, 0.1)


# ---------------------------------------------------------------------------
# closed-loop runs
# ---------------------------------------------------------------------------


def test_equilibrium_stays_at_rest():
    """Perfect initial formation with no drift and zero weights: errors stay
    exactly zero and nothing triggers after the initialization instant."""
    top = bench_topology()
    pentagon = FormationSpec.regular_polygon(5, 2.0)
    x0 = np.array([1.0, 2.0])
    config = SimConfig(
        topology=top,
        formation=pentagon,
        system=SystemMatrices(np.zeros((2, 2)), 0.9 * np.eye(2)),
        nonlinearity=Nonlinearity.from_forms(("zero",), ("zero",), 0.0),
        cost_weights=CostWeights(0.4 * np.eye(2), 0.1 * np.eye(2), 0.01 * np.eye(2)),
        trigger=TriggerParams(lipschitz_m=1.0, check_period=1e-3),
        basis=QUAD,
        initial_weights=np.zeros(5),
        learning_rate=0.1,
        x0_init=x0,
        x_init=x0 + pentagon.offsets,
        dt=1e-3,
        t_final=1.0,
        backend="python",
    )
    log = run(config)
    np.testing.assert_array_equal(log.errors, np.zeros_like(log.errors))
    np.testing.assert_array_equal(log.controls, np.zeros_like(log.controls))
    assert np.all(log.trigger_steps == 0)  # only the initialization events
    assert len(log.trigger_steps) == 5


def test_dos_gating_controls_exactly_zero(regulation_log):
    attacked = regulation_log.dos_active
    assert attacked.any() and (~attacked).any()
    np.testing.assert_array_equal(
        regulation_log.controls[attacked], np.zeros_like(regulation_log.controls[attacked])
    )
    # no trigger event lands on an attacked instant
    assert not regulation_log.dos_active[regulation_log.trigger_steps].any()


def test_dos_boundary_snapping(regulation_log):
    # window [0.1, 2.0) at dt=1e-3: active exactly on grid rows 100..1999
    assert not regulation_log.dos_active[99]
    assert regulation_log.dos_active[100]
    assert regulation_log.dos_active[1999]
    assert not regulation_log.dos_active[2000]


def test_weights_piecewise_constant_between_triggers(regulation_log):
    log = regulation_log
    n = log.n_agents
    for i in range(n):
        steps = np.sort(log.trigger_steps[log.trigger_agents == i])
        changed = np.flatnonzero(
            np.any(log.weights[1:, i, :] != log.weights[:-1, i, :], axis=1)
        ) + 1
        assert set(changed.tolist()) <= set(steps.tolist())


def test_measurement_error_zero_at_trigger_instants(regulation_log):
    log = regulation_log
    for step, agent in zip(log.trigger_steps, log.trigger_agents):
        assert log.delta_norms[step, agent] == 0.0


def test_cumulative_cost_zero_log():
    log = _constant_log(n_rows=1, rate=0.0)
    assert cumulative_cost(log, 0) == 0.0


def test_cumulative_cost_constant_rate():
    # e = [1, 0], u = 0, q = 0.4 I: rate 0.4 over 10 s integrates to 4
    log = _constant_log(n_rows=10_001, rate=0.4, dt=1e-3)
    assert cumulative_cost(log, 0) == pytest.approx(4.0, abs=1e-9)


def _constant_log(n_rows, rate, dt=1e-3):
    times = np.arange(n_rows) * dt
    z2 = np.zeros((n_rows, 1, 2))
    return TrajectoryLog(
        times=times,
        leader=np.zeros((n_rows, 2)),
        followers=z2.copy(),
        errors=z2.copy(),
        controls=z2.copy(),
        delta_norms=np.zeros((n_rows, 1)),
        weights=np.zeros((n_rows, 1, 5)),
        cost_rates=np.full((n_rows, 1), rate),
        cum_costs=np.zeros((n_rows, 1)),
        dos_active=np.zeros(n_rows, dtype=bool),
        trigger_steps=np.array([], dtype=np.int64),
        trigger_agents=np.array([], dtype=np.int64),
        dt=dt,
    )


def test_cumulative_cost_finite_and_monotone_on_benchmark(paper_experiment):
    log = run(paper_experiment.sim)
    for i in range(log.n_agents):
        total = cumulative_cost(log, i)
        assert np.isfinite(total)
        assert total == pytest.approx(log.cum_costs[-1, i], rel=1e-9)
        assert np.all(np.diff(log.cum_costs[:, i]) >= -1e-12)


def test_inter_event_stats_no_events():
    # schedule covering the whole horizon: communication never comes up
    config = small_config(
        dos_schedule=DoSSchedule.from_windows([[0.0, 3.0]]), t_final=1.0
    )
    log = run(config)
    stats = inter_event_stats(log)
    assert stats.counts.tolist() == [0]
    assert np.isnan(stats.min_intervals[0])
    assert stats.trigger_fraction[0] == 0.0


def test_forced_per_step_trigger_min_interval_is_dt():
    # an enormous trigger constant collapses the threshold: every check fires
    config = small_config(trigger=TriggerParams(lipschitz_m=1e9, check_period=1e-3))
    log = run(config)
    stats = inter_event_stats(log)
    assert stats.min_intervals[0] == pytest.approx(config.dt)
    assert stats.counts[0] > 0.9 * config.n_steps


def test_determinism_same_backend():
    a = run(small_config())
    b = run(small_config())
    np.testing.assert_array_equal(a.followers, b.followers)
    np.testing.assert_array_equal(a.weights, b.weights)
    np.testing.assert_array_equal(a.trigger_steps, b.trigger_steps)


def test_step_halving_changes_little(regulation_experiment):
    base = regulation_experiment.sim
    fine = SimConfig(**{**base.__dict__, "dt": base.dt / 2})
    log_base = run(base)
    log_fine = run(fine)
    e_base = np.linalg.norm(log_base.errors[-1], axis=1)
    e_fine = np.linalg.norm(log_fine.errors[-1], axis=1)
    assert np.abs(e_base - e_fine).max() < 1e-3


def test_trigger_counts_insensitive_to_dt(regulation_experiment):
    base = regulation_experiment.sim
    fine = SimConfig(**{**base.__dict__, "dt": base.dt / 2})
    c_base = inter_event_stats(run(base)).counts
    c_fine = inter_event_stats(run(fine)).counts
    rel = np.abs(c_fine - c_base) / np.maximum(c_base, 1)
    assert rel.max() < 0.2


def test_divergence_truncates_log():
    # raw (unnormalized) updates at this scale blow up within a few events
    config = small_config(
        normalize_updates=False,
        x_init=np.array([[50.0, -80.0]]),
        t_final=2.0,
    )
    log = run(config)
    assert log.diverged
    assert log.divergence_step is not None
    assert log.times.shape[0] == log.divergence_step
    assert np.all(np.isfinite(log.followers))


def test_lyapunov_decrease_under_dense_events(regulation_experiment):
    """With per-step triggering (near-continuous control) and settled weights
    (a vanishing learning rate stands in for "learning has converged"), the
    quadratic error energy is nonincreasing outside attack windows."""
    base = regulation_experiment.sim
    config = SimConfig(
        **{
            **base.__dict__,
            "trigger": TriggerParams(1e9, 1e-3),
            "learning_rate": 1e-12,
        }
    )
    log = run(config)
    q = base.cost_weights.q
    v1 = 0.5 * np.einsum("kij,jl,kil->k", log.errors, q, log.errors)
    free = ~log.dos_active
    idx = np.flatnonzero(free)
    second_half = idx[idx.size // 2:]
    consecutive = second_half[np.diff(second_half, prepend=second_half[0] - 1) == 1]
    violations = 0
    total = 0
    for a, b in zip(consecutive[:-1], consecutive[1:]):
        if b != a + 1:
            continue
        total += 1
        if v1[b] > v1[a] * (1.0 + 1e-9) + 1e-15:
            violations += 1
    assert total > 1000
    assert violations < 0.01 * total


def test_exponential_envelope_on_regulation_run(regulation_log, regulation_experiment):
    q = regulation_experiment.sim.cost_weights.q
    v1 = 0.5 * np.einsum("kij,jl,kil->k", regulation_log.errors, q, regulation_log.errors)
    mask = (~regulation_log.dos_active) & (v1 > 0)
    slope = np.polyfit(regulation_log.times[mask], np.log(v1[mask]), 1)[0]
    assert slope < 0.0


def test_retrigger_after_attack_refreshes_holds(regulation_log):
    # the first attack-free instant after each window must carry events for
    # every agent (forced hold refresh)
    log = regulation_log
    flags = log.dos_active.astype(int)
    exits = np.flatnonzero(np.diff(flags) == -1) + 1
    assert exits.size >= 3
    for step in exits:
        agents = set(log.trigger_agents[log.trigger_steps == step].tolist())
        assert agents == set(range(log.n_agents))


def test_backend_field_recorded(regulation_log):
    assert regulation_log.backend in ("python", "compiled")


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(dt=-1.0)
    with pytest.raises(ValueError):
        small_config(t_final=1e-9)
    with pytest.raises(ValueError):
        small_config(trigger=TriggerParams(1.0, check_period=1e-4))  # below dt
    with pytest.raises(ValueError):
        small_config(initial_weights=np.zeros(4))


def test_custom_callable_runs_on_python_engine():
    drift = Nonlinearity(
        follower=lambda x: 0.01 * np.tanh(x),
        leader=lambda x0: np.array([0.1, 0.0]),
        lipschitz=0.01,
    )
    log = run(small_config(nonlinearity=drift, t_final=0.5, backend="auto"))
    assert log.backend == "python"
    assert np.all(np.isfinite(log.followers))
