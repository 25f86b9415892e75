import filecmp

import numpy as np
import pytest

from etform.cli import ConfigError, emit_csv, main, parse_config
from etform.sim import run

from conftest import bundled_config_path


def test_parse_bundled_benchmark_config():
    exp = parse_config(bundled_config_path("paper.cfg"))
    sim = exp.sim
    np.testing.assert_array_equal(sim.cost_weights.q, 0.4 * np.eye(2))
    np.testing.assert_array_equal(sim.cost_weights.r_self, 0.1 * np.eye(2))
    np.testing.assert_array_equal(sim.cost_weights.r_neighbor, 0.01 * np.eye(2))
    assert sim.learning_rate == 0.1
    np.testing.assert_array_equal(sim.initial_weights, [0.2, 0.46, 0.1, 0.32, 0.61])
    np.testing.assert_array_equal(sim.system.a_sys, np.eye(2))
    np.testing.assert_array_equal(sim.system.b_in, 0.9 * np.eye(2))
    assert sim.dos_schedule.windows() == [(0.1, 2.0), (4.0, 6.0), (8.0, 9.0)]
    assert sim.dt == 1e-3 and sim.t_final == 10.0
    assert exp.stability is not None and exp.stability.c4 == 4.08
    np.testing.assert_allclose(
        sim.x_init,
        [[0.6, 3.0], [-0.2, 4.0], [-1.5, 5.0], [-1.5, 0.8], [-0.2, 1.5]],
    )


def test_parse_empty_file_rejected(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    with pytest.raises(ConfigError) as exc_info:
        parse_config(path)
    assert any("topology" in p for p in exc_info.value.problems)


def test_parse_bad_dt_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text(
        "[topology]\nadjacency = [[0.0]]\npinning = [1.0]\n[sim]\ndt = 0.0\n"
    )
    with pytest.raises(ConfigError) as exc_info:
        parse_config(path)
    assert any("dt must be positive" in p for p in exc_info.value.problems)


def test_parse_collects_all_violations(tmp_path):
    path = tmp_path / "multi.cfg"
    path.write_text(
        "[topology]\nadjacency = [[0.0, 1.0], [0.0, 0.0]]\npinning = [0.0, 0.0]\n"
        "[sim]\ndt = -1.0\n"
        "[critic]\nlearning_rate = 7.0\n"
    )
    with pytest.raises(ConfigError) as exc_info:
        parse_config(path)
    assert len(exc_info.value.problems) >= 3


def test_config_hash_stable():
    a = parse_config(bundled_config_path("paper.cfg"))
    b = parse_config(bundled_config_path("paper.cfg"))
    assert a.config_hash == b.config_hash and len(a.config_hash) == 64


def _short_run(tmp_path, t_final=0.5):
    exp = parse_config(bundled_config_path("regulation.cfg"))
    exp.sim.t_final = t_final
    log = run(exp.sim)
    return exp, log


def test_emit_csv_schema(tmp_path):
    exp, log = _short_run(tmp_path)
    files = emit_csv(log, tmp_path)
    names = {f.name for f in files}
    assert names == {
        "states.csv", "errors.csv", "controls.csv", "weights.csv", "costs.csv",
        "triggers.csv",
    }
    header = (tmp_path / "errors.csv").read_text().splitlines()[0]
    assert header == "t,e1x,e1y,e2x,e2y,e3x,e3y,e4x,e4y,e5x,e5y,dos_active"
    header = (tmp_path / "triggers.csv").read_text().splitlines()[0]
    assert header == "agent,t"


def test_emit_csv_roundtrip_nine_digits(tmp_path):
    exp, log = _short_run(tmp_path)
    emit_csv(log, tmp_path)
    raw = np.genfromtxt(tmp_path / "errors.csv", delimiter=",", skip_header=1)
    parsed = raw[:, 1:11].reshape(log.errors.shape)
    scale = np.maximum(np.abs(log.errors), 1e-30)
    rel = np.abs(parsed - log.errors) / scale
    assert rel.max() < 1e-8  # 9 significant digits round-trip
    np.testing.assert_array_equal(raw[:, 0], np.genfromtxt(
        tmp_path / "costs.csv", delimiter=",", skip_header=1)[:, 0])


def test_emit_csv_empty_log_header_only(tmp_path):
    exp, log = _short_run(tmp_path)
    empty = type(log)(
        times=log.times[:0],
        leader=log.leader[:0],
        followers=log.followers[:0],
        errors=log.errors[:0],
        controls=log.controls[:0],
        delta_norms=log.delta_norms[:0],
        weights=log.weights[:0],
        cost_rates=log.cost_rates[:0],
        cum_costs=log.cum_costs[:0],
        dos_active=log.dos_active[:0],
        trigger_steps=log.trigger_steps[:0],
        trigger_agents=log.trigger_agents[:0],
        dt=log.dt,
    )
    files = emit_csv(empty, tmp_path)
    for f in files:
        lines = f.read_text().splitlines()
        assert len(lines) == 1  # header only


def test_main_validate_config(capsys):
    code = main(["--config", str(bundled_config_path("paper.cfg")), "--mode", "validate-config"])
    out = capsys.readouterr().out
    assert code == 0
    assert "VIOLATED" in out  # both bounds broken for the bundled schedule
    assert "frequency" in out and "length rate" in out


def test_main_validate_config_writes_nothing(tmp_path, capsys):
    out_dir = tmp_path / "nothing"
    code = main([
        "--config", str(bundled_config_path("paper.cfg")),
        "--mode", "validate-config", "--out", str(out_dir),
    ])
    assert code == 0
    assert not out_dir.exists()


def test_main_missing_config_flag(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_main_unknown_flag(capsys):
    assert main(["--config", "x.cfg", "--frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_main_nonexistent_config(capsys):
    assert main(["--config", "/does/not/exist.cfg"]) == 1


def test_main_simulate_writes_file_set(tmp_path, capsys):
    code = main([
        "--config", str(bundled_config_path("regulation.cfg")),
        "--out", str(tmp_path), "--mode", "simulate", "--t-final", "0.5",
    ])
    assert code == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert names == {
        "states.csv", "errors.csv", "controls.csv", "weights.csv", "costs.csv",
        "triggers.csv", "summary.csv",
    }


def test_main_policy_iterate(tmp_path, capsys):
    code = main([
        "--config", str(bundled_config_path("regulation.cfg")),
        "--out", str(tmp_path), "--mode", "policy-iterate",
    ])
    assert code == 0
    header = (tmp_path / "pi_result.csv").read_text().splitlines()[0]
    assert header.startswith("iteration,max_weight_change,residual_1")
    assert not (tmp_path / "errors.csv").exists()
    assert "policy iteration converged" in capsys.readouterr().out


def test_main_divergence_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(
        "[topology]\nadjacency = [[0.0]]\npinning = [1.0]\n"
        "[formation]\nkind = \"zeros\"\n"
        "[dynamics]\na_sys = [[1.0, 0.0], [0.0, 1.0]]\nb_in = [[0.9, 0.0], [0.0, 0.9]]\n"
        "[dynamics.follower_nonlinearity]\nkind = \"zero\"\n"
        "[dynamics.leader]\nkind = \"zero\"\n"
        "[initial]\nleader = [0.0, 0.0]\nfollowers = [[50.0, -80.0]]\n"
        "[critic]\ninitial_weights = [0.6, 0.6, 0.0, 0.0, 0.0]\n"
        "normalized_step = false\n"
        "[trigger]\nlipschitz_m = 60.0\n"
        "[sim]\ndt = 0.001\nt_final = 2.0\n"
    )
    code = main(["--config", str(bad), "--out", str(tmp_path / "out")])
    assert code == 2
    assert "diverged" in capsys.readouterr().err


def test_summary_echoes_config_values(tmp_path):
    code = main([
        "--config", str(bundled_config_path("regulation.cfg")),
        "--out", str(tmp_path), "--t-final", "0.2",
    ])
    assert code == 0
    rows = dict(
        line.split(",", 1)
        for line in (tmp_path / "summary.csv").read_text().splitlines()[1:]
    )
    assert rows["config.critic.learning_rate"] == "0.1"
    assert rows["config.sim.dt"] == "0.001"
    assert rows["config.trigger.lipschitz_m"] == "60"
    assert rows["config.sim.retrigger_after_attack"] == "true"


def test_cli_byte_identical_reruns(tmp_path):
    args = ["--config", str(bundled_config_path("regulation.cfg")), "--t-final", "1.0"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ["states.csv", "errors.csv", "controls.csv", "weights.csv",
                 "costs.csv", "triggers.csv", "summary.csv"]:
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False), name
