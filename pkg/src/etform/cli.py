"""Experiment runner: TOML config in, CSV logs and a summary out.

Modes:
  simulate         closed-loop run, write trajectory CSVs + summary
  policy-iterate   offline solver only, write its iteration trace + summary
  both             policy iteration first, then the simulation
  validate-config  parse, validate, and report attack admissibility; no
                   trajectory output

Exit codes: 0 success, 1 config/usage error, 2 runtime divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import dos as dos_mod
from .critic import Basis, CostWeights, TriggerParams
from .dos import DoSSchedule, StabilityConstants
from .dynamics import Nonlinearity, SystemMatrices
from .policy_iteration import PiConfig, PiResult, run_pi
from .sim import SimConfig, TrajectoryLog, cumulative_cost, inter_event_stats, run
from .topology import FormationSpec, Topology, validate

__all__ = ["ExperimentConfig", "RunSummary", "ConfigError", "parse_config", "emit_csv", "main"]

MODES = ("simulate", "policy-iterate", "both", "validate-config")

# Written with 9 significant digits; parsing a CSV back reproduces the log to
# that precision.
FLOAT_FMT = "%.9g"


class ConfigError(ValueError):
    """Config parse/validation failure; carries the full list of problems."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in problems))


@dataclass
class ExperimentConfig:
    sim: SimConfig
    pi: PiConfig
    stability: StabilityConstants | None
    mode: str
    out_dir: Path
    config_hash: str
    echo: dict[str, str]  # flattened raw file values for the summary


@dataclass
class RunSummary:
    final_error_norms: np.ndarray | None
    trigger_counts: np.ndarray | None
    cumulative_costs: np.ndarray | None
    dos_report: dos_mod.AdmissibilityReport | None
    config_hash: str
    wall_clock_seconds: float
    echo: dict[str, str] = field(default_factory=dict)
    diverged: bool = False


def _flatten(prefix: str, value, out: dict[str, str]) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    elif isinstance(value, list):
        out[prefix] = "[" + " ".join(
            _flatten_list_item(v) for v in value
        ) + "]"
    else:
        out[prefix] = _scalar_str(value)


def _flatten_list_item(v) -> str:
    if isinstance(v, list):
        return "[" + " ".join(_flatten_list_item(x) for x in v) + "]"
    return _scalar_str(v)


def _scalar_str(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return FLOAT_FMT % v
    return str(v)


def _matrix(raw, name: str, problems: list[str]) -> np.ndarray | None:
    try:
        m = np.array(raw, dtype=float)
    except (TypeError, ValueError):
        problems.append(f"{name} is not a numeric matrix")
        return None
    if m.ndim != 2:
        problems.append(f"{name} must be a list of rows (got {m.ndim} dims)")
        return None
    return m


def parse_config(path: str | Path) -> ExperimentConfig:
    """Parse and fully validate an experiment file.

    All violations are collected and reported together in a ConfigError.
    Omitted optional sections fall back to documented defaults; the topology
    section is mandatory.
    """
    path = Path(path)
    raw_bytes = path.read_bytes()
    try:
        raw = tomllib.loads(raw_bytes.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"TOML parse error: {exc}"]) from exc

    problems: list[str] = []
    echo: dict[str, str] = {}
    _flatten("", raw, echo)

    # --- topology (mandatory) ---
    top_raw = raw.get("topology")
    topology = None
    if not top_raw or "adjacency" not in top_raw:
        problems.append("missing mandatory [topology] section with adjacency matrix")
    else:
        adjacency = _matrix(top_raw["adjacency"], "topology.adjacency", problems)
        pinning = np.array(top_raw.get("pinning", []), dtype=float)
        if adjacency is not None:
            if pinning.size == 0:
                pinning = np.zeros(adjacency.shape[0])
            try:
                topology = Topology(adjacency, pinning)
            except ValueError as exc:
                problems.append(str(exc))
        if topology is not None:
            problems.extend(validate(topology))

    n = topology.n_followers if topology is not None else 0

    # --- dynamics ---
    dyn = raw.get("dynamics", {})
    a_sys = _matrix(dyn.get("a_sys", [[1.0, 0.0], [0.0, 1.0]]), "dynamics.a_sys", problems)
    b_in = _matrix(dyn.get("b_in", [[0.9, 0.0], [0.0, 0.9]]), "dynamics.b_in", problems)
    system = None
    if a_sys is not None and b_in is not None:
        try:
            system = SystemMatrices(a_sys, b_in)
        except ValueError as exc:
            problems.append(str(exc))
    d = system.state_dim if system is not None else 2

    fol = dyn.get("follower_nonlinearity", {"kind": "scaled_sin", "amplitude": 0.4, "frequency": 0.1})
    lead = dyn.get("leader", {"kind": "planar_drift", "drift": 0.7, "cos_amplitude": 0.35,
                              "sin_amplitude": 0.2, "sin_frequency": 0.1})
    nonlinearity = None
    try:
        nonlinearity = Nonlinearity.from_forms(
            _follower_form(fol), _leader_form(lead), float(dyn.get("lipschitz", 0.04))
        )
    except (ValueError, KeyError) as exc:
        problems.append(f"dynamics nonlinearity: {exc}")

    # --- formation ---
    form_raw = raw.get("formation", {})
    formation = None
    kind = form_raw.get("kind", "zeros")
    if kind == "regular_polygon":
        formation = FormationSpec.regular_polygon(n or 1, float(form_raw.get("radius", 2.0)))
    elif kind == "explicit":
        off = _matrix(form_raw.get("offsets", []), "formation.offsets", problems)
        if off is not None:
            formation = FormationSpec(off)
    elif kind == "zeros":
        formation = FormationSpec.zeros(n or 1, d)
    else:
        problems.append(f"formation.kind must be regular_polygon|explicit|zeros, got {kind!r}")
    if formation is not None and topology is not None:
        if formation.n_followers != n or formation.state_dim != d:
            problems.append(
                f"formation offsets shape {formation.offsets.shape} inconsistent "
                f"with {n} followers of dimension {d}"
            )

    # --- cost ---
    cost_raw = raw.get("cost", {})
    q = _matrix(cost_raw.get("q", (0.4 * np.eye(d)).tolist()), "cost.q", problems)
    r_self = _matrix(cost_raw.get("r_self", (0.1 * np.eye(d)).tolist()), "cost.r_self", problems)
    r_nbr = _matrix(cost_raw.get("r_neighbor", (0.01 * np.eye(d)).tolist()),
                    "cost.r_neighbor", problems)
    cost_weights = None
    if q is not None and r_self is not None and r_nbr is not None:
        try:
            cost_weights = CostWeights(q, r_self, r_nbr)
        except ValueError as exc:
            problems.append(f"cost weights: {exc}")

    # --- critic ---
    crit = raw.get("critic", {})
    basis_kind = crit.get("basis", "quadratic")
    basis = None
    if basis_kind == "quadratic":
        basis = Basis.quadratic(d)
    elif basis_kind == "tanh":
        basis = Basis.tanh_random(d, int(crit.get("features", 5)), int(crit.get("tanh_seed", 0)))
    else:
        problems.append(f"critic.basis must be quadratic|tanh, got {basis_kind!r}")
    initial_weights = np.array(
        crit.get("initial_weights", np.zeros(basis.size if basis else 1)), dtype=float
    )
    learning_rate = float(crit.get("learning_rate", 0.1))
    if not 0.0 < learning_rate < 1.0:
        problems.append(f"critic.learning_rate must lie in (0,1), got {learning_rate}")
    normalize_updates = bool(crit.get("normalized_step", True))

    # --- trigger ---
    trig_raw = raw.get("trigger", {})
    trigger = None
    try:
        trigger = TriggerParams(
            lipschitz_m=float(trig_raw.get("lipschitz_m", 1.0)),
            check_period=float(trig_raw.get("check_period", 0.0)),
        )
    except ValueError as exc:
        problems.append(f"trigger: {exc}")

    # --- dos ---
    dos_raw = raw.get("dos", {})
    schedule = DoSSchedule.empty()
    try:
        schedule = DoSSchedule.from_windows(dos_raw.get("intervals", []))
    except ValueError as exc:
        problems.append(f"dos.intervals: {exc}")

    # --- stability constants ---
    stab_raw = raw.get("stability")
    stability = None
    if stab_raw:
        try:
            stability = StabilityConstants(
                c1=float(stab_raw["c1"]),
                c2=float(stab_raw["c2"]),
                c3=float(stab_raw.get("c3", 0.0)),
                c4=float(stab_raw["c4"]),
                zeta=float(stab_raw["zeta"]),
                k_star=float(stab_raw["k_star"]),
                lambda_max_p=float(stab_raw.get("lambda_max_p", 1.0)),
                lambda_min_p=float(stab_raw.get("lambda_min_p", 1.0)),
            )
        except (KeyError, ValueError) as exc:
            problems.append(f"stability constants: {exc}")

    # --- sim ---
    sim_raw = raw.get("sim", {})
    dt = float(sim_raw.get("dt", 1e-3))
    t_final = float(sim_raw.get("t_final", 10.0))
    if dt <= 0.0:
        problems.append("sim.dt must be positive")
    if t_final < dt and dt > 0.0:
        problems.append("sim.t_final must be at least dt")

    init_raw = raw.get("initial", {})
    x0_init = np.array(init_raw.get("leader", np.zeros(d)), dtype=float)
    x_init_raw = init_raw.get("followers")
    x_init = (
        np.zeros((n, d)) if x_init_raw is None else np.array(x_init_raw, dtype=float)
    )
    if topology is not None and x_init.shape != (n, d):
        problems.append(f"initial.followers must be an ({n}, {d}) matrix, got {x_init.shape}")
    if x0_init.shape != (d,):
        problems.append(f"initial.leader must have dimension {d}")

    # --- pi ---
    pi_raw = raw.get("pi", {})
    pi_config = None
    try:
        box_raw = pi_raw.get("sampling_box", [[-5.0, 5.0]] * d)
        pi_config = PiConfig(
            n_collocation_points=int(pi_raw.get("n_collocation_points", 256)),
            sampling_box=tuple(tuple(float(x) for x in b) for b in box_raw),
            max_iterations=int(pi_raw.get("max_iterations", 50)),
            tolerance=float(pi_raw.get("tolerance", 1e-6)),
            seed=int(pi_raw.get("seed", 0)),
        )
    except (TypeError, ValueError) as exc:
        problems.append(f"pi config: {exc}")

    if basis is not None and initial_weights.ndim == 1 and basis.size != initial_weights.size:
        problems.append(
            f"critic.initial_weights has {initial_weights.size} entries; basis needs {basis.size}"
        )

    if problems:
        raise ConfigError(problems)

    sim_config = SimConfig(
        topology=topology,
        formation=formation,
        system=system,
        nonlinearity=nonlinearity,
        cost_weights=cost_weights,
        trigger=trigger,
        basis=basis,
        initial_weights=initial_weights,
        learning_rate=learning_rate,
        dos_schedule=schedule,
        x0_init=x0_init,
        x_init=x_init,
        dt=dt,
        t_final=t_final,
        seed=int(sim_raw.get("seed", 0)),
        retrigger_after_attack=bool(sim_raw.get("retrigger_after_attack", True)),
        normalize_updates=normalize_updates,
        backend=str(sim_raw.get("backend", "auto")),
    )
    return ExperimentConfig(
        sim=sim_config,
        pi=pi_config,
        stability=stability,
        mode="simulate",
        out_dir=Path("./out"),
        config_hash=hashlib.sha256(raw_bytes).hexdigest(),
        echo=echo,
    )


def _follower_form(raw: dict) -> tuple:
    kind = raw.get("kind", "zero")
    if kind == "zero":
        return ("zero",)
    if kind == "scaled_sin":
        return ("scaled_sin", float(raw["amplitude"]), float(raw["frequency"]))
    raise ValueError(f"unknown follower nonlinearity kind {kind!r}")


def _leader_form(raw: dict) -> tuple:
    kind = raw.get("kind", "zero")
    if kind == "zero":
        return ("zero",)
    if kind == "planar_drift":
        return (
            "planar_drift",
            float(raw["drift"]),
            float(raw["cos_amplitude"]),
            float(raw["sin_amplitude"]),
            float(raw["sin_frequency"]),
        )
    raise ValueError(f"unknown leader kind {kind!r}")


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(FLOAT_FMT % v if isinstance(v, float) else str(v) for v in row))
            fh.write("\n")


def _agent_dim_headers(stem: str, n: int, d: int) -> list[str]:
    # planar runs use the x/y suffix convention; higher dimensions are indexed
    if d == 2:
        return [f"{stem}{i + 1}{ax}" for i in range(n) for ax in ("x", "y")]
    return [f"{stem}{i + 1}_{k}" for i in range(n) for k in range(d)]


def emit_csv(
    log: TrajectoryLog | None,
    out_dir: str | Path,
    pi_result: PiResult | None = None,
    summary: RunSummary | None = None,
) -> list[Path]:
    """Write the CSV file set for whatever artifacts are provided.

    Trajectory logs produce states/errors/controls/weights/costs/triggers
    files (one row per grid instant; triggers one row per event); the summary
    lands in summary.csv as key,value rows. Floats carry 9 significant digits.
    Wall-clock time is deliberately not written: output files must be
    byte-identical across reruns of the same config.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if log is not None:
        rows = log.times.shape[0]
        n, dim = log.errors.shape[1], log.errors.shape[2]
        m = log.controls.shape[2]
        kk = log.weights.shape[2]

        p = out_dir / "states.csv"
        header = ["t"] + (["x0x", "x0y"] if dim == 2 else [f"x0_{k}" for k in range(dim)]) \
            + _agent_dim_headers("x", n, dim) + ["dos_active"]
        _write_csv(p, header, (
            [float(log.times[k])] + [float(v) for v in log.leader[k]]
            + [float(v) for v in log.followers[k].ravel()] + [int(log.dos_active[k])]
            for k in range(rows)
        ))
        written.append(p)

        p = out_dir / "errors.csv"
        _write_csv(p, ["t"] + _agent_dim_headers("e", n, dim) + ["dos_active"], (
            [float(log.times[k])] + [float(v) for v in log.errors[k].ravel()]
            + [int(log.dos_active[k])] for k in range(rows)
        ))
        written.append(p)

        p = out_dir / "controls.csv"
        _write_csv(p, ["t"] + _agent_dim_headers("u", n, m) + ["dos_active"], (
            [float(log.times[k])] + [float(v) for v in log.controls[k].ravel()]
            + [int(log.dos_active[k])] for k in range(rows)
        ))
        written.append(p)

        p = out_dir / "weights.csv"
        _write_csv(p, ["t"] + [f"w{i + 1}_{j}" for i in range(n) for j in range(kk)]
                   + ["delta" + str(i + 1) for i in range(n)], (
            [float(log.times[k])] + [float(v) for v in log.weights[k].ravel()]
            + [float(v) for v in log.delta_norms[k]] for k in range(rows)
        ))
        written.append(p)

        p = out_dir / "costs.csv"
        _write_csv(p, ["t"] + [f"rate{i + 1}" for i in range(n)] + [f"J{i + 1}" for i in range(n)], (
            [float(log.times[k])] + [float(v) for v in log.cost_rates[k]]
            + [float(v) for v in log.cum_costs[k]] for k in range(rows)
        ))
        written.append(p)

        p = out_dir / "triggers.csv"
        _write_csv(p, ["agent", "t"], (
            [int(log.trigger_agents[j]) + 1, float(log.trigger_steps[j] * log.dt)]
            for j in range(log.trigger_steps.shape[0])
        ))
        written.append(p)

    if pi_result is not None:
        p = out_dir / "pi_result.csv"
        n, kk = pi_result.weights.shape
        header = (
            ["iteration", "max_weight_change"]
            + [f"residual_{i + 1}" for i in range(n)]
            + [f"w{i + 1}_{j}" for i in range(n) for j in range(kk)]
        )
        rows = []
        for it, change in enumerate(pi_result.weight_change_trace, start=1):
            row = [it, float(change)]
            if it == pi_result.iterations:
                row += [float(v) for v in pi_result.residual_norms]
                row += [float(v) for v in pi_result.weights.ravel()]
            else:
                row += [""] * (n + n * kk)
            rows.append(row)
        _write_csv(p, header, rows)
        written.append(p)

    if summary is not None:
        p = out_dir / "summary.csv"
        rows = [["config_hash", summary.config_hash], ["diverged", int(summary.diverged)]]
        if summary.final_error_norms is not None:
            for i, v in enumerate(summary.final_error_norms):
                rows.append([f"final_error_norm_{i + 1}", float(v)])
        if summary.trigger_counts is not None:
            for i, v in enumerate(summary.trigger_counts):
                rows.append([f"triggers_{i + 1}", int(v)])
        if summary.cumulative_costs is not None:
            for i, v in enumerate(summary.cumulative_costs):
                rows.append([f"cumulative_cost_{i + 1}", float(v)])
        if summary.dos_report is not None:
            rep = summary.dos_report
            rows += [
                ["dos_frequency", float(rep.frequency)],
                ["dos_length_rate", float(rep.length_rate)],
                ["dos_frequency_bound", float(rep.frequency_bound)],
                ["dos_length_rate_bound", float(rep.length_rate_bound)],
                ["dos_frequency_ok", int(rep.frequency_ok)],
                ["dos_length_ok", int(rep.length_ok)],
            ]
        for key in sorted(summary.echo):
            rows.append([f"config.{key}", summary.echo[key]])
        _write_csv(p, ["key", "value"], rows)
        written.append(p)

    return written


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # usage + exit code 1 on any argument problem (default argparse exits 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="etform",
        description="Event-triggered formation control experiments: simulate the "
        "attacked closed loop and/or solve the coupled regulation game offline.",
    )
    parser.add_argument("--config", required=True, help="experiment TOML file")
    parser.add_argument("--out", default="./out", help="output directory (default ./out)")
    parser.add_argument("--mode", default="simulate", choices=MODES)
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--t-final", type=float, default=None, help="override horizon (s)")
    parser.add_argument("--dt", type=float, default=None, help="override step size (s)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        config = parse_config(args.config)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    config.mode = args.mode
    config.out_dir = Path(args.out)
    if args.seed is not None:
        config.sim.seed = args.seed
        config.pi = PiConfig(
            n_collocation_points=config.pi.n_collocation_points,
            sampling_box=config.pi.sampling_box,
            max_iterations=config.pi.max_iterations,
            tolerance=config.pi.tolerance,
            seed=args.seed,
        )
    if args.t_final is not None:
        config.sim.t_final = args.t_final
    if args.dt is not None:
        config.sim.dt = args.dt
    try:
        # re-run the cross-field checks after overrides
        SimConfig.__post_init__(config.sim)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    t_start = time.perf_counter()
    dos_report = None
    if config.stability is not None and config.sim.t_final > 0:
        try:
            dos_report = dos_mod.admissible(
                config.sim.dos_schedule, config.sim.t_final, config.stability
            )
        except ValueError as exc:
            print(f"note: admissibility not computed: {exc}")

    if config.mode == "validate-config":
        print(f"config ok: {args.config}")
        print(f"  config hash: {config.config_hash}")
        if dos_report is not None:
            print(
                f"  attack frequency {dos_report.frequency:.6g} 1/s "
                f"(bound {dos_report.frequency_bound:.6g}) -> "
                f"{'ok' if dos_report.frequency_ok else 'VIOLATED'}"
            )
            print(
                f"  attack length rate {dos_report.length_rate:.6g} "
                f"(bound {dos_report.length_rate_bound:.6g}) -> "
                f"{'ok' if dos_report.length_ok else 'VIOLATED'}"
            )
        return 0

    pi_result = None
    if config.mode in ("policy-iterate", "both"):
        pi_result = run_pi(
            config.sim.basis,
            config.sim.system,
            config.sim.topology,
            config.sim.cost_weights,
            config.pi,
        )
        status = "converged" if pi_result.converged else "NOT converged"
        print(
            f"policy iteration {status} after {pi_result.iterations} iterations "
            f"(last weight change {pi_result.weight_change_trace[-1]:.3e})"
        )

    log = None
    if config.mode in ("simulate", "both"):
        log = run(config.sim)
        if log.diverged:
            print(
                f"error: simulation diverged at step {log.divergence_step} "
                f"(t={log.divergence_step * config.sim.dt:.4f}s); "
                "log truncated at the last finite state",
                file=sys.stderr,
            )

    wall = time.perf_counter() - t_start
    summary = RunSummary(
        final_error_norms=(
            np.linalg.norm(log.errors[-1], axis=1) if log is not None else None
        ),
        trigger_counts=(inter_event_stats(log).counts if log is not None else None),
        cumulative_costs=(
            np.array([cumulative_cost(log, i) for i in range(log.n_agents)])
            if log is not None
            else None
        ),
        dos_report=dos_report,
        config_hash=config.config_hash,
        wall_clock_seconds=wall,
        echo=config.echo,
        diverged=bool(log.diverged) if log is not None else False,
    )
    written = emit_csv(log, config.out_dir, pi_result=pi_result, summary=summary)
    print(f"wrote {len(written)} files to {config.out_dir} in {wall:.2f}s")
    if log is not None:
        print(f"  backend: {log.backend}; final error norms: "
              + np.array2string(summary.final_error_norms, precision=4))
        if log.diverged:
            return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
