#!/usr/bin/env python3
"""Compare the compiled stepping kernel against the pure-python fallback.

Runs the bundled benchmark config on both backends, reports wall-clock time,
speedup, and trajectory agreement.

    python benchmarks/bench_engines.py [--config NAME_OR_PATH] [--repeats N]
"""

import argparse
import importlib.resources
import time
from pathlib import Path

import numpy as np

import etform.engine as engine
from etform.cli import parse_config
from etform.sim import SimConfig, run


def resolve_config(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    return importlib.resources.files("etform.data") / f"{name}.cfg"


def time_backend(sim_config, backend: str, repeats: int):
    cfg = SimConfig(**{**sim_config.__dict__, "backend": backend})
    best = float("inf")
    log = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        log = run(cfg)
        best = min(best, time.perf_counter() - t0)
    return best, log


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="paper", help="bundled name or path")
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    experiment = parse_config(resolve_config(args.config))
    sim = experiment.sim
    steps = sim.n_steps
    agents = sim.topology.n_followers
    print(f"config: {args.config}  ({agents} agents, {steps} steps of {sim.dt}s)")

    t_py, log_py = time_backend(sim, "python", args.repeats)
    print(f"python   : {t_py * 1e3:9.1f} ms  ({steps / t_py:,.0f} steps/s)")

    if not engine.HAVE_COMPILED:
        print("compiled : not built (install with a C compiler to enable)")
        return 0

    t_cy, log_cy = time_backend(sim, "compiled", args.repeats)
    print(f"compiled : {t_cy * 1e3:9.1f} ms  ({steps / t_cy:,.0f} steps/s)")
    print(f"speedup  : x{t_py / t_cy:.1f}")

    same_events = np.array_equal(log_py.trigger_steps, log_cy.trigger_steps)
    state_gap = float(np.max(np.abs(log_py.followers[-1] - log_cy.followers[-1])))
    weight_gap = float(np.max(np.abs(log_py.weights[-1] - log_cy.weights[-1])))
    print(
        f"agreement: identical event sequence: {same_events}; "
        f"final state gap {state_gap:.3e}; final weight gap {weight_gap:.3e}"
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
