"""Continuous-time agent dynamics and the local neighborhood formation error.

Followers obey  xdot_i = A x_i + B u_i + f(x_i)  with a shared drift
nonlinearity f; the leader runs autonomously,  xdot_0 = f0(x_0).  The local
neighborhood formation error couples each follower's offset-corrected state to
its neighbors and (for pinned agents) the leader:

    e_i = sum_j a_ij (x_i - iota_i - x_j + iota_j) + b_i (x_i - x_0 - iota_i)

All operations are pure functions of their arguments and can be evaluated per
agent in parallel within one integration step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .topology import FormationSpec, Topology

__all__ = [
    "SystemMatrices",
    "Nonlinearity",
    "MasState",
    "scaled_sin",
    "planar_drift_leader",
    "zero_map",
    "default_nonlinearity",
    "follower_deriv",
    "leader_deriv",
    "formation_error",
    "formation_errors",
    "error_deriv",
    "lipschitz_audit",
]


@dataclass(frozen=True)
class SystemMatrices:
    """Constant linear part of the follower dynamics."""

    a_sys: np.ndarray  # (d, d) state drift
    b_in: np.ndarray   # (d, m) input matrix

    def __post_init__(self):
        a = np.array(self.a_sys, dtype=float)
        b = np.array(self.b_in, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"a_sys must be square, got shape {a.shape}")
        if b.ndim != 2 or b.shape[0] != a.shape[0]:
            raise ValueError(f"b_in must be (d, m) with d={a.shape[0]}, got {b.shape}")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a_sys", a)
        object.__setattr__(self, "b_in", b)

    @property
    def state_dim(self) -> int:
        return self.a_sys.shape[0]

    @property
    def input_dim(self) -> int:
        return self.b_in.shape[1]


def zero_map(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(np.asarray(x, dtype=float))


def scaled_sin(amplitude: float, frequency: float) -> Callable[[np.ndarray], np.ndarray]:
    """Elementwise x -> amplitude * sin(frequency * x)."""

    def f(x: np.ndarray) -> np.ndarray:
        return amplitude * np.sin(frequency * np.asarray(x, dtype=float))

    return f


def planar_drift_leader(
    drift: float, cos_amp: float, sin_amp: float, sin_freq: float
) -> Callable[[np.ndarray], np.ndarray]:
    """Planar leader: constant horizontal speed, oscillatory vertical speed.

    x0dot = [drift, cos_amp*cos(x0[0]) + sin_amp*sin(sin_freq*x0[0])]
    """

    def f0(x0: np.ndarray) -> np.ndarray:
        x0 = np.asarray(x0, dtype=float)
        return np.array(
            [drift, cos_amp * math.cos(x0[0]) + sin_amp * math.sin(sin_freq * x0[0])]
        )

    return f0


@dataclass(frozen=True)
class Nonlinearity:
    """Drift nonlinearities for followers (shared) and leader.

    ``follower_form`` / ``leader_form`` optionally describe the maps in a
    small parametric family the compiled engine can evaluate without calling
    back into Python:

        ("zero",)
        ("scaled_sin", amplitude, frequency)            followers
        ("planar_drift", drift, cos_amp, sin_amp, freq) leader

    Custom callables (forms left as None) are supported by the pure-python
    engine only. ``lipschitz`` is the bound used in analysis; it is a config
    input audited by sampling, not derived symbolically.
    """

    follower: Callable[[np.ndarray], np.ndarray]
    leader: Callable[[np.ndarray], np.ndarray]
    lipschitz: float = 0.0
    follower_form: tuple | None = None
    leader_form: tuple | None = None

    @classmethod
    def from_forms(
        cls, follower_form: tuple, leader_form: tuple, lipschitz: float
    ) -> "Nonlinearity":
        return cls(
            follower=_map_from_form(follower_form),
            leader=_map_from_form(leader_form),
            lipschitz=lipschitz,
            follower_form=tuple(follower_form),
            leader_form=tuple(leader_form),
        )


def _map_from_form(form: tuple) -> Callable[[np.ndarray], np.ndarray]:
    kind = form[0]
    if kind == "zero":
        return zero_map
    if kind == "scaled_sin":
        return scaled_sin(form[1], form[2])
    if kind == "planar_drift":
        return planar_drift_leader(form[1], form[2], form[3], form[4])
    raise ValueError(f"unknown nonlinearity form {form!r}")


def default_nonlinearity() -> Nonlinearity:
    """Shipped default: sinusoidal follower drift and a drifting planar leader."""
    return Nonlinearity.from_forms(
        ("scaled_sin", 0.4, 0.1),
        ("planar_drift", 0.7, 0.35, 0.2, 0.1),
        lipschitz=0.04,
    )


@dataclass
class MasState:
    """Snapshot of the whole system: leader state, follower states, time."""

    leader: np.ndarray     # (d,)
    followers: np.ndarray  # (n, d)
    time: float = 0.0

    def __post_init__(self):
        self.leader = np.asarray(self.leader, dtype=float)
        self.followers = np.asarray(self.followers, dtype=float)
        if self.followers.ndim != 2 or self.followers.shape[1] != self.leader.shape[0]:
            raise ValueError(
                f"followers must be (n, {self.leader.shape[0]}), got {self.followers.shape}"
            )

    @property
    def n_followers(self) -> int:
        return self.followers.shape[0]


def follower_deriv(
    i: int,
    state: MasState,
    u_i: np.ndarray,
    system: SystemMatrices,
    nonlinearity: Nonlinearity,
) -> np.ndarray:
    """xdot_i = A x_i + B u_i + f(x_i)."""
    x_i = state.followers[i]
    u_i = np.asarray(u_i, dtype=float)
    if u_i.shape != (system.input_dim,):
        raise ValueError(f"u_i must have shape ({system.input_dim},), got {u_i.shape}")
    return system.a_sys @ x_i + system.b_in @ u_i + nonlinearity.follower(x_i)


def leader_deriv(x0: np.ndarray, nonlinearity: Nonlinearity) -> np.ndarray:
    """x0dot = f0(x0)."""
    return nonlinearity.leader(np.asarray(x0, dtype=float))


def formation_error(
    i: int, state: MasState, topology: Topology, formation: FormationSpec
) -> np.ndarray:
    """Local neighborhood formation error of follower i."""
    x = state.followers
    iota = formation.offsets
    z_i = x[i] - iota[i]
    e = topology.pinning[i] * (z_i - state.leader)
    row = topology.adjacency[i]
    for j in np.flatnonzero(row > 0.0):
        e = e + row[j] * (z_i - (x[j] - iota[j]))
    return e


def formation_errors(
    state: MasState, topology: Topology, formation: FormationSpec
) -> np.ndarray:
    """All followers' formation errors, stacked (n, d). Matrix form:
    (L + diag(pinning)) @ (X - offsets) - pinning * x0."""
    z = state.followers - formation.offsets
    lap = np.diag(topology.adjacency.sum(axis=1)) - topology.adjacency
    lb = lap + np.diag(topology.pinning)
    return lb @ z - np.outer(topology.pinning, state.leader)


def error_deriv(
    i: int,
    state: MasState,
    controls: np.ndarray,
    topology: Topology,
    formation: FormationSpec,
    system: SystemMatrices,
    nonlinearity: Nonlinearity,
) -> np.ndarray:
    """Time derivative of formation_error(i) along the closed-loop dynamics.

    Expanded form:

        edot_i = A e_i + B (d_i + b_i) u_i - B sum_j a_ij u_j
                 + F_i + C_i + b_i A x_0

    with F_i the nonlinearity mismatch term and C_i = A (sum_j a_ij
    (iota_i - iota_j) + b_i iota_i). The b_i A x_0 term is required for this
    to be the exact derivative of the error definition whenever a pinned
    agent's leader deviates from the follower drift model; it is verified by
    finite differences in the test suite.
    """
    x = state.followers
    iota = formation.offsets
    a_row = topology.adjacency[i]
    b_i = topology.pinning[i]
    d_i = float(a_row.sum())
    u = np.asarray(controls, dtype=float)

    e_i = formation_error(i, state, topology, formation)
    f_i = nonlinearity.follower(x[i])
    out = system.a_sys @ e_i + (d_i + b_i) * (system.b_in @ u[i])
    c_accum = np.zeros(system.state_dim)
    f_accum = b_i * (f_i - nonlinearity.leader(state.leader))
    for j in np.flatnonzero(a_row > 0.0):
        out = out - a_row[j] * (system.b_in @ u[j])
        f_accum = f_accum + a_row[j] * (f_i - nonlinearity.follower(x[j]))
        c_accum = c_accum + a_row[j] * (iota[i] - iota[j])
    c_accum = c_accum + b_i * iota[i]
    return out + f_accum + system.a_sys @ c_accum + b_i * (system.a_sys @ state.leader)


def lipschitz_audit(
    f: Callable[[np.ndarray], np.ndarray],
    dim: int,
    n_pairs: int = 10_000,
    seed: int = 0,
    box: tuple[float, float] = (-10.0, 10.0),
) -> float:
    """Max sampled ratio ||f(a)-f(b)|| / ||a-b|| over random pairs in the box.

    A runtime audit of the configured Lipschitz bound; arbitrary user maps
    cannot be bounded symbolically.
    """
    rng = np.random.default_rng(seed)
    lo, hi = box
    worst = 0.0
    for _ in range(n_pairs):
        a = rng.uniform(lo, hi, size=dim)
        b = rng.uniform(lo, hi, size=dim)
        denom = float(np.linalg.norm(a - b))
        if denom == 0.0:
            continue
        ratio = float(np.linalg.norm(f(a) - f(b))) / denom
        worst = max(worst, ratio)
    return worst
