"""Follower communication graph, leader pinning, and formation geometry.

The follower graph is undirected (symmetric adjacency, zero diagonal) and the
leader couples into individual followers through a diagonal vector of pinning
gains. Every matrix used by the controller (degree, Laplacian, leader
reachability) derives from these two arrays. Agent indices are 0-based
throughout the code; file outputs label agents 1..n for readability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Topology",
    "FormationSpec",
    "degree",
    "laplacian",
    "neighbors",
    "validate",
]

# Smallest singular value of L + diag(pinning) accepted as "nonsingular".
REACHABILITY_TOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Topology:
    """Undirected follower graph with leader pinning gains.

    adjacency[i, j] > 0 means followers i and j exchange state information;
    pinning[i] > 0 means follower i receives the leader state directly.
    Instances are immutable (arrays are marked read-only) and safe to share
    across workers.
    """

    adjacency: np.ndarray
    pinning: np.ndarray

    def __post_init__(self):
        adj = _readonly(self.adjacency)
        pin = _readonly(self.pinning)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError(f"adjacency must be a square matrix, got shape {adj.shape}")
        if pin.ndim != 1 or pin.shape[0] != adj.shape[0]:
            raise ValueError(
                f"pinning must be a length-{adj.shape[0]} vector, got shape {pin.shape}"
            )
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "pinning", pin)

    @property
    def n_followers(self) -> int:
        return self.adjacency.shape[0]


@dataclass(frozen=True)
class FormationSpec:
    """Desired per-follower offsets relative to the leader state."""

    offsets: np.ndarray  # (n_followers, state_dim)

    def __post_init__(self):
        off = _readonly(self.offsets)
        if off.ndim != 2:
            raise ValueError(f"offsets must be an (n, d) array, got shape {off.shape}")
        object.__setattr__(self, "offsets", off)

    @property
    def n_followers(self) -> int:
        return self.offsets.shape[0]

    @property
    def state_dim(self) -> int:
        return self.offsets.shape[1]

    @classmethod
    def regular_polygon(cls, n: int, radius: float = 2.0) -> "FormationSpec":
        """Planar formation with vertex i (1-based) at angle 2*pi*i/n."""
        angles = [2.0 * math.pi * i / n for i in range(1, n + 1)]
        return cls(np.array([[radius * math.cos(a), radius * math.sin(a)] for a in angles]))

    @classmethod
    def zeros(cls, n: int, state_dim: int) -> "FormationSpec":
        return cls(np.zeros((n, state_dim)))


def degree(topology: Topology, i: int) -> float:
    """Weighted degree of follower i: sum of its adjacency row."""
    if not 0 <= i < topology.n_followers:
        raise IndexError(f"agent index {i} out of range [0, {topology.n_followers})")
    return float(topology.adjacency[i].sum())


def laplacian(topology: Topology) -> np.ndarray:
    """Graph Laplacian D - A; rows sum to zero, symmetric PSD for symmetric A."""
    return np.diag(topology.adjacency.sum(axis=1)) - topology.adjacency


def neighbors(topology: Topology, i: int) -> set[int]:
    """Indices j with adjacency[i, j] > 0."""
    if not 0 <= i < topology.n_followers:
        raise IndexError(f"agent index {i} out of range [0, {topology.n_followers})")
    return set(np.flatnonzero(topology.adjacency[i] > 0.0).tolist())


def validate(topology: Topology, formation: FormationSpec | None = None) -> list[str]:
    """Check structural invariants; returns a list of violations (empty = ok).

    Never raises: intended for config validation where all problems should be
    reported at once. Leader reachability is tested as nonsingularity of
    L + diag(pinning) (smallest singular value above REACHABILITY_TOL), which
    is equivalent to every follower having a path to the leader.
    """
    problems: list[str] = []
    adj = topology.adjacency
    if not np.array_equal(adj, adj.T):
        problems.append("adjacency not symmetric (graph must be undirected)")
    if np.any(np.diag(adj) != 0.0):
        problems.append("adjacency has nonzero diagonal (self-loops not allowed)")
    if np.any(adj < 0.0):
        problems.append("adjacency has negative weights")
    if np.any(topology.pinning < 0.0):
        problems.append("pinning gains must be nonnegative")
    lb = laplacian(topology) + np.diag(topology.pinning)
    smin = float(np.linalg.svd(lb, compute_uv=False)[-1])
    if smin <= REACHABILITY_TOL:
        problems.append(
            f"leader not reachable from every follower (sigma_min(L+B)={smin:.3e})"
        )
    if formation is not None:
        if formation.n_followers != topology.n_followers:
            problems.append(
                f"formation has {formation.n_followers} offsets for "
                f"{topology.n_followers} followers"
            )
    return problems
