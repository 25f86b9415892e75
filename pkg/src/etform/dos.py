"""Denial-of-service attack schedule and admissibility bounds.

An attack schedule is an ordered list of disjoint half-open intervals
[h_n, h_n + tau_n) during which all communication channels are severed: every
agent's applied control is forced to zero and no triggers or learning updates
occur. Two scalar summaries decide whether a schedule is tolerable: the attack
frequency (intervals started per unit time) and the attack length rate
(fraction of time under attack). The safe upper bounds for both derive from
the stability constants of the switched closed loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DoSSchedule",
    "StabilityConstants",
    "AdmissibilityReport",
    "is_active",
    "total_attack_time",
    "attack_frequency",
    "length_rate",
    "safe_bounds",
    "admissible",
]


@dataclass(frozen=True)
class DoSSchedule:
    """Ordered disjoint attack intervals, stored as (start, duration) pairs."""

    intervals: tuple[tuple[float, float], ...]

    def __post_init__(self):
        ivs = tuple((float(h), float(tau)) for (h, tau) in self.intervals)
        prev_end = -np.inf
        for h, tau in ivs:
            if tau <= 0.0:
                raise ValueError(f"attack duration must be positive, got {tau}")
            if h < prev_end:
                raise ValueError("attack intervals must be sorted and disjoint")
            prev_end = h + tau
        object.__setattr__(self, "intervals", ivs)

    @classmethod
    def from_windows(cls, windows) -> "DoSSchedule":
        """Build from [start, end] pairs (the config file convention)."""
        return cls(tuple((float(s), float(e) - float(s)) for (s, e) in windows))

    @classmethod
    def empty(cls) -> "DoSSchedule":
        return cls(())

    def windows(self) -> list[tuple[float, float]]:
        return [(h, h + tau) for (h, tau) in self.intervals]


@dataclass(frozen=True)
class StabilityConstants:
    """Scalar constants of the switched-system stability estimate.

    c1 is the decay rate with communication up, c2 the growth rate under
    attack, c4 the jump factor at switches; zeta bounds the ratio between the
    two Lyapunov functions and k_star in (0, c1) is the margin reserved for
    switching losses. lambda_max_p / lambda_min_p are the extreme eigenvalues
    of the attack-phase Lyapunov matrix.
    """

    c1: float
    c2: float
    c3: float
    c4: float
    zeta: float
    k_star: float
    lambda_max_p: float = 1.0
    lambda_min_p: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.k_star < self.c1:
            raise ValueError(f"k_star must lie in (0, c1)=(0, {self.c1}), got {self.k_star}")
        if self.zeta < 1.0:
            raise ValueError(f"zeta must be >= 1, got {self.zeta}")
        if self.c4 <= 0.0:
            raise ValueError(f"c4 must be positive, got {self.c4}")
        if self.lambda_max_p <= 0.0 or self.lambda_min_p <= 0.0:
            raise ValueError("Lyapunov matrix eigenvalue bounds must be positive")

    def decay_margin(self, length_rate: float) -> float:
        """c5 = c1 - (c1 + c2) * length_rate - k_star: the net exponential
        decay rate left over after attacks at the given length rate; positive
        exactly when the length rate is below its safe bound."""
        return self.c1 - (self.c1 + self.c2) * length_rate - self.k_star


@dataclass(frozen=True)
class AdmissibilityReport:
    frequency: float
    length_rate: float
    frequency_bound: float
    length_rate_bound: float
    frequency_ok: bool
    length_ok: bool


def is_active(schedule: DoSSchedule, t: float) -> bool:
    """True iff t lies in some attack interval [h, h + tau)."""
    for h, tau in schedule.intervals:
        if h <= t < h + tau:
            return True
        if t < h:
            break
    return False


def total_attack_time(schedule: DoSSchedule, t: float) -> float:
    """Lebesgue measure of attacked time within [0, t]."""
    total = 0.0
    for h, tau in schedule.intervals:
        if h >= t:
            break
        total += min(h + tau, t) - max(h, 0.0)
    return total


def attack_frequency(schedule: DoSSchedule, t: float) -> float:
    """Number of attack intervals intersecting [0, t) divided by t."""
    if t <= 0.0:
        raise ValueError(f"attack frequency needs t > 0, got {t}")
    count = sum(1 for (h, _tau) in schedule.intervals if h < t)
    return count / t


def length_rate(schedule: DoSSchedule, t: float) -> float:
    """Fraction of [0, t] spent under attack; always in [0, 1]."""
    if t <= 0.0:
        raise ValueError(f"length rate needs t > 0, got {t}")
    return total_attack_time(schedule, t) / t


def safe_bounds(constants: StabilityConstants) -> tuple[float, float]:
    """(f_max, t_max): largest tolerable attack frequency and length rate.

    f_max = k_star / ln(zeta * c4);  t_max = (c1 - k_star) / (c1 + c2).
    Requires zeta * c4 > 1 so the switching loss logarithm is positive.
    """
    zc4 = constants.zeta * constants.c4
    if zc4 <= 1.0:
        raise ValueError(f"zeta * c4 must exceed 1 for a defined bound, got {zc4}")
    f_max = constants.k_star / float(np.log(zc4))
    t_max = (constants.c1 - constants.k_star) / (constants.c1 + constants.c2)
    return f_max, t_max


def admissible(
    schedule: DoSSchedule, t: float, constants: StabilityConstants
) -> AdmissibilityReport:
    """Compare the schedule's measured frequency / length rate to the bounds."""
    if t <= 0.0:
        raise ValueError(f"admissibility needs t > 0, got {t}")
    f_max, t_max = safe_bounds(constants)
    f = attack_frequency(schedule, t)
    lr = length_rate(schedule, t)
    return AdmissibilityReport(
        frequency=f,
        length_rate=lr,
        frequency_bound=f_max,
        length_rate_bound=t_max,
        frequency_ok=f <= f_max,
        length_ok=lr < t_max,
    )
