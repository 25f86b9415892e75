"""Stepping-kernel backend selection.

The compiled Cython kernel is preferred when it built and the problem uses
only the tagged parametric forms; otherwise the pure-python reference runs.
Set backend="python" or backend="compiled" to force one (forcing "compiled"
when it is unavailable or incompatible raises).
"""

from __future__ import annotations

from . import py_engine
from .common import StepProblem, StepResult

try:
    from . import _speedup  # type: ignore[attr-defined]

    HAVE_COMPILED = True
except ImportError:
    _speedup = None
    HAVE_COMPILED = False

__all__ = ["HAVE_COMPILED", "StepProblem", "StepResult", "run_steps", "resolve_backend"]


def resolve_backend(problem: StepProblem, backend: str = "auto") -> str:
    if backend not in ("auto", "python", "compiled"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "python":
        return "python"
    compatible = HAVE_COMPILED and problem.kernel_compatible()
    if backend == "compiled":
        if not HAVE_COMPILED:
            raise RuntimeError("compiled engine is not available (extension not built)")
        if not problem.kernel_compatible():
            raise RuntimeError(
                "compiled engine cannot run this problem (custom callables or "
                "unsupported basis); use backend='python'"
            )
        return "compiled"
    return "compiled" if compatible else "python"


def run_steps(problem: StepProblem, backend: str = "auto") -> tuple[StepResult, str]:
    chosen = resolve_backend(problem, backend)
    if chosen == "compiled":
        return _speedup.run_steps(problem), "compiled"
    return py_engine.run_steps(problem), "python"
