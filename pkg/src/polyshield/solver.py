"""Damped least squares (Levenberg-Marquardt) for small dense systems."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 200
    residual_tolerance: float = 1e-10
    step_tolerance: float = 1e-12
    initial_damping: float = 1e-3

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.residual_tolerance <= 0 or self.step_tolerance <= 0:
            raise ValueError("tolerances must be > 0")


class SolveResult(NamedTuple):
    x: np.ndarray
    converged: bool
    residual_norm: float
    iterations: int


def _damped_step(J: np.ndarray, r: np.ndarray, damping: float) -> np.ndarray:
    rows, cols = J.shape
    if rows < cols:
        # (J^T J + d I)^-1 J^T = J^T (J J^T + d I)^-1, cheaper when underdetermined
        y = np.linalg.solve(J @ J.T + damping * np.eye(rows), r)
        return -(J.T @ y)
    return -np.linalg.solve(J.T @ J + damping * np.eye(cols), J.T @ r)


def levenberg_marquardt(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    x0,
    config: SolverConfig = SolverConfig(),
) -> SolveResult:
    """Minimise ``||residual(x)||`` starting from ``x0``.

    The damping is ``lambda * s * I`` where ``s`` is the mean diagonal of
    ``J^T J`` at ``x0``; ``lambda`` is divided by 10 after an accepted step and
    multiplied by 10 after a rejected one.  Converged means the residual norm
    fell to ``residual_tolerance`` or a step shrank below ``step_tolerance``.
    A non-finite Jacobian ends the run as not converged.
    """
    x = np.array(x0, dtype=np.float64)
    r = residual(x)
    cost = float(r @ r)
    if not np.isfinite(cost):
        return SolveResult(x, False, float("inf"), 0)
    lam = config.initial_damping
    scale = None
    for it in range(1, config.max_iterations + 1):
        if np.sqrt(cost) <= config.residual_tolerance:
            return SolveResult(x, True, float(np.sqrt(cost)), it - 1)
        J = jacobian(x)
        if not np.all(np.isfinite(J)):
            return SolveResult(x, False, float(np.sqrt(cost)), it)
        if scale is None:
            scale = float(np.mean(np.einsum("ij,ij->j", J, J))) or 1.0
        try:
            step = _damped_step(J, r, lam * scale)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        x_new = x + step
        r_new = residual(x_new)
        cost_new = float(r_new @ r_new)
        if np.isfinite(cost_new) and cost_new < cost:
            x, r, cost = x_new, r_new, cost_new
            lam = max(lam / 10.0, 1e-15)
        else:
            lam *= 10.0
            if lam > 1e16:
                return SolveResult(x, False, float(np.sqrt(cost)), it)
        if np.linalg.norm(step) <= config.step_tolerance:
            return SolveResult(x, True, float(np.sqrt(cost)), it)
    converged = np.sqrt(cost) <= config.residual_tolerance
    return SolveResult(x, bool(converged), float(np.sqrt(cost)), config.max_iterations)
