"""EDM forward perturbation and reverse-time solvers.

With ``s(t) = 1`` and ``sigma(t) = t`` the forward kernel is ``x_t = x_0 + t z``,
the probability flow ODE is ``dx/dt = -t * score(x, t)`` and the reverse SDE is
``dx = -2t * score dt + sqrt(2t) dw``. All solvers act on batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, NumericalError
from .timegrid import karras_points

ScoreFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class OdeSolverConfig:
    method: str = "heun"
    steps: int = 18
    t_end: float = 0.002
    rho: float = 7.0

    def __post_init__(self):
        if self.method not in ("euler", "heun"):
            raise DomainError(f"unknown ODE method {self.method!r}")
        if self.steps < 1:
            raise DomainError(f"steps must be >= 1, got {self.steps}")
        if not self.t_end > 0:
            raise DomainError(f"t_end must be > 0, got {self.t_end}")


def perturb(x0, t: float, rng: np.random.Generator) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    if not t > 0:
        raise DomainError(f"t must be > 0, got {t}")
    return x0 + t * rng.standard_normal(x0.shape)


def time_steps(t_start: float, t_end: float, steps: int, rho: float = 7.0) -> np.ndarray:
    """Descending Karras-spaced times from ``t_start`` to ``t_end`` (``steps + 1`` values)."""
    if not t_start > t_end:
        raise DomainError(f"t_start ({t_start}) must exceed t_end ({t_end})")
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    return karras_points(t_end, t_start, rho, steps + 1)[::-1].copy()


def _checked(value, x, t):
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite score at t={t}", x=np.array(x), t=t)
    return value


def solve_pf_ode(score_fn: ScoreFn, x_t, t_start: float, cfg: OdeSolverConfig = OdeSolverConfig(), return_path: bool = False):
    """Integrate the PF-ODE from ``t_start`` down to ``cfg.t_end``.

    With ``return_path`` the result is ``(times, states)`` covering every step.
    """
    x = np.array(x_t, dtype=np.float64)
    ts = time_steps(t_start, cfg.t_end, cfg.steps, cfg.rho)
    path = [x.copy()] if return_path else None
    for t_cur, t_next in zip(ts[:-1], ts[1:]):
        h = t_next - t_cur
        d = -t_cur * _checked(score_fn(x, t_cur), x, t_cur)
        x_euler = x + h * d
        if cfg.method == "euler":
            x = x_euler
        else:
            d_next = -t_next * _checked(score_fn(x_euler, t_next), x_euler, t_next)
            x = x + h * 0.5 * (d + d_next)
        if return_path:
            path.append(x.copy())
    if return_path:
        return ts, np.stack(path)
    return x


def solve_reverse_sde(
    score_fn: ScoreFn,
    x_t,
    t_start: float,
    steps: int,
    rng: np.random.Generator,
    t_end: float = 0.002,
    rho: float = 7.0,
) -> np.ndarray:
    """Euler-Maruyama on the reverse SDE over the same time points as the ODE."""
    if not t_start > 0:
        raise DomainError(f"t_start must be > 0, got {t_start}")
    x = np.array(x_t, dtype=np.float64)
    ts = time_steps(t_start, t_end, steps, rho)
    for t_cur, t_next in zip(ts[:-1], ts[1:]):
        dt = t_cur - t_next
        s = _checked(score_fn(x, t_cur), x, t_cur)
        x = x + 2.0 * t_cur * dt * s + np.sqrt(2.0 * t_cur * dt) * rng.standard_normal(x.shape)
    return x
