"""Karras time discretization and noise-level to timestep selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


def karras_points(eps: float, t_max: float, rho: float, n: int) -> np.ndarray:
    """``t_i = (eps^(1/rho) + (i-1)/(n-1) * (t_max^(1/rho) - eps^(1/rho)))^rho``, i = 1..n."""
    lo, hi = eps ** (1.0 / rho), t_max ** (1.0 / rho)
    frac = np.arange(n, dtype=np.float64) / (n - 1)
    pts = (lo + frac * (hi - lo)) ** rho
    # pin the ends: the closed form collapses to eps and t_max but rounding can drift an ulp
    pts[0], pts[-1] = eps, t_max
    return pts


@dataclass(frozen=True)
class KarrasGrid:
    eps: float = 0.002
    t_max: float = 80.0
    rho: float = 7.0
    n: int = 18
    points: np.ndarray = field(init=False, repr=False, compare=False)
    midpoints: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (0 < self.eps < self.t_max):
            raise DomainError(f"need 0 < eps < t_max, got eps={self.eps}, t_max={self.t_max}")
        if self.n < 2:
            raise DomainError(f"grid needs n >= 2, got {self.n}")
        if not self.rho > 0:
            raise DomainError(f"rho must be positive, got {self.rho}")
        pts = karras_points(self.eps, self.t_max, self.rho, self.n)
        pts.setflags(write=False)
        mids = 0.5 * (pts[:-1] + pts[1:])
        mids.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "midpoints", mids)

    def index_of(self, sigma):
        """Index of the cell ``((t_{i-1}+t_i)/2, (t_i+t_{i+1})/2]`` holding ``sigma``.

        Values outside the outermost midpoints clamp to the first/last point.
        """
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(~(sigma > 0)):
            raise DomainError(f"sigma must be > 0, got {sigma}")
        # number of midpoints strictly below sigma; cells are closed above
        idx = np.searchsorted(self.midpoints, sigma, side="left")
        return int(idx) if idx.ndim == 0 else idx

    def select_timestep(self, sigma):
        return self.points[self.index_of(sigma)]


def build_grid(eps: float = 0.002, t_max: float = 80.0, rho: float = 7.0, n: int = 18) -> KarrasGrid:
    return KarrasGrid(eps, t_max, rho, n)


def select_timestep(grid: KarrasGrid, sigma):
    return grid.select_timestep(sigma)
