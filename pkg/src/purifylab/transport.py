"""Monte Carlo transport between clean samples and their purifications.

The transport of a purifier ``d`` at noise ``sigma`` is ``E ||x - d(x + sigma z)||``
with ``x`` drawn from the data distribution. Markov's inequality bounds
``P(||x - x_hat|| > r)`` by ``transport / r``; :func:`markov_bound_report`
checks that bound on the same draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericalError
from .purifiers import purify
from .smoothing import derive_rng, map_blocks

DEFAULT_R_GRID = (0.1, 0.25, 0.5, 1.0, 2.0)
DRAW_BLOCK = 4096


@dataclass
class TransportEstimate:
    sigma: float
    n: int
    mean_dist: float
    std_err: float
    exceedance: list  # [(r, P(dist > r)), ...]


def estimate_from_distances(distances, sigma: float, r_grid) -> TransportEstimate:
    """Summaries of a sample of distances; sums are exactly rounded so draw order does not matter."""
    d = np.asarray(distances, dtype=np.float64)
    n = d.size
    if n < 2:
        raise DomainError(f"need at least 2 draws, got {n}")
    r_grid = [float(r) for r in r_grid]
    if not r_grid or r_grid != sorted(r_grid):
        raise DomainError("r_grid must be nonempty and sorted ascending")
    mean = math.fsum(d) / n
    var = math.fsum((d - mean) ** 2) / (n - 1)
    exceed = [(r, int(np.count_nonzero(d > r)) / n) for r in r_grid]
    return TransportEstimate(sigma, n, mean, math.sqrt(var / n), exceed)


def transport_distances(dist, kind, sigma: float, n: int, grid, seed, workers: int = 1, block: int = DRAW_BLOCK) -> np.ndarray:
    def run(b):
        size = min(block, n - b * block)
        rng = derive_rng(seed, b)
        x, _ = dist.sample(size, rng)
        noisy = x + sigma * rng.standard_normal(x.shape)
        try:
            x_hat = purify(kind, noisy, sigma, grid, rng)
        except NumericalError as e:
            raise NumericalError(f"purifier failed in draws {b * block}..{b * block + size - 1}: {e}", e.x, e.t) from e
        return np.linalg.norm(x - x_hat, axis=1)

    return np.concatenate(map_blocks(run, math.ceil(n / block), workers))


def estimate_transport(dist, kind, sigma: float, n: int, r_grid, grid, seed, workers: int = 1) -> TransportEstimate:
    if n < 2:
        raise DomainError(f"need at least 2 draws, got {n}")
    d = transport_distances(dist, kind, sigma, n, grid, seed, workers)
    return estimate_from_distances(d, sigma, r_grid)


@dataclass
class MarkovCheck:
    r: float
    exceedance: float
    bound: float
    slack: float
    passed: bool


def markov_bound_report(est: TransportEstimate, n_se: float = 3.0) -> list:
    out = []
    for r, p_hat in est.exceedance:
        if not r > 0:
            raise DomainError(f"radius must be > 0, got {r}")
        bound = est.mean_dist / r
        se = math.sqrt(p_hat * (1.0 - p_hat) / est.n) + est.std_err / r
        out.append(MarkovCheck(r, p_hat, bound, bound - p_hat, p_hat <= bound + n_se * se))
    return out


def transport_comparison(dist, kinds: dict, sigmas, n: int, r_grid, grid, seed, workers: int = 1) -> dict:
    """``{(name, sigma): TransportEstimate}``; every estimate reuses ``seed`` so rows are paired."""
    if not kinds or not sigmas:
        raise DomainError("need at least one purifier and one sigma")
    return {
        (name, float(s)): estimate_transport(dist, kind, s, n, r_grid, grid, seed, workers)
        for name, kind in kinds.items()
        for s in sigmas
    }
