"""Purifier backends behind one call: ``purify(kind, x_noisy, sigma, grid, rng)``.

Every kind maps a batch of noisy points at smoothing level ``sigma`` to purified
points. Kinds that need a diffusion time use ``t* = grid.select_timestep(sigma)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import OdeSolverConfig, solve_pf_ode, solve_reverse_sde
from .distributions import MixtureDistribution
from .errors import DomainError
from .nn import ConsistencyNet, net_forward
from .timegrid import KarrasGrid

ORACLE_SOLVER = OdeSolverConfig("heun", 400)


class Purifier:
    name = "purifier"
    uses_rng = False
    uses_timestep = True

    def apply(self, x_noisy: np.ndarray, sigma: float, t_star: float, rng) -> np.ndarray:
        raise NotImplementedError


@dataclass
class OnestepPosteriorMean(Purifier):
    """Exact Tweedie posterior mean ``E[x_0 | x_t]`` at the selected timestep."""

    dist: MixtureDistribution
    name = "onestep"

    def apply(self, x_noisy, sigma, t_star, rng):
        return self.dist.posterior_mean(x_noisy, t_star)


@dataclass
class PfOde(Purifier):
    dist: MixtureDistribution
    cfg: OdeSolverConfig = field(default_factory=OdeSolverConfig)
    name = "pfode"

    def apply(self, x_noisy, sigma, t_star, rng):
        if t_star <= self.cfg.t_end:
            return np.array(x_noisy, dtype=np.float64)
        return solve_pf_ode(self.dist.score, x_noisy, t_star, self.cfg)


@dataclass
class ReverseSde(Purifier):
    dist: MixtureDistribution
    steps: int = 18
    t_end: float = 0.002
    name = "sde"
    uses_rng = True

    def apply(self, x_noisy, sigma, t_star, rng):
        if t_star <= self.t_end:
            return np.array(x_noisy, dtype=np.float64)
        return solve_reverse_sde(self.dist.score, x_noisy, t_star, self.steps, rng, t_end=self.t_end)


@dataclass
class ConsistencyOracle(PfOde):
    """Fine-step PF-ODE to ``eps``: what a perfect consistency model returns."""

    cfg: OdeSolverConfig = ORACLE_SOLVER
    name = "cm-oracle"


@dataclass
class ConsistencyNetPurifier(Purifier):
    net: ConsistencyNet
    name = "cm-net"

    def apply(self, x_noisy, sigma, t_star, rng):
        x = np.asarray(x_noisy)
        if x.shape[-1] != self.net.data_dim:
            raise DomainError(f"net expects dimension {self.net.data_dim}, got {x.shape[-1]}")
        return net_forward(self.net, x, max(t_star, self.net.eps))


@dataclass
class Identity(Purifier):
    """No purification; the smoothing noise passes straight through."""

    name = "identity"
    uses_timestep = False

    def apply(self, x_noisy, sigma, t_star, rng):
        return np.array(x_noisy, dtype=np.float64)


@dataclass
class NearestAtom(Purifier):
    """Snap to the closest Dirac atom (a perfect nearest-neighbor purifier)."""

    dist: MixtureDistribution
    name = "nearest"
    uses_timestep = False

    def apply(self, x_noisy, sigma, t_star, rng):
        return self.dist.nearest_data_point(np.atleast_2d(x_noisy))[0]


@dataclass
class Shift(Purifier):
    """Deliberately broken purifier adding a constant offset; exercises failure detection."""

    offset: float = 10.0
    name = "shift"
    uses_timestep = False

    def apply(self, x_noisy, sigma, t_star, rng):
        return np.array(x_noisy, dtype=np.float64) + self.offset


def purify(kind: Purifier, x_noisy, sigma: float, grid: KarrasGrid, rng=None) -> np.ndarray:
    """Purify ``x_noisy`` (point or batch) that carries Gaussian noise of std ``sigma``."""
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    t_star = float(grid.select_timestep(sigma)) if kind.uses_timestep else float(sigma)
    return kind.apply(x_noisy, sigma, t_star, rng)


@dataclass(frozen=True)
class VpMapping:
    alpha_bar: float
    sigma: float


def vp_to_edm(alpha_bar: float) -> VpMapping:
    """Noise level of the EDM process equivalent to a VP marginal with ``alpha_bar``.

    ``x_vp = sqrt(alpha_bar) * (x_0 + sigma * z)`` with ``sigma^2 = (1 - alpha_bar) / alpha_bar``,
    so the one-step reconstruction ``(x_vp - sqrt(1 - alpha_bar) * eps_hat) / sqrt(alpha_bar)``
    equals the Tweedie mean at ``x_vp / sqrt(alpha_bar)`` once ``eps_hat = -sigma * score``.
    """
    if not 0.0 < alpha_bar < 1.0:
        raise DomainError(f"alpha_bar must lie in (0, 1), got {alpha_bar}")
    return VpMapping(alpha_bar, math.sqrt((1.0 - alpha_bar) / alpha_bar))


def edm_to_alpha_bar(sigma: float) -> float:
    return 1.0 / (1.0 + sigma * sigma)


def ddpm_onestep(x_vp, eps_pred, alpha_bar: float) -> np.ndarray:
    return (np.asarray(x_vp) - math.sqrt(1.0 - alpha_bar) * np.asarray(eps_pred)) / math.sqrt(alpha_bar)


def make_purifier(name: str, dist=None, net=None, solver=None, sde_steps: int = 18, grid=None, shift=10.0):
    """Build a purifier from its CLI name."""
    t_end = grid.eps if grid is not None else 0.002
    if name == "onestep":
        return OnestepPosteriorMean(dist)
    if name == "pfode":
        cfg = solver or OdeSolverConfig(t_end=t_end)
        return PfOde(dist, cfg)
    if name == "sde":
        return ReverseSde(dist, sde_steps, t_end)
    if name == "cm-oracle":
        return ConsistencyOracle(dist, OdeSolverConfig("heun", ORACLE_SOLVER.steps, t_end))
    if name == "cm-net":
        if net is None:
            raise DomainError("cm-net purifier needs a checkpoint")
        return ConsistencyNetPurifier(net)
    if name == "identity":
        return Identity()
    if name == "nearest":
        return NearestAtom(dist)
    if name == "shift":
        return Shift(shift)
    raise DomainError(f"unknown purifier {name!r}")
