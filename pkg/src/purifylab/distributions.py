"""Analytic data distributions with exact diffused scores.

A distribution is a finite mixture of isotropic Gaussians; a Dirac atom is a
Gaussian with ``scale == 0``. Under the EDM kernel ``x_t = x_0 + t * z`` each
component stays Gaussian with variance ``scale**2 + t**2``, so densities,
scores and posterior means are available in closed form for every ``t > 0``.

Points are arrays of shape ``(d,)`` or batches of shape ``(n, d)``; ``t`` may
be a scalar or an array of shape ``(n,)`` matching the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, UnsupportedError


@dataclass(frozen=True)
class MixtureComponent:
    center: tuple[float, ...]
    scale: float
    weight: float
    label: int

    def __post_init__(self):
        if self.scale < 0:
            raise DomainError(f"component scale must be >= 0, got {self.scale}")
        if not self.weight > 0:
            raise DomainError(f"component weight must be > 0, got {self.weight}")


@dataclass(frozen=True)
class MixtureDistribution:
    components: tuple[MixtureComponent, ...]
    dim: int
    # cached arrays, derived from components
    centers: np.ndarray = field(init=False, repr=False, compare=False)
    scales: np.ndarray = field(init=False, repr=False, compare=False)
    log_weights: np.ndarray = field(init=False, repr=False, compare=False)
    labels: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise DomainError("a mixture needs at least one component")
        if self.dim < 1:
            raise DomainError(f"dim must be positive, got {self.dim}")
        for c in comps:
            if len(c.center) != self.dim:
                raise DomainError(f"center {c.center} does not have length {self.dim}")
        total = sum(c.weight for c in comps)
        if abs(total - 1.0) > 1e-12:
            raise DomainError(f"component weights sum to {total!r}, not 1")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "centers", np.array([c.center for c in comps], dtype=np.float64))
        object.__setattr__(self, "scales", np.array([c.scale for c in comps], dtype=np.float64))
        object.__setattr__(self, "log_weights", np.log([c.weight for c in comps]))
        object.__setattr__(self, "labels", np.array([c.label for c in comps], dtype=np.int64))

    @property
    def is_discrete(self) -> bool:
        return bool(np.all(self.scales == 0.0))

    @property
    def label_set(self) -> tuple[int, ...]:
        return tuple(sorted(set(int(v) for v in self.labels)))

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` points; returns ``(points (n, d), labels (n,))``."""
        if n < 1:
            raise DomainError(f"n must be >= 1, got {n}")
        idx = rng.choice(len(self.components), size=n, p=np.exp(self.log_weights))
        z = rng.standard_normal((n, self.dim))
        points = self.centers[idx] + self.scales[idx, None] * z
        return points, self.labels[idx].copy()

    def _log_terms(self, x, t):
        # per-component log(w_k N(x; c_k, v_k I)) laid out (K, n) so reductions over
        # components run along contiguous rows; var is (K, 1) for scalar t
        x, t, single = _as_batch(x, t, self.dim)
        var = self.scales[:, None] ** 2 + t[None, :] ** 2
        sq = np.empty((len(self.components), x.shape[0]))
        for k, c in enumerate(self.centers):
            dk = x - c
            sq[k] = np.einsum("nd,nd->n", dk, dk)
        log_terms = self.log_weights[:, None] - 0.5 * sq / var - 0.5 * self.dim * np.log(2 * np.pi * var)
        return log_terms, var, x, single

    def diffused_log_density(self, x, t):
        """``log p_t(x)``: the mixture convolved with ``N(0, t^2 I)``."""
        log_terms, _, _, single = self._log_terms(x, t)
        out = logsumexp(log_terms, axis=0)
        return float(out[0]) if single else out

    def responsibilities(self, x, t) -> np.ndarray:
        """Posterior component probabilities, shape ``(n, K)``."""
        log_terms, *_ = self._log_terms(x, t)
        return _softmax(log_terms).T

    def score(self, x, t):
        """Exact ``grad_x log p_t(x)``."""
        log_terms, var, x, single = self._log_terms(x, t)
        w = _softmax(log_terms) / var  # (K, n)
        out = w.T @ self.centers - w.sum(axis=0)[:, None] * x
        return out[0] if single else out

    def posterior_mean(self, x, t):
        """``E[x_0 | x_t = x]`` by Tweedie's identity ``x + t^2 * score``."""
        xb, tb, single = _as_batch(x, t, self.dim)
        out = xb + (tb**2)[:, None] * self.score(xb, tb)
        return out[0] if single else out

    def nearest_data_point(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Closest atom and its label; ties go to the lowest component index."""
        if not self.is_discrete:
            raise UnsupportedError("nearest_data_point needs an all-Dirac mixture")
        xb = np.asarray(x, dtype=np.float64)
        single = xb.ndim == 1
        xb = np.atleast_2d(xb)
        if xb.shape[1] != self.dim:
            raise DomainError(f"point dimension {xb.shape[1]} != {self.dim}")
        d2 = ((xb[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)  # argmin returns the first minimum
        if single:
            return self.centers[idx[0]].copy(), self.labels[idx[0]]
        return self.centers[idx], self.labels[idx]


def _softmax(log_terms):
    # over axis 0 (components)
    e = np.exp(log_terms - log_terms.max(axis=0))
    return e / e.sum(axis=0)


def _as_batch(x, t, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if x.ndim == 0:
        x = x.reshape(1, 1)
        single = True
    x = np.atleast_2d(x)
    if x.shape[1] != dim:
        raise DomainError(f"point dimension {x.shape[1]} != {dim}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(~(t > 0)):
        raise DomainError(f"t must be > 0, got {t}")
    t = t.reshape(-1)  # a scalar t stays length 1 and broadcasts against the batch
    if t.shape[0] not in (1, x.shape[0]):
        raise DomainError("t must be a scalar or match the batch size")
    return x, t, single


def mixture(centers, weights=None, scales=0.0, labels=None) -> MixtureDistribution:
    """Convenience constructor from parallel lists."""
    centers = [tuple(float(v) for v in np.atleast_1d(c)) for c in centers]
    k = len(centers)
    weights = [1.0 / k] * k if weights is None else list(weights)
    scales = [float(scales)] * k if np.isscalar(scales) else list(scales)
    labels = list(range(k)) if labels is None else list(labels)
    comps = tuple(MixtureComponent(c, s, w, lab) for c, s, w, lab in zip(centers, scales, weights, labels))
    return MixtureDistribution(comps, len(centers[0]))


def two_dirac() -> MixtureDistribution:
    """Atoms at -1 (label 0) and +1 (label 1), equal weight."""
    return mixture([-1.0, 1.0], labels=[0, 1])


def single_dirac(at=0.0) -> MixtureDistribution:
    return mixture([at])


def four_dirac(offset=2.0) -> MixtureDistribution:
    """Atoms at (+-offset, +-offset), one label per quadrant."""
    o = offset
    return mixture([(-o, -o), (-o, o), (o, -o), (o, o)])


def four_gaussian(offset=2.0, scale=0.1) -> MixtureDistribution:
    o = offset
    return mixture([(-o, -o), (-o, o), (o, -o), (o, o)], scales=scale)


BUILTIN = {
    "two-dirac": two_dirac,
    "single-dirac": single_dirac,
    "four-dirac": four_dirac,
    "four-gaussian": four_gaussian,
}


def parse_distribution(text: str) -> MixtureDistribution:
    """Parse the key-value distribution format.

    ::

        dim = 2
        # one line per component
        component = center=2,2 scale=0 weight=0.25 label=3
    """
    dim = None
    comps = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DomainError(f"line {lineno}: expected 'key = value'")
        key, value = key.strip(), value.strip()
        if key == "dim":
            dim = int(value)
        elif key == "component":
            fields = dict(item.split("=", 1) for item in value.split())
            try:
                comps.append(
                    MixtureComponent(
                        center=tuple(float(v) for v in fields["center"].split(",")),
                        scale=float(fields.get("scale", 0.0)),
                        weight=float(fields["weight"]),
                        label=int(fields["label"]),
                    )
                )
            except KeyError as exc:
                raise DomainError(f"line {lineno}: component is missing {exc}") from None
        else:
            raise DomainError(f"line {lineno}: unknown key {key!r}")
    if dim is None:
        raise DomainError("distribution file does not set dim")
    return MixtureDistribution(tuple(comps), dim)


def format_distribution(dist: MixtureDistribution) -> str:
    lines = [f"dim = {dist.dim}"]
    for c in dist.components:
        center = ",".join(repr(v) for v in c.center)
        lines.append(f"component = center={center} scale={c.scale!r} weight={c.weight!r} label={c.label}")
    return "\n".join(lines) + "\n"
