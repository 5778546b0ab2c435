"""Randomized-smoothing prediction and certification through a purifier.

Votes are drawn in fixed-size blocks. Block ``b`` of phase ``p`` always uses the
generator derived from ``(seed, p, b)``, so tallies do not depend on how many
workers evaluate the blocks.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DomainError
from .purifiers import Purifier, purify
from .timegrid import KarrasGrid

ABSTAIN = -1
VOTE_BLOCK = 1000

# rational approximation of the normal quantile (Acklam), refined below
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02, 1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02, 6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00, -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00, 3.754408661907416e00)
_P_LOW = 0.02425


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _lower_quantile(q: float) -> float:
    # valid for 0 < q <= 0.5; returns z <= 0 with Phi(z) = q
    if q < _P_LOW:
        r = math.sqrt(-2.0 * math.log(q))
        z = (((((_C[0] * r + _C[1]) * r + _C[2]) * r + _C[3]) * r + _C[4]) * r + _C[5]) / (
            (((_D[0] * r + _D[1]) * r + _D[2]) * r + _D[3]) * r + 1.0
        )
    else:
        u = q - 0.5
        r = u * u
        z = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * u / (
            ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        )
    # Newton refinement on the lower tail, where erfc keeps full relative precision
    for _ in range(2):
        err = normal_cdf(z) - q
        z -= err / (math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi))
    return z


def inverse_normal_cdf(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise DomainError(f"p must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return _lower_quantile(p)
    return -_lower_quantile(1.0 - p)  # 1 - p is exact for p >= 0.5


def clopper_pearson_lower(k: int, n: int, alpha: float) -> float:
    """Exact one-sided (1 - alpha) lower confidence bound on a binomial proportion."""
    if n < 1 or not 0 <= k <= n:
        raise DomainError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    if k == 0:
        return 0.0
    return float(stats.beta.ppf(alpha, k, n - k + 1))


def binom_test_two_sided(k: int, n: int) -> float:
    """Two-sided exact test of p = 1/2: doubled smaller tail, capped at 1."""
    if n < 0 or not 0 <= k <= n:
        raise DomainError(f"need 0 <= k <= n, got k={k}, n={n}")
    if n == 0:
        return 1.0
    m = max(k, n - k)
    return min(1.0, 2.0 * float(stats.binom.sf(m - 1, n, 0.5)))


# ---------------------------------------------------------------- classifiers


@dataclass
class NearestCentroid:
    centers: np.ndarray
    labels: tuple

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        c = np.asarray(self.centers, dtype=np.float64)
        idx = np.argmin(((x[:, None, :] - c[None]) ** 2).sum(axis=2), axis=1)
        return np.asarray(self.labels)[idx]


@dataclass
class Logistic:
    """Linear scores ``x @ weights.T + bias``; the argmax row index is the label."""

    weights: np.ndarray
    bias: np.ndarray

    @property
    def labels(self):
        return tuple(range(len(self.bias)))

    def __call__(self, x) -> np.ndarray:
        scores = np.atleast_2d(x) @ np.asarray(self.weights).T + self.bias
        return np.argmax(scores, axis=1)


@dataclass
class MlpClassifier:
    weights: list
    biases: list

    @property
    def labels(self):
        return tuple(range(len(self.biases[-1])))

    def __call__(self, x) -> np.ndarray:
        h = np.atleast_2d(x)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
        return np.argmax(h @ self.weights[-1] + self.biases[-1], axis=1)


@dataclass
class Constant:
    label: int
    labels: tuple = (0, 1)

    def __call__(self, x) -> np.ndarray:
        return np.full(np.atleast_2d(x).shape[0], self.label)


def nearest_centroid_for(dist) -> NearestCentroid:
    return NearestCentroid(dist.centers.copy(), tuple(int(v) for v in dist.labels))


# ---------------------------------------------------------------- seeding


def derive_seed(seed, *key: int) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(key))
    return np.random.SeedSequence(seed, spawn_key=tuple(key))


def derive_rng(seed, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *key)))


def map_blocks(fn, n_blocks: int, workers: int = 1) -> list:
    """Ordered ``[fn(b) for b in range(n_blocks)]``, optionally on a thread pool."""
    if workers <= 1 or n_blocks <= 1:
        return [fn(b) for b in range(n_blocks)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_blocks)))


# ---------------------------------------------------------------- voting


def sample_votes(purifier: Purifier, classifier, x, sigma: float, n: int, grid: KarrasGrid, seed, phase: int = 0, workers: int = 1, block: int = VOTE_BLOCK) -> dict:
    """Tally classifier labels over ``n`` purified noisy copies of ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    label_list = list(classifier.labels)

    def run(b):
        size = min(block, n - b * block)
        rng = derive_rng(seed, phase, b)
        noisy = x[None, :] + sigma * rng.standard_normal((size, x.size))
        out = classifier(purify(purifier, noisy, sigma, grid, rng))
        return [int(np.count_nonzero(out == lab)) for lab in label_list]

    tallies = map_blocks(run, math.ceil(n / block), workers)
    return {lab: int(sum(t[i] for t in tallies)) for i, lab in enumerate(label_list)}


def _ranked(counts: dict) -> list:
    # most votes first, ties to the lower label id
    return sorted(counts, key=lambda lab: (-counts[lab], lab))


def predict(purifier, classifier, x, sigma, n, alpha, grid, seed, workers: int = 1) -> int:
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    counts = sample_votes(purifier, classifier, x, sigma, n, grid, seed, phase=0, workers=workers)
    ranked = _ranked(counts)
    n_a = counts[ranked[0]]
    n_b = counts[ranked[1]] if len(ranked) > 1 else 0
    if binom_test_two_sided(n_a, n_a + n_b) <= alpha:
        return ranked[0]
    return ABSTAIN


@dataclass
class CertifyOutcome:
    prediction: int
    radius: float
    p_a_lower: float
    counts0: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    sigma: float = 0.0

    @property
    def abstained(self) -> bool:
        return self.prediction == ABSTAIN


def certify(
    purifier,
    classifier,
    x,
    sigma: float,
    n0: int,
    n_cert: int,
    alpha: float,
    grid: KarrasGrid,
    seed,
    workers: int = 1,
    lower_bound=clopper_pearson_lower,
) -> CertifyOutcome:
    """Pick the top class from ``n0`` votes, then bound its probability from ``n_cert`` fresh votes."""
    if n0 < 1 or n_cert < 1:
        raise DomainError(f"n0 and n_cert must be >= 1, got {n0}, {n_cert}")
    counts0 = sample_votes(purifier, classifier, x, sigma, n0, grid, seed, phase=1, workers=workers)
    top = _ranked(counts0)[0]
    counts = sample_votes(purifier, classifier, x, sigma, n_cert, grid, seed, phase=2, workers=workers)
    p_lower = float(lower_bound(counts[top], n_cert, alpha))
    if p_lower > 0.5:
        return CertifyOutcome(top, sigma * inverse_normal_cdf(p_lower), p_lower, counts0, counts, sigma)
    return CertifyOutcome(ABSTAIN, 0.0, p_lower, counts0, counts, sigma)


def certified_accuracy_curve(outcomes, eps_grid) -> np.ndarray:
    """Fraction of ``(outcome, true_label)`` pairs that are correct with radius >= eps."""
    outcomes = list(outcomes)
    if not outcomes:
        raise DomainError("certified_accuracy_curve needs at least one outcome")
    correct = np.array([o.prediction == y and o.prediction != ABSTAIN for o, y in outcomes])
    radii = np.array([o.radius for o, _ in outcomes])
    eps = np.asarray(eps_grid, dtype=np.float64)
    return (correct[None, :] & (radii[None, :] >= eps[:, None])).mean(axis=1)


def best_over_sigma(curves: dict) -> np.ndarray:
    return np.max(np.stack([np.asarray(c) for c in curves.values()]), axis=0)
