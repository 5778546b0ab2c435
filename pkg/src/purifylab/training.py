"""Consistency distillation from the exact-score PF-ODE, and fine-tuning on the purification loss.

Fine-tuning minimizes ``E ||x - D(x + sigma z, t*_sigma)||`` under a chosen
distance, with ``sigma`` drawn from the smoothing noise levels. On
low-dimensional data the perceptual distance is the l2 distance between
embeddings from a frozen random two-layer network.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .distributions import MixtureDistribution
from .errors import DomainError, NumericalError, TrainingError
from .nn import AdamState, ConsistencyNet, EmaShadow, adam_step, net_backward, net_forward
from .timegrid import KarrasGrid

_TINY = 1e-12


@dataclass
class FeatureMap:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    digest: str = ""

    def __post_init__(self):
        for p in (self.w1, self.b1, self.w2, self.b2):
            p.setflags(write=False)
        if not self.digest:
            self.digest = self._hash()
        if self.w2.shape[1] < 1:
            raise DomainError("feature map must output at least one feature")

    def _hash(self) -> str:
        h = hashlib.sha256()
        for p in (self.w1, self.b1, self.w2, self.b2):
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    def verify(self) -> bool:
        return self._hash() == self.digest

    def _hidden(self, x):
        return np.tanh(np.atleast_2d(x) @ self.w1 + self.b1)

    def __call__(self, x) -> np.ndarray:
        return self._hidden(x) @ self.w2 + self.b2

    def vjp(self, x, g) -> np.ndarray:
        """``J(x)^T g`` row by row."""
        h = self._hidden(x)
        return ((g @ self.w2.T) * (1.0 - h * h)) @ self.w1.T


def make_feature_map(dim: int, hidden: int = 64, out: int = 32, seed: int = 1234) -> FeatureMap:
    rng = np.random.default_rng(seed)
    return FeatureMap(
        rng.standard_normal((dim, hidden)) / np.sqrt(dim),
        rng.uniform(-1.0, 1.0, hidden),
        rng.standard_normal((hidden, out)) / np.sqrt(hidden),
        np.zeros(out),
    )


@dataclass(frozen=True)
class LossKind:
    kind: str = "l2"
    feature: FeatureMap | None = None

    def __post_init__(self):
        if self.kind not in ("l1", "l2", "feature"):
            raise DomainError(f"unknown loss {self.kind!r}")
        if self.kind == "feature" and self.feature is None:
            raise DomainError("feature loss needs a feature map")


def loss_kind(name: str, dim: int, seed: int = 1234) -> LossKind:
    return LossKind("feature", make_feature_map(dim, seed=seed)) if name == "feature" else LossKind(name)


def distance_and_grad(pred, target, kind: LossKind):
    """Per-row distances and their gradient with respect to ``pred``."""
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    if pred.shape != target.shape:
        raise DomainError(f"shape mismatch {pred.shape} vs {target.shape}")
    if kind.kind == "l1":
        diff = pred - target
        return np.abs(diff).sum(axis=1), np.sign(diff)
    if kind.kind == "l2":
        diff = pred - target
        norm = np.linalg.norm(diff, axis=1)
        return norm, diff / np.maximum(norm, _TINY)[:, None]
    fmap = kind.feature
    diff = fmap(pred) - fmap(target)
    norm = np.linalg.norm(diff, axis=1)
    return norm, fmap.vjp(pred, diff / np.maximum(norm, _TINY)[:, None])


def perceptual_distance(a, b, kind: LossKind):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    d, _ = distance_and_grad(a, b, kind)
    return float(d[0]) if a.ndim <= 1 else d


@dataclass
class DistillConfig:
    grid: KarrasGrid = field(default_factory=KarrasGrid)
    batch: int = 256
    iters: int = 4000
    ema_decay: float = 0.95
    lr: float = 1e-3
    loss: LossKind = field(default_factory=LossKind)
    seed: int = 0
    log_every: int = 500

    def __post_init__(self):
        if self.iters < 0 or self.batch < 1:
            raise DomainError("need iters >= 0 and batch >= 1")


@dataclass
class FinetuneConfig:
    sigmas: tuple = (0.25, 0.5, 1.0)
    batch: int = 256
    iters: int = 2000
    lr: float = 1e-4
    loss: LossKind = field(default_factory=LossKind)
    seed: int = 0
    schedule: str = "discrete"  # or "continuous": U[min(sigmas), max(sigmas)]
    log_every: int = 500

    def __post_init__(self):
        if not self.sigmas or any(not s > 0 for s in self.sigmas):
            raise DomainError("sigmas must be a nonempty list of positive values")
        if self.schedule not in ("discrete", "continuous"):
            raise DomainError(f"unknown schedule {self.schedule!r}")
        if self.iters < 0 or self.batch < 1:
            raise DomainError("need iters >= 0 and batch >= 1")


def _heun_step(dist, x, t_cur, t_next):
    d = -t_cur[:, None] * dist.score(x, t_cur)
    h = (t_next - t_cur)[:, None]
    x_euler = x + h * d
    d_next = -t_next[:, None] * dist.score(x_euler, t_next)
    return x + 0.5 * h * (d + d_next)


def _step(net, adam, x_in, t_in, target, loss, it):
    out, cache = net_forward(net, x_in, t_in, return_cache=True)
    dists, grad = distance_and_grad(out, target, loss)
    value = float(dists.mean())
    if not np.isfinite(value):
        raise TrainingError(f"loss became non-finite at iteration {it}", it)
    grads = net_backward(net, grad / len(dists), cache)
    try:
        adam_step(adam, net.params, grads)
    except NumericalError as exc:
        raise TrainingError(f"non-finite gradient at iteration {it}", it) from exc
    net.version += 1
    return value


def distill(dist: MixtureDistribution, net: ConsistencyNet, cfg: DistillConfig, log=None) -> ConsistencyNet:
    """Consistency distillation with an EMA target; returns the EMA network."""
    if net.data_dim != dist.dim:
        raise DomainError(f"net dimension {net.data_dim} != distribution dimension {dist.dim}")
    net = net.copy()
    pts = cfg.grid.points
    rng = np.random.default_rng(cfg.seed)
    ema = EmaShadow.of(net, cfg.ema_decay)
    adam = AdamState(lr=cfg.lr)
    last = None
    for it in range(cfg.iters):
        x0, _ = dist.sample(cfg.batch, rng)
        i = rng.integers(0, len(pts) - 1, size=cfg.batch)
        t_lo, t_hi = pts[i], pts[i + 1]
        x_hi = x0 + t_hi[:, None] * rng.standard_normal(x0.shape)
        x_lo = _heun_step(dist, x_hi, t_hi, t_lo)
        target = net_forward(_ema_view(ema, net), x_lo, t_lo)
        try:
            last = _step(net, adam, x_hi, t_hi, target, cfg.loss, it)
        except TrainingError as exc:
            exc.last_loss = last
            raise
        ema.update(net)
        if log is not None and cfg.log_every and ((it + 1) % cfg.log_every == 0 or it + 1 == cfg.iters):
            log({"phase": "distill", "iter": it + 1, "loss": last})
    return ema.as_net(net)


def _ema_view(ema: EmaShadow, net: ConsistencyNet) -> ConsistencyNet:
    # shares arrays with the shadow; read-only use within one iteration
    ws = ema.params[0::2]
    bs = ema.params[1::2]
    return ConsistencyNet(ws, bs, net.data_dim, net.activation, net.sigma_data, net.eps, net.freqs)


def sample_sigmas(cfg: FinetuneConfig, rng: np.random.Generator, size: int) -> np.ndarray:
    sig = np.asarray(cfg.sigmas, dtype=np.float64)
    if cfg.schedule == "discrete":
        return sig[rng.integers(0, sig.size, size=size)]
    return rng.uniform(sig.min(), sig.max(), size=size)


def finetune(dist: MixtureDistribution, net: ConsistencyNet, grid: KarrasGrid, cfg: FinetuneConfig, log=None) -> ConsistencyNet:
    """Gradient steps on ``loss(x, D(x + sigma z, t*_sigma))``; returns a new network."""
    if net.data_dim != dist.dim:
        raise DomainError(f"net dimension {net.data_dim} != distribution dimension {dist.dim}")
    if max(cfg.sigmas) > grid.t_max:
        raise DomainError("fine-tuning sigmas must lie within the grid horizon")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(lr=cfg.lr)
    last = None
    for it in range(cfg.iters):
        x, _ = dist.sample(cfg.batch, rng)
        sigma = sample_sigmas(cfg, rng, cfg.batch)
        x_noisy = x + sigma[:, None] * rng.standard_normal(x.shape)
        t_star = grid.select_timestep(sigma)
        try:
            last = _step(net, adam, x_noisy, t_star, x, cfg.loss, it)
        except TrainingError as exc:
            exc.last_loss = last
            raise
        if log is not None and cfg.log_every and ((it + 1) % cfg.log_every == 0 or it + 1 == cfg.iters):
            log({"phase": "finetune", "iter": it + 1, "loss": last})
    return net
