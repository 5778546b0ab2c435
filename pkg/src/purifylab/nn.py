"""Time-conditioned MLP consistency model with hand-written backprop.

The network output is

    D(x, t) = c_skip(t) * x + c_out(t) * F(c_in(t) * x, embed(t))

with ``c_skip(eps) = 1`` and ``c_out(eps) = 0``, so ``D(x, eps) == x`` holds
exactly for any parameters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError, NumericalError

CHECKPOINT_FORMAT = "purifylab-consistency-net"
CHECKPOINT_VERSION = 1


def default_frequencies(n: int = 8) -> np.ndarray:
    # wavelengths geometric from 1 to 1000 in log t
    return 1.0 / np.geomspace(1.0, 1000.0, n)


def time_embedding(t: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    phase = np.log(t)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


@dataclass
class ConsistencyNet:
    weights: list  # (fan_in, fan_out) arrays
    biases: list
    data_dim: int
    activation: str = "tanh"
    sigma_data: float = 0.5
    eps: float = 0.002
    freqs: np.ndarray = field(default_factory=default_frequencies)
    version: int = 0  # bumped on every parameter update; guards stale caches

    def __post_init__(self):
        if self.activation not in ("tanh", "relu"):
            raise DomainError(f"unknown activation {self.activation!r}")
        if self.weights[-1].shape[1] != self.data_dim:
            raise DomainError("last layer must output data_dim values")
        if self.weights[0].shape[0] != self.data_dim + 2 * len(self.freqs):
            raise DomainError("first layer fan-in must be data_dim + embedding size")

    @property
    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, values) -> None:
        for dst, src in zip(self.params, values):
            dst[...] = src
        self.version += 1

    def copy(self) -> "ConsistencyNet":
        return ConsistencyNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.data_dim,
            self.activation,
            self.sigma_data,
            self.eps,
            self.freqs.copy(),
        )

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    def __call__(self, x, t):
        return net_forward(self, x, t)


def init_net(
    data_dim: int,
    hidden=(128, 128, 128),
    activation: str = "tanh",
    sigma_data: float = 0.5,
    eps: float = 0.002,
    rng: np.random.Generator | None = None,
    zero_final: bool = True,
    n_freqs: int = 8,
) -> ConsistencyNet:
    rng = np.random.default_rng(0) if rng is None else rng
    freqs = default_frequencies(n_freqs)
    sizes = [data_dim + 2 * n_freqs, *hidden, data_dim]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_final:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in)
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return ConsistencyNet(weights, biases, data_dim, activation, sigma_data, eps, freqs)


def boundary_scalings(t, sigma_data: float, eps: float):
    """``(c_skip, c_out, c_in)`` at times ``t``."""
    s2 = sigma_data**2
    c_skip = s2 / ((t - eps) ** 2 + s2)
    c_out = sigma_data * (t - eps) / np.sqrt(t**2 + s2)
    c_in = 1.0 / np.sqrt(t**2 + s2)
    return c_skip, c_out, c_in


@dataclass
class ForwardCache:
    net_id: int
    version: int
    inputs: list  # input to every layer
    pre: list  # pre-activation of every hidden layer
    c_out: np.ndarray


def _act(z, kind):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(z, a, kind):
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(np.float64)


def net_forward(net: ConsistencyNet, x, t, return_cache: bool = False):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != net.data_dim:
        raise DomainError(f"input dimension {x.shape[1]} != net data_dim {net.data_dim}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    c_skip, c_out, c_in = boundary_scalings(t, net.sigma_data, net.eps)
    h = np.concatenate([c_in[:, None] * x, time_embedding(t, net.freqs)], axis=1)
    inputs, pre = [], []
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = _act(z, net.activation)
    inputs.append(h)
    f = h @ net.weights[-1] + net.biases[-1]
    out = c_skip[:, None] * x + c_out[:, None] * f
    if single:
        out = out[0]
    if return_cache:
        return out, ForwardCache(id(net), net.version, inputs, pre, c_out)
    return out


def net_backward(net: ConsistencyNet, grad_out, cache: ForwardCache) -> list:
    """Parameter gradients (aligned with ``net.params``) for an upstream output gradient."""
    if cache.net_id != id(net) or cache.version != net.version:
        raise ContractError("forward cache does not belong to the current parameters")
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64)) * cache.c_out[:, None]
    grads = []
    for layer in range(len(net.weights) - 1, -1, -1):
        h = cache.inputs[layer]
        grads.append(g.sum(axis=0))
        grads.append(h.T @ g)
        if layer > 0:
            gh = g @ net.weights[layer].T
            z = cache.pre[layer - 1]
            g = gh * _act_grad(z, cache.inputs[layer], net.activation)
    grads.reverse()  # now [W0, b0, W1, b1, ...]
    return grads


@dataclass
class EmaShadow:
    decay: float
    params: list

    @classmethod
    def of(cls, net: ConsistencyNet, decay: float) -> "EmaShadow":
        if not 0.0 <= decay < 1.0:
            raise DomainError(f"EMA decay must be in [0, 1), got {decay}")
        return cls(decay, [p.copy() for p in net.params])

    def update(self, net: ConsistencyNet) -> None:
        for shadow, live in zip(self.params, net.params):
            shadow *= self.decay
            shadow += (1.0 - self.decay) * live

    def as_net(self, like: ConsistencyNet) -> ConsistencyNet:
        out = like.copy()
        out.set_params(self.params)
        return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_num: float = 1e-8
    step: int = 0
    m: list | None = None
    v: list | None = None


def adam_step(state: AdamState, params: list, grads: list):
    """Bias-corrected Adam update applied to ``params`` in place."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise DomainError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericalError("non-finite gradient; update skipped")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps_num)
    return params, state


def gradient_check(net: ConsistencyNet, x, t, n_coords: int = 100, rng=None, rel_step: float | None = None) -> float:
    """Max relative error between backprop and finite differences.

    The scalar probed is ``sum(w * D(x, t))`` for a fixed random ``w``. Smooth
    nets use the fourth-order central stencil with a moderate step (a two-point
    stencil is roundoff-limited on coordinates with small gradients). ReLU nets are
    piecewise linear, so the two-point stencil is exact between kinks and a tiny
    step keeps it from straddling one.
    """
    smooth = net.activation != "relu"
    if rel_step is None:
        rel_step = 1e-3 if smooth else 1e-6
    stencil = ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12)) if smooth else ((1, 0.5), (-1, -0.5))
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    w_out = rng.standard_normal(x.shape)

    def loss():
        return float(np.sum(w_out * net_forward(net, x, t)))

    _, cache = net_forward(net, x, t, return_cache=True)
    grads = net_backward(net, w_out, cache)
    params = net.params
    sizes = np.array([p.size for p in params])
    flat_idx = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for k in flat_idx:
        which = int(np.searchsorted(offsets, k, side="right") - 1)
        p, local = params[which], np.unravel_index(k - offsets[which], params[which].shape)
        orig = p[local]
        h = rel_step * max(1.0, abs(orig))
        acc = 0.0
        for c, weight in stencil:
            p[local] = orig + c * h
            acc += weight * loss()
        p[local] = orig
        fd = acc / h
        an = grads[which][local]
        denom = max(abs(fd), abs(an), 1e-8)
        worst = max(worst, abs(fd - an) / denom)
    return worst


def to_checkpoint(net: ConsistencyNet) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "data_dim": net.data_dim,
        "activation": net.activation,
        "sigma_data": net.sigma_data,
        "eps": net.eps,
        "freqs": net.freqs.tolist(),
        "layers": [
            {"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in zip(net.weights, net.biases)
        ],
    }
    return json.dumps(doc, sort_keys=True)


def from_checkpoint(text: str) -> ConsistencyNet:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise DomainError("not a supported consistency-net checkpoint")
    weights = [np.array(layer["weight"], dtype=np.float64).reshape(layer["shape"]) for layer in doc["layers"]]
    biases = [np.array(layer["bias"], dtype=np.float64) for layer in doc["layers"]]
    return ConsistencyNet(
        weights,
        biases,
        doc["data_dim"],
        doc["activation"],
        doc["sigma_data"],
        doc["eps"],
        np.array(doc["freqs"], dtype=np.float64),
    )


def save_checkpoint(net: ConsistencyNet, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_checkpoint(net))


def load_checkpoint(path) -> ConsistencyNet:
    with open(path) as fh:
        return from_checkpoint(fh.read())
