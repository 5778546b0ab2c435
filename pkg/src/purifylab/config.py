"""Experiment configuration: key-value files with command-line overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import DomainError

# fields that do not influence any numeric result
_UNHASHED = {"workers", "out_dir", "config"}


def _floats(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


def _names(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


@dataclass
class ExperimentConfig:
    # data
    dist: str = "two-dirac"
    dist_file: str | None = None
    # Karras grid
    t_eps: float = 0.002
    t_max: float = 80.0
    rho: float = 7.0
    grid_n: int = 18
    # purification
    purifier: str = "cm-oracle"
    purifiers: tuple = ("onestep", "pfode", "sde", "cm-oracle")
    solver: str = "heun"
    ode_steps: int = 18
    sde_steps: int = 18
    checkpoint: str | None = None
    shift: float = 10.0
    classifier: str = "nearest-centroid"
    # smoothing
    sigmas: tuple = (0.25, 0.5, 1.0)
    n0: int = 100
    n_cert: int = 10000
    alpha: float = 0.001
    num_points: int = 50
    eps_grid: tuple = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)
    # transport
    n: int = 100000
    r_grid: tuple = (0.1, 0.25, 0.5, 1.0, 2.0)
    # training
    iters: int | None = None
    batch: int = 256
    lr: float | None = None
    ema_decay: float = 0.95
    loss: str | None = None
    schedule: str = "discrete"
    checkpoint_out: str | None = None
    n_eval: int = 2000
    # ode demo
    num_trajectories: int = 20
    t_start: float = 1.0
    t_end: float = 1e-4
    demo_steps: int = 400
    # run
    seed: int = 0
    workers: int = 1
    out_dir: str = "results"
    config: str | None = None

    def __post_init__(self):
        for name in ("sigmas", "eps_grid", "r_grid"):
            setattr(self, name, _floats(getattr(self, name)))
        self.purifiers = _names(self.purifiers)
        if self.dist_file is not None and not Path(self.dist_file).is_file():
            raise DomainError(f"distribution file not found: {self.dist_file}")
        if self.config is not None and not Path(self.config).is_file():
            raise DomainError(f"config file not found: {self.config}")

    def config_hash(self) -> str:
        payload = {k: v for k, v in dataclasses.asdict(self).items() if k not in _UNHASHED}
        if self.dist_file is not None:
            payload["dist_file"] = Path(self.dist_file).read_text()
        blob = json.dumps(payload, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, value: str):
    kind = FIELD_TYPES[name]
    if value in ("none", "None", ""):
        return None
    if kind.startswith("int"):
        return int(value)
    if kind.startswith("float"):
        return float(value)
    return value


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; dashes and underscores are interchangeable."""
    out = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in FIELD_TYPES:
            raise DomainError(f"{path}:{lineno}: unrecognized line {raw!r}")
        out[key] = _coerce(key, value.strip())
    return out


def resolve(overrides: dict) -> ExperimentConfig:
    """Defaults, then the config file (if any), then explicit overrides; later wins."""
    values = {}
    cfg_path = overrides.get("config")
    if cfg_path is not None:
        if not Path(cfg_path).is_file():
            raise DomainError(f"config file not found: {cfg_path}")
        values.update(read_config_file(cfg_path))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)
