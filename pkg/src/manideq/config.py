"""Experiment configuration: nested dataclasses read from JSON.

Unknown keys and ill-typed values are rejected with the JSON pointer of the
offending entry, e.g. ``/objective/learning_rte``.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .targets import TARGET_NAMES
from .training import ObjectiveConfig


class ConfigError(ValueError):
    def __init__(self, pointer, message):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


@dataclass
class FlowConfig:
    n_layers: int = 4
    hidden_width: int = 32
    scale_cap: float = 3.0


@dataclass
class DequantizerConfig:
    family: str = "auto"  # resolved from the manifold and method
    hidden_width: int = 32
    init_mu: float = 0.0
    init_sigma: float = 0.5
    window: int = 3  # winding truncation for the modulus method


@dataclass
class DataConfig:
    fixed_samples: int = 0  # 0: fresh rejection samples every iteration
    proposal: str = "project"  # SO(n) Haar proposal: project or filter


@dataclass
class MetricsConfig:
    n: int = 10_000  # samples for KL / ESS / normalizer
    n_moments: int = 100_000  # samples for the moment errors
    k_eval: int = 100  # importance samples per marginal density evaluation
    grid: int = 60  # density_grid.csv resolution per axis


@dataclass
class ExperimentConfig:
    target: str
    seed: int
    method: str = "radial"
    flow: FlowConfig = field(default_factory=FlowConfig)
    dequantizer: DequantizerConfig = field(default_factory=DequantizerConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    out: str = "runs/experiment"

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def config_hash(self):
        """SHA-256 prefix of the canonical config, excluding the output directory."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SCALARS = {int: (int,), float: (int, float), str: (str,), bool: (bool,)}


def _resolve_type(f):
    t = f.type
    if isinstance(t, str):
        t = {"int": int, "float": float, "str": str, "bool": bool}.get(t, t)
    return t


def _build(cls, data, pointer):
    if not isinstance(data, dict):
        raise ConfigError(pointer, f"expected an object for {cls.__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigError(f"{pointer}/{key}", f"unknown key {key!r}")
    kwargs = {}
    for name, f in fields.items():
        ptr = f"{pointer}/{name}"
        if name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(ptr, "required key missing")
            continue
        value = data[name]
        t = _resolve_type(f)
        if dataclasses.is_dataclass(t):
            kwargs[name] = _build(t, value, ptr)
            continue
        if value is None and f.default is None:
            kwargs[name] = None
            continue
        allowed = _SCALARS.get(t)
        if allowed is not None:
            if isinstance(value, bool) and t is not bool or not isinstance(value, allowed):
                raise ConfigError(ptr, f"expected {t.__name__}, got {type(value).__name__}")
            value = t(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(pointer, str(exc)) from exc


def config_from_dict(data):
    cfg = _build(ExperimentConfig, data, "")
    if cfg.target not in TARGET_NAMES:
        raise ConfigError("/target", f"unknown target {cfg.target!r}; choose from {TARGET_NAMES}")
    if cfg.method not in ("radial", "modulus"):
        raise ConfigError("/method", f"unknown method {cfg.method!r}")
    if cfg.method == "modulus" and not cfg.target.startswith("torus"):
        raise ConfigError("/method", "modulus dequantization applies to torus targets only")
    if cfg.seed < 0:
        raise ConfigError("/seed", "seed must be non-negative")
    if cfg.metrics.n < 2 or cfg.metrics.k_eval < 1:
        raise ConfigError("/metrics", "need n >= 2 and k_eval >= 1")
    return cfg


def parse_config(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg, path):
    with open(path, "w") as fh:
        fh.write(cfg.to_json())
