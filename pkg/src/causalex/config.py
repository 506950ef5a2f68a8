"""Experiment configuration: nested YAML sections, validated, with flag overrides.

Precedence: built-in defaults < config file < command-line overrides.
Defaults are the synthetic-benchmark settings: eta 0.1, learning rate 1e-3,
kappa 350, beta 0.5 linear / 3 nonlinear, edge flip probability 0.8 in the
underestimation runs, trunk widths 32 and 8.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class EnvConfig:
    n: int = 10
    c: int = 2
    edge_keep_prob: float = 0.2
    transition: str = "linear"
    seed: int = 0
    num_actions: int = 8
    change_at: int | None = None
    underestimation: bool = False
    flip_prob: float = 0.8


@dataclass
class DiscoveryConfig:
    alpha: float = 0.05
    max_cond_size: int = 3
    period: int = 1000
    kappa: int = 350
    lam: float = 1.0
    null_method: str = "gamma"
    epsilon: float = 1e-3
    heads_only: bool = False


@dataclass
class ModelConfig:
    arch: str = "auto"
    hidden: list[int] = field(default_factory=lambda: [32, 8])
    activation: str = "tanh"
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 64


@dataclass
class PolicyConfig:
    hidden: int = 64
    lr: float = 1e-3
    batch_size: int = 64
    memory_capacity: int = 100_000
    target_sync: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.2


@dataclass
class ExplorerConfig:
    eta: float = 0.1
    beta: float | None = None
    gamma: float = 0.99
    horizon: int = 1000
    episodes: int = 1
    holdout_size: int = 200
    graph_mode: str = "discover"
    reward: str = "mse"
    seed: int = 0
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def resolved_beta(self, transition: str) -> float:
        if self.beta is not None:
            return self.beta
        return 0.5 if transition == "linear" else 3.0


@dataclass
class OutputConfig:
    directory: str | None = None
    formats: list[str] = field(default_factory=lambda: ["csv"])
    record_timing: bool = False


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    explorer: ExplorerConfig = field(default_factory=ExplorerConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        """Git-style blob hash of the canonical JSON form."""
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()

    def model_arch(self) -> str:
        if self.model.arch != "auto":
            return self.model.arch
        return "linear" if self.env.transition == "linear" else "mlp"


_CHOICES = {
    "env.transition": ("linear", "nonlinear"),
    "discovery.null_method": ("gamma", "permutation"),
    "model.arch": ("auto", "linear", "mlp"),
    "model.activation": ("tanh", "relu", "linear"),
    "model.optimizer": ("adam", "sgd"),
    "explorer.graph_mode": ("discover", "truth", "dense"),
    "explorer.reward": ("mse", "nll"),
}


def _check(cond: bool, key: str, expected: str, value) -> None:
    if not cond:
        raise ConfigError(f"{key}: expected {expected}, got {value!r}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    e, d, m, x, p = cfg.env, cfg.discovery, cfg.model, cfg.explorer, cfg.explorer.policy
    _check(e.n >= 1, "env.n", "an integer >= 1", e.n)
    _check(e.c >= 1, "env.c", "an integer >= 1", e.c)
    _check(0 < e.edge_keep_prob <= 1, "env.edge_keep_prob", "a value in (0, 1]", e.edge_keep_prob)
    _check(e.num_actions >= 1, "env.num_actions", "an integer >= 1", e.num_actions)
    _check(e.change_at is None or e.change_at >= 1, "env.change_at", "null or a step >= 1", e.change_at)
    _check(0 <= e.flip_prob <= 1, "env.flip_prob", "a value in [0, 1]", e.flip_prob)
    _check(0 <= d.alpha <= 1, "discovery.alpha", "a value in [0, 1]", d.alpha)
    _check(d.max_cond_size >= 0, "discovery.max_cond_size", "an integer >= 0", d.max_cond_size)
    _check(d.period >= 1, "discovery.period", "an integer >= 1", d.period)
    _check(d.kappa >= 1, "discovery.kappa", "an integer >= 1", d.kappa)
    _check(d.epsilon > 0, "discovery.epsilon", "a positive value", d.epsilon)
    _check(all(h >= 1 for h in m.hidden), "model.hidden", "positive layer widths", m.hidden)
    _check(m.lr > 0, "model.lr", "a positive value", m.lr)
    _check(m.batch_size >= 1, "model.batch_size", "an integer >= 1", m.batch_size)
    _check(x.eta > 0, "explorer.eta", "a positive value", x.eta)
    _check(x.beta is None or x.beta >= 0, "explorer.beta", "null or a value >= 0", x.beta)
    _check(0 <= x.gamma < 1, "explorer.gamma", "a value in [0, 1)", x.gamma)
    _check(x.horizon >= 1, "explorer.horizon", "an integer >= 1", x.horizon)
    _check(x.episodes >= 1, "explorer.episodes", "an integer >= 1", x.episodes)
    _check(x.holdout_size >= 1, "explorer.holdout_size", "an integer >= 1", x.holdout_size)
    _check(p.hidden >= 1, "explorer.policy.hidden", "an integer >= 1", p.hidden)
    _check(p.lr > 0, "explorer.policy.lr", "a positive value", p.lr)
    _check(p.batch_size >= 1, "explorer.policy.batch_size", "an integer >= 1", p.batch_size)
    _check(p.memory_capacity >= p.batch_size, "explorer.policy.memory_capacity",
           "at least the policy batch size", p.memory_capacity)
    _check(p.target_sync >= 1, "explorer.policy.target_sync", "an integer >= 1", p.target_sync)
    _check(0 <= p.eps_end <= p.eps_start <= 1, "explorer.policy.eps_start",
           "0 <= eps_end <= eps_start <= 1", (p.eps_start, p.eps_end))
    _check(0 <= p.eps_fraction <= 1, "explorer.policy.eps_fraction", "a value in [0, 1]", p.eps_fraction)
    _check(set(cfg.output.formats) <= {"csv", "json"}, "output.formats", "a subset of [csv, json]",
           cfg.output.formats)
    for key, choices in _CHOICES.items():
        section, name = key.split(".")
        value = getattr(getattr(cfg, section), name)
        _check(value in choices, key, f"one of {list(choices)}", value)
    return cfg


def _coerce(key: str, value, default, annotation: str):
    """Convert a parsed value to the field's type, naming ``key`` on failure."""
    if value is None:
        if "None" in annotation:
            return None
        raise ConfigError(f"{key}: expected {annotation}, got null")
    try:
        if annotation.startswith("bool"):
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError
                return low in ("true", "1", "yes")
            if not isinstance(value, (bool, int)):
                raise ValueError
            return bool(value)
        if annotation.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if annotation.startswith("float"):
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if annotation.startswith("list[int]"):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            return [int(v) for v in value]
        if annotation.startswith("list[str]"):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            return [str(v) for v in value]
        if annotation.startswith("str"):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {annotation}, got {value!r}") from None
    return value


def _apply(obj, data: dict, prefix: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {data!r}")
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        full = f"{prefix}.{key}" if prefix else str(key)
        if key not in fields:
            raise ConfigError(f"{full}: unknown key")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _apply(current, value, full)
        else:
            setattr(obj, key, _coerce(full, value, current, str(fields[key].type)))


def set_dotted(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    cur = data
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value


def parse_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Load defaults, then the YAML file (if any), then dotted-key overrides."""
    cfg = ExperimentConfig()
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config: not valid YAML ({exc})") from None
        if data is not None:
            _apply(cfg, data, "")
    if overrides:
        nested: dict = {}
        for key, value in overrides.items():
            set_dotted(nested, key, value)
        _apply(cfg, nested, "")
    return validate(cfg)


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    _apply(cfg, data, "")
    return validate(cfg)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
