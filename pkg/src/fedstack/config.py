"""Scenario configuration: JSON in, validated dataclass out.

Every knob a run needs lives here so that (file, seed) pins the whole
experiment. Validation is strict: unknown keys are errors, and every range
check names the offending key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .diffusion import STYLES
from .errors import ConfigError
from .federation import ALLOWED_RANKS

_HYBRID_RANGES = {
    "rho": (0.0, 1.0, "[0, 1)"),
    "mix_loras": (0.7, 1.0, "[0.7, 1.0]"),
    "local_scale": (0.75, 0.95, "[0.75, 0.95]"),
}


def _require_int(value, key, low=None, high=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    if low is not None and value < low:
        raise ConfigError(f"{key} must be >= {low}, got {value}")
    if high is not None and value > high:
        raise ConfigError(f"{key} must be <= {high}, got {value}")
    return value


def _require_number(value, key, low=None, high=None, open_high=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number, got {value!r}")
    value = float(value)
    if low is not None and value < low:
        raise ConfigError(f"{key} must be >= {low}, got {value}")
    if high is not None:
        if open_high and value >= high:
            raise ConfigError(f"{key} must be < {high}, got {value}")
        if not open_high and value > high:
            raise ConfigError(f"{key} must be <= {high}, got {value}")
    return value


def _check_keys(mapping, allowed, where):
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where}")


@dataclass(frozen=True)
class StyleBlock:
    style: str
    clients: int = 1
    rank: int = 16

    def __post_init__(self):
        if self.style not in STYLES:
            raise ConfigError(f"style must be one of {STYLES}, got {self.style!r}")
        _require_int(self.clients, "styles.clients", low=1)
        if self.rank not in ALLOWED_RANKS:
            raise ConfigError(
                f"styles.rank must be one of {ALLOWED_RANKS}, got {self.rank}")

    @classmethod
    def from_mapping(cls, raw, index):
        if not isinstance(raw, dict):
            raise ConfigError(f"styles[{index}] must be an object")
        _check_keys(raw, ("style", "clients", "rank"), f"styles[{index}]")
        if "style" not in raw:
            raise ConfigError(f"styles[{index}] is missing 'style'")
        return cls(raw["style"], raw.get("clients", 1), raw.get("rank", 16))

    def to_mapping(self):
        return {"style": self.style, "clients": self.clients, "rank": self.rank}


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.13

    def __post_init__(self):
        _require_int(self.steps, "schedule.steps", low=1)
        _require_number(self.beta_start, "schedule.beta_start", low=0.0)
        _require_number(self.beta_end, "schedule.beta_end", low=0.0, high=1.0)

    @classmethod
    def from_mapping(cls, raw):
        _check_keys(raw, ("steps", "beta_start", "beta_end"), "schedule")
        return cls(raw.get("steps", 50), raw.get("beta_start", 1e-4),
                   raw.get("beta_end", 0.13))

    def to_mapping(self):
        return {"steps": self.steps, "beta_start": self.beta_start,
                "beta_end": self.beta_end}


@dataclass(frozen=True)
class HybridGrid:
    """The (split ratio, server mix, client scale) cells a run evaluates."""

    rho: tuple = (0.2, 0.3)
    mix_loras: tuple = (0.7, 0.8, 0.9, 1.0)
    local_scale: tuple = (0.75, 0.85, 0.95)

    def __post_init__(self):
        for name in ("rho", "mix_loras", "local_scale"):
            values = getattr(self, name)
            if not values:
                raise ConfigError(f"hybrid.{name} must be a non-empty list")
            low, high, span = _HYBRID_RANGES[name]
            checked = tuple(
                _require_number(v, f"hybrid.{name}", low=low, high=high,
                                open_high=(name == "rho"))
                for v in values
            )
            object.__setattr__(self, name, checked)

    @classmethod
    def from_mapping(cls, raw):
        _check_keys(raw, ("rho", "mix_loras", "local_scale"), "hybrid")
        kwargs = {}
        for name in ("rho", "mix_loras", "local_scale"):
            if name in raw:
                if not isinstance(raw[name], list):
                    raise ConfigError(f"hybrid.{name} must be a list")
                kwargs[name] = tuple(raw[name])
        return cls(**kwargs)

    def to_mapping(self):
        return {"rho": list(self.rho), "mix_loras": list(self.mix_loras),
                "local_scale": list(self.local_scale)}

    def cells(self):
        for rho in self.rho:
            for mix in self.mix_loras:
                for scale in self.local_scale:
                    yield rho, mix, scale


@dataclass(frozen=True)
class PretrainConfig:
    """Backbone provenance: a public generic corpus the base learns first.

    The corpus blends an isotropic blob (scaled by `spread`) with a uniform
    mixture over every built-in style; `style_mix` is the mixture fraction.
    """

    epochs: int = 60
    samples: int = 512
    learning_rate: float = 0.05
    spread: float = 2.5
    style_mix: float = 0.5

    def __post_init__(self):
        _require_int(self.epochs, "pretrain.epochs", low=0)
        _require_int(self.samples, "pretrain.samples", low=2)
        _require_number(self.learning_rate, "pretrain.learning_rate", low=0.0)
        _require_number(self.spread, "pretrain.spread", low=0.0)
        _require_number(self.style_mix, "pretrain.style_mix", low=0.0, high=1.0)

    @classmethod
    def from_mapping(cls, raw):
        _check_keys(raw, ("epochs", "samples", "learning_rate", "spread",
                          "style_mix"), "pretrain")
        return cls(raw.get("epochs", 60), raw.get("samples", 512),
                   raw.get("learning_rate", 0.05), raw.get("spread", 2.5),
                   raw.get("style_mix", 0.5))

    def to_mapping(self):
        return {"epochs": self.epochs, "samples": self.samples,
                "learning_rate": self.learning_rate, "spread": self.spread,
                "style_mix": self.style_mix}


_TOP_KEYS = (
    "seed", "styles", "samples_per_client", "rounds", "epochs",
    "learning_rate", "batch_size", "tau_c", "tau_ded", "lambda_snt",
    "schedule", "hybrid", "pretrain", "token_epochs", "token_learning_rate",
    "eval_samples", "out_dir",
)

_DEFAULT_STYLES = (
    StyleBlock("ring"), StyleBlock("spiral"), StyleBlock("moons"),
)


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    styles: tuple = _DEFAULT_STYLES
    samples_per_client: int = 100
    rounds: int = 2
    epochs: int = 2
    learning_rate: float = 0.05
    batch_size: int = 2
    tau_c: float = 0.5
    tau_ded: float = 0.8
    lambda_snt: float = 4.0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    hybrid: HybridGrid = field(default_factory=HybridGrid)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    token_epochs: int = 150
    token_learning_rate: float = 0.3
    eval_samples: int = 500
    out_dir: str = "runs/scenario"

    def __post_init__(self):
        _require_int(self.seed, "seed", low=0)
        if not self.styles:
            raise ConfigError("styles must list at least one block")
        _require_int(self.samples_per_client, "samples_per_client", low=2)
        _require_int(self.rounds, "rounds", low=0)
        _require_int(self.epochs, "epochs", low=1)
        _require_number(self.learning_rate, "learning_rate", low=0.0)
        _require_int(self.batch_size, "batch_size", low=1)
        _require_number(self.tau_c, "tau_c", low=-1.0, high=1.0)
        _require_number(self.tau_ded, "tau_ded", low=0.0, high=2.0)
        _require_number(self.lambda_snt, "lambda_snt", low=0.0)
        _require_int(self.token_epochs, "token_epochs", low=0)
        _require_number(self.token_learning_rate, "token_learning_rate", low=0.0)
        _require_int(self.eval_samples, "eval_samples", low=2)
        if not isinstance(self.out_dir, str) or not self.out_dir:
            raise ConfigError("out_dir must be a non-empty string")

    @property
    def n_clients(self) -> int:
        return sum(block.clients for block in self.styles)

    @classmethod
    def from_mapping(cls, raw) -> "ScenarioConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        _check_keys(raw, _TOP_KEYS, "config")
        kwargs = {}
        for key in ("seed", "samples_per_client", "rounds", "epochs",
                    "learning_rate", "batch_size", "tau_c", "tau_ded",
                    "lambda_snt", "token_epochs", "token_learning_rate",
                    "eval_samples", "out_dir"):
            if key in raw:
                kwargs[key] = raw[key]
        if "styles" in raw:
            if not isinstance(raw["styles"], list) or not raw["styles"]:
                raise ConfigError("styles must be a non-empty list")
            kwargs["styles"] = tuple(
                StyleBlock.from_mapping(b, i) for i, b in enumerate(raw["styles"]))
        for key, sub in (("schedule", ScheduleConfig),
                         ("hybrid", HybridGrid),
                         ("pretrain", PretrainConfig)):
            if key in raw:
                if not isinstance(raw[key], dict):
                    raise ConfigError(f"{key} must be an object")
                kwargs[key] = sub.from_mapping(raw[key])
        return cls(**kwargs)

    def to_mapping(self) -> dict:
        return {
            "seed": self.seed,
            "styles": [b.to_mapping() for b in self.styles],
            "samples_per_client": self.samples_per_client,
            "rounds": self.rounds,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "tau_c": self.tau_c,
            "tau_ded": self.tau_ded,
            "lambda_snt": self.lambda_snt,
            "schedule": self.schedule.to_mapping(),
            "hybrid": self.hybrid.to_mapping(),
            "pretrain": self.pretrain.to_mapping(),
            "token_epochs": self.token_epochs,
            "token_learning_rate": self.token_learning_rate,
            "eval_samples": self.eval_samples,
            "out_dir": self.out_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_mapping(), indent=2, sort_keys=True) + "\n"


def load_config(path) -> ScenarioConfig:
    """Read and validate a scenario file. Errors name the offending key."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return ScenarioConfig.from_mapping(raw)
