"""Experiment configuration: INI file parsing and serialization.

The file is flat INI with one section per concern::

    [experiment]   seed
    [generator]    corpus shape (clients, rounds, rates, mixes)
    [features]     max_packets
    [training.federated]    client TrainConfig fields
    [training.centralized]  centralized TrainConfig fields
    [federation]   aggregator default, proximal mu, server optimizer,
                   buffer capacities
    [evaluation]   stability window, importance settings
    [io]           corpus path, output directory, checkpoint cadence

Unknown sections or keys are rejected (they are almost always typos), and
missing ones fall back to defaults, so a config file only needs the values
it overrides.  Service profiles are code-level defaults in `synth`; the
config exposes the corpus-shape knobs around them.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .fed import AGGREGATORS, FedConfig
from .nn import TrainConfig
from .synth import GenConfig


@dataclass
class EvalConfig:
    """Stability-window and feature-importance settings.

    The window is half-open: rounds ``window_start`` up to but excluding
    ``window_stop``.  ``importance_max_samples`` = 0 evaluates importance
    on the full test split.
    """

    window_start: int = 56
    window_stop: int = 112
    importance_repeats: int = 3
    importance_max_samples: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.window_start < self.window_stop:
            raise ValueError("stability window must satisfy 0 <= start < stop")
        if self.importance_repeats < 1:
            raise ValueError("importance_repeats must be >= 1")
        if self.importance_max_samples < 0:
            raise ValueError("importance_max_samples must be >= 0")


@dataclass
class IoConfig:
    corpus: str = "corpus.csv"
    out_dir: str = "out"
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


def _default_fed_train() -> TrainConfig:
    return TrainConfig(learning_rate=0.001, batch_size=64, epochs=10)


def _default_central_train() -> TrainConfig:
    return TrainConfig(learning_rate=0.01, batch_size=1024, epochs=10)


@dataclass
class ExperimentConfig:
    """Everything one experiment needs, before CLI flag overrides."""

    seed: int = 42
    aggregator: str = "fedavg"
    max_packets: int = 30
    gen: GenConfig = field(default_factory=GenConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    train_federated: TrainConfig = field(default_factory=_default_fed_train)
    train_centralized: TrainConfig = field(default_factory=_default_central_train)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    io: IoConfig = field(default_factory=IoConfig)

    def __post_init__(self) -> None:
        if self.aggregator not in AGGREGATORS:
            raise ValueError(
                f"unknown aggregator {self.aggregator!r}; valid: {', '.join(AGGREGATORS)}"
            )


class ConfigError(ValueError):
    """Raised for unparseable or unknown configuration content."""


# (section, key) -> (target attribute on ExperimentConfig, field name there).
# TrainConfig.seed is excluded: per-task seeds are derived at run time.
_GEN_KEYS = (
    "n_clients", "n_rounds", "round_seconds", "dirichlet_alpha",
    "rate_low", "rate_high", "night_floor_low", "night_floor_high",
    "phase_low", "phase_high",
)
_TRAIN_KEYS = (
    "learning_rate", "batch_size", "epochs", "dropout_p", "leaky_slope",
    "adam_beta1", "adam_beta2", "adam_eps", "early_stop_patience",
)
_FED_KEYS = (
    "prox_mu", "server_eta", "server_beta1", "server_beta2", "server_tau",
    "train_capacity", "val_capacity", "test_capacity", "min_val_for_early_stop",
)
_EVAL_KEYS = (
    "window_start", "window_stop", "importance_repeats", "importance_max_samples",
)
_IO_KEYS = ("corpus", "out_dir", "checkpoint_every")

_SECTIONS: dict[str, tuple[str, tuple[str, ...]]] = {
    "experiment": ("", ("seed", "aggregator", "max_packets")),
    "generator": ("gen", _GEN_KEYS),
    "features": ("", ("max_packets",)),
    "training.federated": ("train_federated", _TRAIN_KEYS),
    "training.centralized": ("train_centralized", _TRAIN_KEYS),
    "federation": ("fed", _FED_KEYS),
    "evaluation": ("evaluation", _EVAL_KEYS),
    "io": ("io", _IO_KEYS),
}


def _field_types(obj) -> dict[str, type]:
    return {f.name: type(getattr(obj, f.name)) for f in fields(obj)}


def _coerce(raw: str, target_type: type, section: str, key: str):
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: expected {target_type.__name__}, got {raw!r}"
        ) from None


def load_config(path: str | None = None) -> ExperimentConfig:
    """Load a config file over the defaults; ``None`` means all defaults."""
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(
                f"unknown config section [{section}]; valid: "
                + ", ".join(sorted(_SECTIONS))
            )
        attr, valid_keys = _SECTIONS[section]
        target = getattr(cfg, attr) if attr else cfg
        types = _field_types(target)
        for key, raw in parser.items(section):
            if key not in valid_keys:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}]; valid: "
                    + ", ".join(valid_keys)
                )
            setattr(target, key, _coerce(raw, types[key], section, key))
    # Re-run dataclass validation with the final values.
    try:
        for attr in ("gen", "fed", "train_federated", "train_centralized",
                     "evaluation", "io"):
            getattr(cfg, attr).__post_init__()
        cfg.__post_init__()
        if not 1 <= cfg.max_packets <= 30:
            raise ValueError("max_packets must be in 1..30")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def save_config(path: str, cfg: ExperimentConfig) -> None:
    """Serialize a config; load_config(save_config(cfg)) round-trips."""
    parser = configparser.ConfigParser()
    for section, (attr, keys) in _SECTIONS.items():
        if section == "features":
            continue  # max_packets is written under [experiment]
        target = getattr(cfg, attr) if attr else cfg
        parser[section] = {key: repr(getattr(target, key))
                           if isinstance(getattr(target, key), float)
                           else str(getattr(target, key))
                           for key in keys}
    with open(path, "w") as handle:
        parser.write(handle)
