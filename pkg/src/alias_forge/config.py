"""Run configuration: defaults, INI-style config files, CLI overrides and seed substreams.

A config file is either sectioned::

    [trace]
    lambda = 64
    noise_sigma = 0.01

or a flat list of dotted keys (``trace.lambda = 64``). Unknown keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .ga import GAConfig
from .metrics import FITNESS_MODES
from .netgen import PRESETS, NetGenConfig
from .trace import TraceParams

THREADS_ENV = "ALIAS_FORGE_THREADS"
STREAMS = {"netgen": 1, "ga": 2, "noise": 3, "attack-split": 4}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSettings:
    predictor: str = "GaussianNB"
    knn_k: int = 5
    train_count: int = 500
    train_fraction: float = 0.8


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    ga: GAConfig = field(default_factory=GAConfig)
    netgen: NetGenConfig = field(default_factory=NetGenConfig)
    trace: TraceParams = field(default_factory=TraceParams)
    attack: AttackSettings = field(default_factory=AttackSettings)
    netgen_preset: str = "default"

    @property
    def fitness_mode(self) -> str:
        return self.ga.fitness_mode

    def substream(self, name: str, *salt: int) -> int:
        """Seed for one named component stream, derived from the global seed."""
        if name not in STREAMS:
            raise KeyError(f"unknown seed stream {name!r}")
        ss = np.random.SeedSequence([self.seed, STREAMS[name], *salt])
        return int(ss.generate_state(1, dtype=np.uint32)[0])

    def resolved(self) -> "RunConfig":
        """Component configs with their seeds filled from the named substreams."""
        return dataclasses.replace(
            self,
            ga=dataclasses.replace(self.ga, seed=self.substream("ga")),
            netgen=dataclasses.replace(self.netgen, seed=self.substream("netgen")),
            # trace.seed salts the noise stream rather than replacing it
            trace=dataclasses.replace(self.trace, seed=self.substream("noise", self.trace.seed)),
        )

    def as_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "netgen_preset": self.netgen_preset,
            "ga": dataclasses.asdict(self.ga),
            "netgen": dataclasses.asdict(self.netgen),
            "trace": dataclasses.asdict(self.trace),
            "attack": dataclasses.asdict(self.attack),
        }

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(",", " ").split())


# dotted key -> (section attribute, field name, parser)
KEYS: dict[str, tuple[str, str, Any]] = {
    "run.seed": ("", "seed", int),
    "trace.lambda": ("trace", "lam", float),
    "trace.kappa": ("trace", "kappa", float),
    "trace.bandwidth": ("trace", "bandwidth", float),
    "trace.elem_bytes": ("trace", "elem_bytes", int),
    "trace.noise_sigma": ("trace", "noise_sigma", float),
    "trace.seed": ("trace", "seed", int),
    "trace.include_fused": ("trace", "include_fused", _bool),
    "ga.population_size": ("ga", "population_size", int),
    "ga.generations": ("ga", "generations", int),
    "ga.budget": ("ga", "budget", float),
    "ga.mutation_sigma": ("ga", "mutation_sigma", float),
    "ga.mutation_rate": ("ga", "mutation_rate", float),
    "fitness.mode": ("ga", "fitness_mode", str),
    "fitness.hinge": ("ga", "fitness_mode", lambda s: "hinge" if _bool(s) else "verbatim"),
    "netgen.preset": ("", "netgen_preset", str),
    "netgen.conv_range": ("netgen", "conv_range", _ints),
    "netgen.fc_range": ("netgen", "fc_range", _ints),
    "netgen.channel_choices": ("netgen", "channel_choices", _ints),
    "netgen.fc_dim_choices": ("netgen", "fc_dim_choices", _ints),
    "netgen.p_residual": ("netgen", "p_residual", float),
    "netgen.p_depthwise": ("netgen", "p_depthwise", float),
    "netgen.p_pool": ("netgen", "p_pool", float),
    "attack.predictor": ("attack", "predictor", str),
    "attack.knn_k": ("attack", "knn_k", int),
    "attack.train_count": ("attack", "train_count", int),
    "attack.train_fraction": ("attack", "train_fraction", float),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flatten a config file into ``{dotted.key: raw value}``."""
    body = text
    stripped = [ln.strip() for ln in text.splitlines()]
    first = next((ln for ln in stripped if ln and not ln.startswith(("#", ";"))), "")
    if not first.startswith("["):
        body = "[__flat__]\n" + text
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(body, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    out: dict[str, str] = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            dotted = key if section == "__flat__" else f"{section}.{key}"
            if "." not in dotted:
                dotted = f"run.{dotted}"
            out[dotted] = value
    return out


def apply_settings(cfg: RunConfig, settings: dict[str, Any], source: str = "<config>") -> RunConfig:
    preset = settings.get("netgen.preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"{source}: unknown netgen preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = dataclasses.replace(cfg, netgen=PRESETS[preset], netgen_preset=preset)
    groups: dict[str, dict[str, Any]] = {}
    for key, raw in settings.items():
        if key not in KEYS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        section, name, parse = KEYS[key]
        try:
            value = parse(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key}: {exc}") from None
        groups.setdefault(section, {})[name] = value
    try:
        top = groups.pop("", {})
        cfg = dataclasses.replace(cfg, **top)
        for section, changes in groups.items():
            cfg = dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **changes)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if cfg.ga.fitness_mode not in FITNESS_MODES:
        raise ConfigError(f"{source}: fitness mode must be one of {FITNESS_MODES}")
    return cfg


def load_config(path: str | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        cfg = apply_settings(cfg, parse_config_text(text, path), path)
    if overrides:
        cfg = apply_settings(cfg, {k: v for k, v in overrides.items() if v is not None}, "command line")
    return cfg


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n
