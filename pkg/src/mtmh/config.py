"""Experiment configuration: one dataclass per pipeline section.

Every field has a default, unknown keys are rejected, and each section can be
hashed independently so that pipeline stages can be cached by the sections
they actually depend on.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration values."""


@dataclass
class WorldConfig:
    n_items: int = 10_000
    n_users: int = 2_000
    n_l1: int = 8
    l2_per_l1: int = 8
    zipf_exponent: float = 1.0
    raw_dim: int = 32
    content_noise: float = 1.0
    dense_dim: int = 16
    dense_noise: float = 0.5
    fresh_fraction: float = 0.05
    # simulation step at which fresh items enter the catalog
    fresh_step: int = 160
    # mean number of L2 interests per user
    interests_per_user: float = 3.0
    popularity_bias_mean: float = 0.3
    session_coherence_mean: float = 0.8
    # engagement communities: a latent item grouping that is absent from raw content
    n_communities: int = 16
    community_affinity_mean: float = 0.7

    def validate(self) -> None:
        _require(self.n_items >= 100, "world.n_items", "must be >= 100")
        _require(self.n_users >= 50, "world.n_users", "must be >= 50")
        _require(self.n_l1 >= 2, "world.n_l1", "must be >= 2")
        _require(self.l2_per_l1 >= 2, "world.l2_per_l1", "must be >= 2")
        _require(self.zipf_exponent >= 0, "world.zipf_exponent", "must be >= 0")
        _require(self.raw_dim >= 1, "world.raw_dim", "must be >= 1")
        _require(self.content_noise >= 0, "world.content_noise", "must be >= 0")
        _require(self.dense_dim >= 2, "world.dense_dim", "must be >= 2")
        _require(0 <= self.fresh_fraction < 1, "world.fresh_fraction", "must be in [0, 1)")
        _require(self.fresh_step >= 0, "world.fresh_step", "must be >= 0")
        _require(self.interests_per_user >= 1, "world.interests_per_user", "must be >= 1")
        _require(0 <= self.popularity_bias_mean <= 1, "world.popularity_bias_mean", "must be in [0, 1]")
        _require(0 <= self.session_coherence_mean <= 1, "world.session_coherence_mean",
                 "must be in [0, 1]")
        _require(self.n_communities >= 1, "world.n_communities", "must be >= 1")
        _require(0 <= self.community_affinity_mean <= 1, "world.community_affinity_mean",
                 "must be in [0, 1]")


@dataclass
class SimConfig:
    steps: int = 400
    t1_fraction: float = 0.8
    events_per_user: float = 24.0
    session_length: float = 6.0
    min_uih_len: int = 5
    max_retries: int = 20

    def validate(self) -> None:
        _require(self.steps >= 2, "sim.steps", "must be >= 2")
        _require(0 < self.t1_fraction < 1, "sim.t1_fraction", "must be in (0, 1)")
        _require(self.events_per_user >= 2, "sim.events_per_user", "must be >= 2")
        _require(self.session_length >= 1, "sim.session_length", "must be >= 1")
        _require(self.min_uih_len >= 1, "sim.min_uih_len", "must be >= 1")
        _require(self.max_retries >= 1, "sim.max_retries", "must be >= 1")


@dataclass
class EncoderConfig:
    dim: int = 128
    hidden: int = 128
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    temperature: float = 0.2
    normalize: bool = False

    def validate(self) -> None:
        _require(self.dim >= 1, "encoder.dim", "must be >= 1")
        _require(self.hidden >= 1, "encoder.hidden", "must be >= 1")
        _require(self.epochs >= 1, "encoder.epochs", "must be >= 1")
        _require(self.batch_size >= 2, "encoder.batch_size", "must be >= 2")
        _require(self.learning_rate > 0, "encoder.learning_rate", "must be > 0")
        _require(self.temperature > 0, "encoder.temperature", "must be > 0")


@dataclass
class PairGenConfig:
    window: int = 10
    L: int = 64
    uniform_mix: float = 0.5
    sim_threshold: float = 0.5
    sim_boost: float = 2.0
    propensity_exponent: float = 0.5
    propensity_clip: float = 10.0
    max_retries: int = 100

    def validate(self) -> None:
        _require(self.window >= 1, "pairs.window", "must be >= 1")
        _require(self.L >= 1, "pairs.L", "must be >= 1")
        _require(0 <= self.uniform_mix <= 1, "pairs.uniform_mix", "must be in [0, 1]")
        _require(self.sim_boost >= 1, "pairs.sim_boost", "must be >= 1")
        _require(self.propensity_exponent >= 0, "pairs.propensity_exponent", "must be >= 0")
        _require(self.propensity_clip > 0, "pairs.propensity_clip", "must be > 0")
        _require(self.max_retries >= 1, "pairs.max_retries", "must be >= 1")


@dataclass
class ModelConfig:
    d_s: int = 64
    d_d: int = 16
    d_e: int = 128
    dense_hidden: int = 32
    head_hidden: tuple[int, ...] = (48, 48)
    dtype: str = "float32"

    def validate(self) -> None:
        for name in ("d_s", "d_d", "d_e", "dense_hidden"):
            _require(getattr(self, name) >= 1, f"model.{name}", "must be >= 1")
        _require(all(h >= 1 for h in self.head_hidden), "model.head_hidden", "sizes must be >= 1")
        _require(self.dtype in ("float32", "float64"), "model.dtype", "must be float32 or float64")


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 128
    epochs: int = 1
    w_r: float = 0.5
    max_tracked: int = 1000
    min_fresh_updates: int = 8

    def validate(self) -> None:
        _require(self.learning_rate >= 0, "train.learning_rate", "must be >= 0")
        _require(self.batch_size >= 1, "train.batch_size", "must be >= 1")
        _require(self.epochs >= 1, "train.epochs", "must be >= 1")
        _require(self.w_r >= 0, "train.w_r", "must be >= 0")


@dataclass
class ServeConfig:
    k: int = 64
    kmeans_iters: int = 20
    normalize: bool = True
    C: int = 8
    K_ann: int = 200
    K: int = 30
    alpha: float = 50.0
    triggers_per_user: int = 10
    final_topk_per_user: int = 100
    history_len: int = 10
    beta: float = 1.0

    def validate(self) -> None:
        _require(self.k >= 1, "serve.k", "must be >= 1")
        _require(1 <= self.C <= self.k, "serve.C", "must satisfy 1 <= C <= k")
        _require(self.K >= 1, "serve.K", "must be >= 1")
        _require(self.K <= self.K_ann, "serve.K", "must be <= K_ann")
        _require(0 <= self.alpha <= 100, "serve.alpha", "must be in [0, 100]")
        _require(self.triggers_per_user >= 1, "serve.triggers_per_user", "must be >= 1")
        _require(self.final_topk_per_user >= 1, "serve.final_topk_per_user", "must be >= 1")
        _require(self.history_len >= 1, "serve.history_len", "must be >= 1")


@dataclass
class EvalConfig:
    ks: tuple[int, ...] = (5, 20, 50, 100)
    mode: str = "mtmh"

    def validate(self) -> None:
        _require(len(self.ks) > 0 and all(k >= 1 for k in self.ks), "eval.ks", "must be positive")
        _require(list(self.ks) == sorted(set(self.ks)), "eval.ks", "must be strictly increasing")


SECTIONS = {
    "world": WorldConfig,
    "sim": SimConfig,
    "encoder": EncoderConfig,
    "pairs": PairGenConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "serve": ServeConfig,
    "eval": EvalConfig,
}

# Per-stage seeds are derived as SeedSequence([global_seed, index]).
STAGE_SEED_INDEX = {
    "world": 0,
    "sim": 1,
    "encoder": 2,
    "pairs": 3,
    "model": 4,
    "train": 5,
    "index": 6,
}


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pairs: PairGenConfig = field(default_factory=PairGenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    serve: ServeConfig = field(default_factory=ServeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def validate(self) -> ExperimentConfig:
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return {name: section_dict(getattr(self, name)) for name in SECTIONS} | {"seed": self.seed}

    def section_hash(self, *names: str) -> str:
        """Hash of the named sections plus the global seed."""
        payload = {n: section_dict(getattr(self, n)) for n in names}
        payload["seed"] = self.seed
        return stable_hash(payload)

    def stage_seed(self, stage: str) -> int:
        ss = np.random.SeedSequence([self.seed, STAGE_SEED_INDEX[stage]])
        return int(ss.generate_state(1, dtype=np.uint32)[0])

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExperimentConfig:
        unknown = set(data) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, section_cls in SECTIONS.items():
            kwargs[name] = build_section(section_cls, data.get(name, {}), name)
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed: must be a non-negative integer")
        return cls(**kwargs, seed=seed).validate()

    def with_overrides(self, assignments: list[str]) -> ExperimentConfig:
        """Apply ``section.key=value`` overrides (values parsed as JSON when possible)."""
        data = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r}: expected KEY=VALUE")
            key, raw = item.split("=", 1)
            value = _parse_value(raw)
            if key == "seed":
                data["seed"] = value
                continue
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"override {key!r}: unknown key")
            if name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
                raise ConfigError(f"override {key!r}: unknown key")
            data[section][name] = value
        return ExperimentConfig.from_dict(data)


def _require(ok: bool, name: str, message: str) -> None:
    if not ok:
        raise ConfigError(f"{name}: {message}")


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def build_section(section_cls: type, values: dict[str, Any], name: str) -> Any:
    if not isinstance(values, dict):
        raise ConfigError(f"{name}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(section_cls)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {sorted(unknown)}")
    defaults = section_cls()
    kwargs = {}
    for key, value in values.items():
        default = getattr(defaults, key)
        kwargs[key] = _coerce(value, default, f"{name}.{key}")
    return section_cls(**kwargs)


def _coerce(value: Any, default: Any, name: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{name}: expected an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{name}: expected a finite number")
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list")
        return tuple(_coerce(v, default[0], name) for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string")
        return value
    return value


def section_dict(section: Any) -> dict[str, Any]:
    out = dataclasses.asdict(section)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def stable_hash(payload: Any) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: str) -> ExperimentConfig:
    """Read a JSON experiment config. Missing sections take defaults."""
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(data)
