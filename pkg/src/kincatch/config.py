"""Run configuration and deterministic seed derivation.

The run configuration mirrors every module's config dataclass as one flat
INI section each; values are JSON literals so tuples and nested limit boxes
survive a text round-trip exactly. Unknown sections or keys are rejected,
and the effective config (all defaults materialized) is what gets persisted
next to every artifact.

All randomness derives from one master seed through counter-based Philox
streams keyed by (master seed, stream label, index), so parallel and serial
executions of the same run are identical.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
import zlib
from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np

from .dynamics import ArmModel, ContactParams, LaunchConfig
from .explorer import CemConfig
from .harness import ControlNoise, DynamicsScales, ObservationNoise, RandomizationConfig
from .manifold import ConditionMapConfig, GeodesicConfig, LossWeights, TrainConfig
from .reward import RewardConfig, RewardWeights, SuccessConfig
from .synthesis import ExpMapConfig, SynthesisConfig


def rng_stream(master_seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Independent Philox stream for (master seed, label, index)."""
    key = np.random.SeedSequence(
        entropy=(int(master_seed) & 0xFFFFFFFFFFFFFFFF,
                 zlib.crc32(label.encode("utf-8")), int(index)))
    return np.random.Generator(np.random.Philox(seed=key))


@dataclass(frozen=True)
class RolloutOptions:
    dt: float = 0.005
    q_home: tuple[float, ...] = (0.8, -1.0, -0.5)
    kp: tuple[float, ...] = (60.0, 60.0, 60.0)
    kd: tuple[float, ...] = (12.0, 12.0, 12.0)
    contact_gain_scale: float = 0.4


@dataclass(frozen=True)
class AlignmentOptions:
    horizon: int = 64
    alpha_c: float = 0.75


@dataclass(frozen=True)
class ExploreOptions:
    n_conditions: int = 650
    min_records: int = 500


@dataclass(frozen=True)
class EvaluateOptions:
    n_episodes: int = 200
    sweep_levels: tuple[float, ...] = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05)
    sweep_seeds: int = 5
    sweep_episodes_per_level: int = 40


@dataclass(frozen=True)
class RandomizationEnables:
    observation: bool = True
    dynamics: bool = True
    control: bool = True


@dataclass
class RunConfig:
    master_seed: int = 0
    output_dir: str = "runs/default"
    workers: int = 1
    arm: ArmModel = field(default_factory=ArmModel)
    contact: ContactParams = field(default_factory=ContactParams)
    launch: LaunchConfig = field(default_factory=LaunchConfig)
    reward_weights: RewardWeights = field(default_factory=RewardWeights)
    reward: RewardConfig = field(default_factory=RewardConfig)
    success: SuccessConfig = field(default_factory=SuccessConfig)
    cem: CemConfig = field(default_factory=CemConfig)
    rollout: RolloutOptions = field(default_factory=RolloutOptions)
    alignment: AlignmentOptions = field(default_factory=AlignmentOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    geodesic: GeodesicConfig = field(default_factory=GeodesicConfig)
    condition_map: ConditionMapConfig = field(default_factory=ConditionMapConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    expmap: ExpMapConfig = field(default_factory=ExpMapConfig)
    rand_observation: ObservationNoise = field(default_factory=ObservationNoise)
    rand_dynamics: DynamicsScales = field(default_factory=DynamicsScales)
    rand_control: ControlNoise = field(default_factory=ControlNoise)
    randomization: RandomizationEnables = field(default_factory=RandomizationEnables)
    explore: ExploreOptions = field(default_factory=ExploreOptions)
    evaluate: EvaluateOptions = field(default_factory=EvaluateOptions)

    # --- derived assemblies -------------------------------------------------

    def rollout_env(self):
        from .explorer import RolloutEnv
        return RolloutEnv(arm=self.arm, params=self.contact,
                          weights=self.reward_weights, rcfg=self.reward,
                          launch=self.launch, dt=self.rollout.dt,
                          q_home=self.rollout.q_home, kp=self.rollout.kp,
                          kd=self.rollout.kd,
                          contact_gain_scale=self.rollout.contact_gain_scale)

    def train_config(self) -> TrainConfig:
        # [loss_weights] is its own section; the coarse in-training geodesic
        # settings stay at their TrainConfig defaults ([geodesic] configures
        # the op-level solver used by geometry queries)
        return dataclasses.replace(self.train, loss_weights=self.loss_weights)

    def synthesis_config(self) -> SynthesisConfig:
        return self.synthesis

    def randomization_config(self) -> RandomizationConfig:
        return RandomizationConfig(
            observation=self.rand_observation, dynamics=self.rand_dynamics,
            control=self.rand_control,
            enable_observation=self.randomization.observation,
            enable_dynamics=self.randomization.dynamics,
            enable_control=self.randomization.control)


_TOP_LEVEL = ("master_seed", "output_dir", "workers")


class ConfigError(ValueError):
    pass


def _to_jsonable(v):
    if is_dataclass(v):
        raise ConfigError("nested dataclass fields are not INI-serializable")
    if isinstance(v, tuple):
        return [_to_jsonable(x) for x in v]
    if isinstance(v, (list, dict, str, int, float, bool)) or v is None:
        return v
    raise ConfigError(f"cannot serialize config value {v!r}")


def _coerce(value, template):
    """Coerce a JSON-parsed value to the template's structure (tuples)."""
    if isinstance(template, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"expected list for tuple field, got {value!r}")
        if template and isinstance(template[0], tuple):
            return tuple(tuple(x) for x in value)
        return tuple(value)
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected boolean, got {value!r}")
        return value
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected number, got {value!r}")
        return int(value)
    if isinstance(template, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected number, got {value!r}")
        return float(value)
    if isinstance(template, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected string, got {value!r}")
        return value
    raise ConfigError(f"unsupported config field template {template!r}")


def _section_items(obj):
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if is_dataclass(v):
            continue  # nested configs live in their own sections
        out[f.name] = v
    return out


def dump_ini(cfg: RunConfig) -> str:
    """Effective configuration as INI text with JSON-literal values."""
    from .serialize import dumps

    lines = ["[run]"]
    for k in _TOP_LEVEL:
        lines.append(f"{k} = {dumps(getattr(cfg, k))}")
    for f in fields(cfg):
        if f.name in _TOP_LEVEL:
            continue
        section = getattr(cfg, f.name)
        lines.append("")
        lines.append(f"[{f.name}]")
        for k, v in _section_items(section).items():
            lines.append(f"{k} = {dumps(_to_jsonable(v))}")
    return "\n".join(lines) + "\n"


def parse_ini(text: str) -> RunConfig:
    """Parse INI text onto the defaults; unknown sections/keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive
    parser.read_file(io.StringIO(text))
    cfg = RunConfig()
    section_fields = {f.name: f for f in fields(cfg) if f.name not in _TOP_LEVEL}
    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items(section):
                if key not in _TOP_LEVEL:
                    raise ConfigError(f"unknown key [run] {key}")
                value = _coerce(json.loads(raw), getattr(cfg, key))
                setattr(cfg, key, value)
            continue
        if section not in section_fields:
            raise ConfigError(f"unknown config section [{section}]")
        current = getattr(cfg, section)
        known = {f.name: f for f in fields(current) if not is_dataclass(getattr(current, f.name))}
        updates = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key [{section}] {key}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {exc}") from exc
            updates[key] = _coerce(value, getattr(current, key))
        if updates:
            setattr(cfg, section, dataclasses.replace(current, **updates))
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_ini(fh.read())


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_ini(cfg))
