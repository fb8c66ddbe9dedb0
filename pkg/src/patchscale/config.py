"""Run configuration: one TOML file with dotted sections, plus ``section.key=value`` overrides.

Sections and keys (defaults in parentheses):

``[scene]``      width (1024), height (1024), n_categories (4), min_objects (4),
                 max_objects (12), band_edges, band_weights, max_zones (3),
                 cluster_spread (60.0), size_jitter (0.15), aspect_jitter (0.25),
                 beta (1.5), merge_iou (0.3)
``[detector]``   optimal_px (40.0), loc_width (1.0), cls_width (0.7), max_scale (2.5),
                 artifact_slope (0.4), noise_sd (0.0), category_offsets (evenly spaced
                 in [-0.5, 0.5] octaves, one per category)
``[rewards]``    alpha_l, alpha_c, alpha_s (1.0 each), K (span of the action set),
                 radius (256.0), k_max (4)
``[actions]``    scales ([0.5, 1.0, 1.5, 2.0, 2.5, 3.0])
``[features]``   dim (32), seed (0)
``[attention]``  enabled (true), fusion ("hadamard" | "matmul"), qk_init (1.0)
``[agent]``      mode ("reinforce" | "ppo_clip"), gate_reduction (4), lr (0.01),
                 momentum (0.9), weight_decay (0.0005), dropout (0.5), gamma (0.99),
                 clip_ratio (0.2), ppo_epochs (4), max_grad_norm (1.0; 0 disables)
``[evolution]``  enabled (true), population (32), iterations (10), delta (0.5),
                 p_mut (0.1), history_capacity (512)
``[train]``      episodes (1000), steps (50), batch_scenes (8), seed (0),
                 checkpoint_every (0 = only at the end)
``[eval]``       seed_start (1000), n_scenes (50), max_objects (8), oracle_cap (6**8)
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .agent import AgentConfig
from .environment import DEFAULT_ACTIONS, EnvSettings
from .exceptions import ConfigError
from .features import FUSIONS
from .rewards import RewardWeights
from .scene import DetectorModel, SceneConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class RewardSection:
    alpha_l: float = 1.0
    alpha_c: float = 1.0
    alpha_s: float = 1.0
    K: float | None = None
    radius: float = 256.0
    k_max: int = 4


@dataclass(frozen=True)
class ActionSection:
    scales: tuple[float, ...] = DEFAULT_ACTIONS


@dataclass(frozen=True)
class FeatureSection:
    dim: int = 32
    seed: int = 0


@dataclass(frozen=True)
class AttentionSection:
    enabled: bool = True
    fusion: str = "hadamard"
    qk_init: float = 1.0


@dataclass(frozen=True)
class AgentSection:
    mode: str = "reinforce"
    gate_reduction: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    dropout: float = 0.5
    gamma: float = 0.99
    clip_ratio: float = 0.2
    ppo_epochs: int = 4
    max_grad_norm: float = 1.0


@dataclass(frozen=True)
class EvolutionSection:
    enabled: bool = True
    population: int = 32
    iterations: int = 10
    delta: float = 0.5
    p_mut: float = 0.1
    history_capacity: int = 512


@dataclass(frozen=True)
class TrainSection:
    episodes: int = 1000
    steps: int = 50
    batch_scenes: int = 8
    seed: int = 0
    checkpoint_every: int = 0


@dataclass(frozen=True)
class EvalSection:
    seed_start: int = 1000
    n_scenes: int = 50
    max_objects: int = 8
    oracle_cap: int = 6**8


SECTIONS = {
    "scene": SceneConfig,
    "detector": DetectorModel,
    "rewards": RewardSection,
    "actions": ActionSection,
    "features": FeatureSection,
    "attention": AttentionSection,
    "agent": AgentSection,
    "evolution": EvolutionSection,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    detector: DetectorModel = field(default_factory=DetectorModel)
    rewards: RewardSection = field(default_factory=RewardSection)
    actions: ActionSection = field(default_factory=ActionSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    attention: AttentionSection = field(default_factory=AttentionSection)
    agent: AgentSection = field(default_factory=AgentSection)
    evolution: EvolutionSection = field(default_factory=EvolutionSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived views ------------------------------------------------------------

    def env_settings(self, alpha_s: float | None = None) -> EnvSettings:
        r = self.rewards
        return EnvSettings(
            model=self.detector,
            weights=RewardWeights(r.alpha_l, r.alpha_c, r.alpha_s if alpha_s is None else alpha_s),
            action_set=tuple(self.actions.scales),
            beta=self.scene.beta,
            merge_iou=self.scene.merge_iou,
            radius=r.radius,
            k_max=r.k_max,
            K=r.K,
        )

    def agent_config(self) -> AgentConfig:
        a = self.agent
        return AgentConfig(
            mode=a.mode,
            feature_dim=self.features.dim,
            gate_reduction=a.gate_reduction,
            attention=self.attention.enabled,
            fusion=self.attention.fusion,
            qk_init=self.attention.qk_init,
            lr=a.lr,
            momentum=a.momentum,
            weight_decay=a.weight_decay,
            dropout=a.dropout,
            gamma=a.gamma,
            clip_ratio=a.clip_ratio,
            ppo_epochs=a.ppo_epochs,
            encoder_seed=self.features.seed,
            max_grad_norm=a.max_grad_norm if a.max_grad_norm > 0 else None,
        )

    def benchmark_scene_config(self) -> SceneConfig:
        return replace(self.scene, min_objects=min(self.scene.min_objects, self.eval.max_objects),
                       max_objects=self.eval.max_objects)

    # -- validation -----------------------------------------------------------------

    def validate(self) -> "RunConfig":
        self.scene.validate()
        self.detector.validate(self.scene.n_categories)
        self.env_settings()  # reward weights
        acts = self.actions.scales
        if len(acts) < 2 or any(a <= 0 for a in acts) or list(acts) != sorted(set(acts)):
            raise ConfigError(f"actions.scales must be >= 2 increasing positive values: {acts}")
        if self.rewards.K is not None and self.rewards.K <= 0:
            raise ConfigError("rewards.K must be positive")
        if self.rewards.radius <= 0 or self.rewards.k_max < 1:
            raise ConfigError("rewards.radius must be > 0 and rewards.k_max >= 1")
        if self.features.dim < 8:
            raise ConfigError("features.dim must be >= 8")
        if self.attention.fusion not in FUSIONS:
            raise ConfigError(f"attention.fusion must be one of {FUSIONS}")
        if self.agent.mode not in ("reinforce", "ppo_clip"):
            raise ConfigError("agent.mode must be 'reinforce' or 'ppo_clip'")
        if not 0 < self.agent.gamma <= 1:
            raise ConfigError("agent.gamma must be in (0, 1]")
        if self.agent.max_grad_norm < 0:
            raise ConfigError("agent.max_grad_norm must be >= 0")
        if not 0 <= self.agent.dropout < 1:
            raise ConfigError("agent.dropout must be in [0, 1)")
        if self.agent.lr <= 0 or self.agent.ppo_epochs < 1 or self.agent.gate_reduction < 1:
            raise ConfigError("agent.lr, agent.ppo_epochs and agent.gate_reduction must be positive")
        ev = self.evolution
        if ev.population < 2 or ev.iterations < 1 or not 0 < ev.delta <= 1 or not 0 <= ev.p_mut <= 1:
            raise ConfigError("evolution: population >= 2, iterations >= 1, delta in (0,1], p_mut in [0,1]")
        if ev.history_capacity < 1:
            raise ConfigError("evolution.history_capacity must be >= 1")
        t = self.train
        if min(t.episodes, t.steps, t.batch_scenes) < 1 or t.checkpoint_every < 0:
            raise ConfigError("train.episodes, train.steps and train.batch_scenes must be >= 1")
        if self.eval.n_scenes < 1 or self.eval.max_objects < 1 or self.eval.oracle_cap < 1:
            raise ConfigError("eval.n_scenes, eval.max_objects and eval.oracle_cap must be >= 1")
        return self

    # -- (de)serialization ------------------------------------------------------------

    def to_dict(self) -> dict[str, dict[str, Any]]:
        out = {}
        for name in SECTIONS:
            section = getattr(self, name)
            out[name] = {
                f.name: list(v) if isinstance(v := getattr(section, f.name), tuple) else v
                for f in fields(section)
            }
        return out

    @classmethod
    def from_dict(cls, blob: dict[str, Any]) -> "RunConfig":
        unknown = set(blob) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in SECTIONS.items():
            values = dict(blob.get(name, {}))
            known = {f.name: f for f in fields(section_cls) if f.init}
            bad = set(values) - set(known)
            if bad:
                raise ConfigError(f"unknown key(s) in [{name}]: {sorted(bad)}")
            for key, value in values.items():
                values[key] = _coerce(f"{name}.{key}", value, known[key].default)
            kwargs[name] = section_cls(**values)
        if "category_offsets" not in blob.get("detector", {}):
            n_cat = kwargs["scene"].n_categories
            kwargs["detector"] = replace(kwargs["detector"],
                                         category_offsets=DetectorModel.default_offsets(n_cat))
        return cls(**kwargs).validate()

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        blob = self.to_dict()
        touched = set()
        for item in overrides:
            key, value = parse_override(item)
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"override {item!r}: expected section.key=value")
            blob[section][name] = value
            touched.add(key)
        if "scene.n_categories" in touched and "detector.category_offsets" not in touched:
            blob["detector"].pop("category_offsets")
        return RunConfig.from_dict(blob)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(value, list):
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or (default is None and key.endswith(".K")):
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    key, raw = item.split("=", 1)
    key, raw = key.strip(), raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare word, e.g. agent.mode=ppo_clip
    return key, value


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Read a TOML config; decode errors are reported with their line number."""
    if path is None:
        blob: dict = {}
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            blob = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    try:
        config = RunConfig.from_dict(blob)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config.with_overrides(overrides) if overrides else config


def bundled_config(name: str = "bench.toml") -> Path:
    return Path(__file__).parent / "data" / name
