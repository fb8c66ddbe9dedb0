"""Per-region scale selection with an evolutionary actor-critic on a simulated aerial detector."""

from .agent import Agent, AgentConfig
from .config import RunConfig, bundled_config, load_config
from .environment import EnvSettings, RewardTable, Task
from .exceptions import ConfigError, OracleCapError
from .scene import DetectorModel, Scene, SceneConfig, generate_scene

__all__ = [
    "Agent",
    "AgentConfig",
    "ConfigError",
    "DetectorModel",
    "EnvSettings",
    "OracleCapError",
    "RewardTable",
    "RunConfig",
    "Scene",
    "SceneConfig",
    "Task",
    "bundled_config",
    "generate_scene",
    "load_config",
]

__version__ = "0.1.0"
