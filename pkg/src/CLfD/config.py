"""JSON run configs: one document with a section per component, resolved and written next to outputs."""
import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, TypeVar

from CLfD.ddpg import DDPGConfig
from CLfD.env import EnvConfig
from CLfD.evaluation import ProbeConfig
from CLfD.exceptions import ConfigError
from CLfD.scene import CameraRig
from CLfD.synth_data import GeneratorConfig
from CLfD.training import TrainConfig
from CLfD.utils import load_json, save_to_json

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved_config.json"

T = TypeVar("T")


@dataclass
class RunConfig:
    seed: int = 0
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    ddpg: DDPGConfig = field(default_factory=DDPGConfig)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "data": self.data.to_dict(),
            "train": self.train.to_dict(),
            "probe": {f.name: getattr(self.probe, f.name) for f in fields(self.probe)},
            "env": self.env.to_dict(),
            "ddpg": self.ddpg.to_dict(),
        }


def _section(cls, data: Dict[str, Any], name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"config section {name!r}: unknown keys {unknown}")
    return cls(**data)


def run_config_from_dict(data: Dict[str, Any]) -> RunConfig:
    sections = {"seed", "data", "train", "probe", "env", "ddpg"}
    unknown = sorted(set(data) - sections)
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}")
    data_section = dict(data.get("data", {}))
    if "rig" in data_section:
        data_section["rig"] = CameraRig.from_dict(data_section["rig"])
    try:
        return RunConfig(
            seed=int(data.get("seed", 0)),
            data=_section(GeneratorConfig, data_section, "data"),
            train=_section(TrainConfig, data.get("train", {}), "train"),
            probe=_section(ProbeConfig, data.get("probe", {}), "probe"),
            env=_section(EnvConfig, data.get("env", {}), "env"),
            ddpg=_section(DDPGConfig, data.get("ddpg", {}), "ddpg"),
        )
    except (TypeError, ValueError, KeyError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid run config: {e}") from e


def load_run_config(path: Optional[Path]) -> RunConfig:
    """RunConfig from a JSON file; defaults when no path is given."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = load_json(path)
    except json.JSONDecodeError as e:
        logger.error(f"Failed to parse config {path}: {e}")
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return run_config_from_dict(data)


def apply_overrides(config: T, **overrides: Any) -> T:
    """Copy of a config dataclass with every non-None override applied."""
    values = {k: v for k, v in overrides.items() if v is not None}
    known = {f.name for f in fields(config)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown overrides {unknown} for {type(config).__name__}")
    return replace(config, **values)


def write_resolved_config(run: RunConfig, out_dir: Path, command: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG
    save_to_json({"command": command, **run.to_dict()}, path, indent=2)
    return path
