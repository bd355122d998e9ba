#!/usr/bin/env python3
"""
Configuration Manager
Loads, validates and saves the run configuration (INI file via configparser)
"""

import configparser
import io
import logging
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from .attention_injection import InjectionMode, InjectionPolicy, format_layers, parse_layers
from .denoiser import DenoiserConfig
from .errors import ConfigError, VideoEditError
from .guidance import GradMethod, GuidanceConfig
from .schedule import DiffusionSchedule, make_schedule
from .training import TrainingConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "video_edit_config.ini"


@dataclass
class ScheduleConfig:
    num_train_steps: int = 1000
    num_inference_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    eta: float = 0.0

    def build(self) -> DiffusionSchedule:
        return make_schedule(self.num_train_steps, self.num_inference_steps,
                             self.beta_start, self.beta_end, self.eta)


@dataclass
class InjectionConfig:
    mode: InjectionMode = InjectionMode.ANCHOR_PLUS_PREV
    anchor_index: int = 1
    layers: str = "decoder"

    def policy(self) -> InjectionPolicy:
        return InjectionPolicy(mode=self.mode, anchor_index=self.anchor_index, layers=parse_layers(self.layers))


@dataclass
class CfgScales:
    invert: float = 1.0
    edit: float = 7.5


@dataclass
class RunPaths:
    output_dir: str = "output"
    weights: str = ""
    classifier: str = ""
    log_level: str = "INFO"
    log_file: str = ""
    events_file: str = ""


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    injection: InjectionConfig = field(default_factory=InjectionConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    cfg: CfgScales = field(default_factory=CfgScales)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    paths: RunPaths = field(default_factory=RunPaths)
    seed: int = 0

    def validate(self) -> "RunConfig":
        """Fail fast on anything the pipeline would reject later"""
        try:
            sched = self.schedule.build()
            self.injection.policy()
            self.guidance.validate_for(sched)
        except VideoEditError as e:
            raise ConfigError(f"invalid configuration: {e}") from e
        if self.schedule.eta != 0:
            raise ConfigError("editing needs the deterministic sampler (schedule.eta = 0)")
        if self.cfg.invert < 1.0 or self.cfg.edit < 1.0:
            raise ConfigError(f"cfg scales must be >= 1.0, got invert={self.cfg.invert} edit={self.cfg.edit}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        return self


# section name -> RunConfig attribute holding that section
SECTIONS = {
    "schedule": "schedule",
    "denoiser": "denoiser",
    "injection": "injection",
    "guidance": "guidance",
    "cfg": "cfg",
    "training": "training",
    "run": "paths",
}


def _format(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, frozenset):
        return format_layers(value)
    return str(value)


def _parse(raw: str, default: Any, key: str) -> Any:
    """Parse `raw` into the type of the field's default value"""
    raw = raw.strip()
    try:
        if isinstance(default, Enum):
            return type(default)(raw)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as e:
        raise ConfigError(f"bad value for '{key}': {raw!r} ({e})") from e
    return raw


def _section_to_dict(obj: Any) -> Dict[str, str]:
    return {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}


def _section_from_dict(cls: type, values: Mapping[str, str], section: str) -> Any:
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
    kwargs = {k: _parse(v, getattr(defaults, k), f"{section}.{k}") for k, v in values.items()}
    try:
        return replace(defaults, **kwargs)
    except (VideoEditError, ValueError, TypeError) as e:
        raise ConfigError(f"[{section}]: {e}") from e


def to_parser(config: RunConfig) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    for section, attr in SECTIONS.items():
        parser[section] = _section_to_dict(getattr(config, attr))
    parser["run"]["seed"] = str(config.seed)
    return parser


def to_ini_string(config: RunConfig) -> str:
    buffer = io.StringIO()
    to_parser(config).write(buffer)
    return buffer.getvalue()


def from_parser(parser: configparser.ConfigParser) -> RunConfig:
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    config = RunConfig()
    for section, attr in SECTIONS.items():
        if not parser.has_section(section):
            continue
        values = dict(parser[section])
        if section == "run" and "seed" in values:
            config.seed = _parse(values.pop("seed"), 0, "run.seed")
        setattr(config, attr, _section_from_dict(type(getattr(config, attr)), values, section))
    return config


def from_ini_string(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unreadable config: {e}") from e
    return from_parser(parser)


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load configuration from file; a missing file gives the defaults"""
    if path is None or not Path(path).exists():
        if path is not None:
            logger.warning(f"⚠️  Config file {path} not found, using defaults")
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    config = from_ini_string(text)
    logger.info(f"🔧 Loaded configuration from {path}")
    return config


def save_config(config: RunConfig, path: Union[str, Path]) -> Path:
    """Save configuration to file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        to_parser(config).write(f)
    logger.info(f"✅ Configuration saved to {path}")
    return path


def apply_overrides(config: RunConfig, seed: Optional[int] = None, delta: Optional[float] = None,
                    active_steps: Optional[int] = None, policy: Optional[str] = None,
                    inject_layers: Optional[str] = None, grad_method: Optional[str] = None,
                    cfg_scale: Optional[float] = None, output_dir: Optional[str] = None,
                    weights: Optional[str] = None) -> RunConfig:
    """Command-line flags win over file values; None means 'not given'"""
    try:
        guidance = config.guidance
        if delta is not None:
            guidance = replace(guidance, delta=float(delta))
        if active_steps is not None:
            guidance = replace(guidance, active_steps=int(active_steps))
        if grad_method is not None:
            guidance = replace(guidance, grad_method=GradMethod(grad_method))
        injection = config.injection
        if policy is not None:
            injection = replace(injection, mode=InjectionMode(policy))
        if inject_layers is not None:
            injection = replace(injection, layers=format_layers(parse_layers(inject_layers)))
    except (VideoEditError, ValueError) as e:
        raise ConfigError(f"bad command-line override: {e}") from e

    cfg = replace(config.cfg, edit=float(cfg_scale)) if cfg_scale is not None else config.cfg
    paths = config.paths
    if output_dir is not None:
        paths = replace(paths, output_dir=output_dir)
    if weights is not None:
        paths = replace(paths, weights=weights)
    return replace(config, guidance=guidance, injection=injection, cfg=cfg, paths=paths,
                   seed=config.seed if seed is None else int(seed))

