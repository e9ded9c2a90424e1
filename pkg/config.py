"""Configuration management for a-DCF back-end experiments."""
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import yaml
from dotenv import load_dotenv

from errors import UsageError, ValidationError
from metrics import CostModel

# Training defaults
DEFAULT_BATCH_SIZE = 1024
DEFAULT_EPOCHS = 100
DEFAULT_LEARNING_RATE = 1e-4
DEFAULT_PATIENCE = 20
DEFAULT_SEED = 0
# Grid search and the soft dev metric. At the loss default alpha=1 the soft a-DCF of
# scores in (0, 1) is close to linear in tau, so the search would stop at a grid edge.
DEFAULT_SEARCH_ALPHA = 50.0
DEFAULT_SPLIT = (0.8, 0.1, 0.1)
DEFAULT_OUT_DIR = "runs"
DEFAULT_LOG_LEVEL = "INFO"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

DEFAULT_COST_MODEL = CostModel(c_miss_tar=1.0, c_fa_non=10.0, c_fa_spf=20.0,
                               pi_tar=0.9, pi_non=0.05, pi_spf=0.05)

# Systems S1-S4: identical network, differing in loss and threshold handling.
SYSTEM_PRESETS: Dict[str, Dict[str, str]] = {
    "s1": {"loss_mode": "bce-only", "threshold_mode": "fixed", "selection_metric": "hard-adcf"},
    "s2": {"loss_mode": "soft-adcf", "threshold_mode": "fixed", "selection_metric": "hard-adcf"},
    "s3": {"loss_mode": "soft-adcf+bce", "threshold_mode": "fixed", "selection_metric": "hard-adcf"},
    "s4": {"loss_mode": "soft-adcf+bce", "threshold_mode": "optimized", "selection_metric": "soft-adcf"},
}

# Cost/prior parameter study
SETTING_PRESETS: Dict[str, CostModel] = {
    "1": DEFAULT_COST_MODEL,
    "2": CostModel(c_miss_tar=1.0, c_fa_non=1.0, c_fa_spf=1.0, pi_tar=0.5, pi_non=0.5, pi_spf=0.0),
    "3": CostModel(c_miss_tar=1.0, c_fa_non=1.0, c_fa_spf=1.0, pi_tar=0.5, pi_non=0.0, pi_spf=0.5),
}

CONFIG_SECTIONS = ("synth", "train", "cost", "paths", "evaluate")

logger = logging.getLogger(__name__)


def setup_logging(level: Union[str, int] = DEFAULT_LOG_LEVEL) -> None:
    """Route log records to stderr in the package-wide format."""
    if isinstance(level, str):
        numeric = logging.getLevelName(level.upper())
        if not isinstance(numeric, int):
            raise UsageError(f"Unknown log level: {level}")
        level = numeric
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def cost_model_for_setting(setting: Union[str, int]) -> CostModel:
    """Cost model of a named setting ("1", "setting2", 3, ...)."""
    key = str(setting).lower().removeprefix("setting")
    if key not in SETTING_PRESETS:
        raise ValidationError(f"Unknown setting {setting!r}; choose from {sorted(SETTING_PRESETS)}")
    return SETTING_PRESETS[key]


def system_preset(name: str) -> Dict[str, str]:
    """Training options of a named system preset."""
    key = str(name).lower()
    if key not in SYSTEM_PRESETS:
        raise ValidationError(f"Unknown system {name!r}; choose from {sorted(SYSTEM_PRESETS)}")
    return dict(SYSTEM_PRESETS[key])


@dataclass
class RunConfig:
    """Fully resolved parameters of one command invocation."""
    command: str
    seed: int = DEFAULT_SEED
    out_dir: str = DEFAULT_OUT_DIR
    log_level: str = DEFAULT_LOG_LEVEL
    synth: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    cost: Dict[str, Any] = field(default_factory=dict)
    paths: Dict[str, Any] = field(default_factory=dict)
    evaluate: Dict[str, Any] = field(default_factory=dict)

    def cost_model(self) -> CostModel:
        """The resolved cost model."""
        return CostModel.from_dict(self.cost) if self.cost else DEFAULT_COST_MODEL

    def synth_spec(self):
        """The resolved SynthSpec."""
        from data import SynthSpec
        return SynthSpec.from_dict({"seed": self.seed, **self.synth})

    def train_config(self):
        """The resolved training configuration."""
        from trainer import TrainConfig
        return TrainConfig.from_dict({"seed": self.seed, **self.train}, cost_model=self.cost_model())

    def as_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "log_level": self.log_level,
            **{section: dict(getattr(self, section)) for section in CONFIG_SECTIONS},
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.as_dict(), sort_keys=False)


class ConfigManager:
    """Resolves run configuration from flags, a YAML file, presets and the environment.

    Precedence, highest first: command-line flags, config file, system/setting
    preset, environment (``ADCF_*``, optionally from a ``.env`` file), built-in
    defaults.
    """

    def __init__(self, env_file: Optional[Union[str, Path]] = None):
        load_dotenv(env_file) if env_file else load_dotenv()
        self.log_level = self.get_log_level()
        self.out_dir = self.get_out_dir()
        self.seed = self.get_seed()

    def get_log_level(self) -> str:
        """Get log level from environment or use default."""
        return os.getenv("ADCF_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()

    def get_out_dir(self) -> str:
        """Get output directory from environment or use default."""
        return os.getenv("ADCF_OUT_DIR", DEFAULT_OUT_DIR)

    def get_seed(self) -> int:
        """Get global seed from environment or use default."""
        raw = os.getenv("ADCF_SEED")
        if raw is None or raw == "":
            return DEFAULT_SEED
        try:
            return int(raw)
        except ValueError:
            raise UsageError(f"ADCF_SEED must be an integer, got {raw!r}")

    def load_file(self, path: Union[str, Path]) -> Dict[str, Any]:
        """Read a YAML config file; unknown top-level keys are rejected."""
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"Config file not found: {path}")
        try:
            content = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except UnicodeDecodeError:
            raise ValidationError(f"{path}: config file is not UTF-8 text")
        except yaml.YAMLError as e:
            raise ValidationError(f"{path}: invalid YAML: {e}")
        if not isinstance(content, dict):
            raise ValidationError(f"{path}: top level must be a mapping")
        allowed = {"command", "seed", "out_dir", "log_level", *CONFIG_SECTIONS}
        unknown = set(content) - allowed
        if unknown:
            raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
        for section in CONFIG_SECTIONS:
            if content.get(section) is not None and not isinstance(content[section], dict):
                raise ValidationError(f"{path}: section '{section}' must be a mapping")
        return content

    def resolve(self, command: str, flags: Optional[Mapping[str, Any]] = None,
                config_file: Optional[Union[str, Path]] = None,
                system: Optional[str] = None, setting: Optional[Union[str, int]] = None) -> RunConfig:
        """Merge every configuration layer into one explicit RunConfig.

        ``flags`` uses the same layout as the file: top-level keys plus
        section mappings; ``None`` values mean "not given".
        """
        file_values = self.load_file(config_file) if config_file else {}
        flags = _drop_unset(flags or {})

        run = RunConfig(command=command, seed=self.seed, out_dir=self.out_dir, log_level=self.log_level)

        train_section = dict(file_values.get("train") or {})
        train_flags = dict(flags.get("train") or {})
        system = system or train_flags.get("system") or train_section.get("system")
        if system:
            run.train.update(system_preset(system))
            run.train["system"] = str(system).lower()

        cost_section = dict(file_values.get("cost") or {})
        setting = setting or (flags.get("cost") or {}).get("setting") or cost_section.pop("setting", None)
        if setting is not None:
            run.cost.update(cost_model_for_setting(setting).as_dict())

        for layer in (file_values, flags):
            for key in ("seed", "out_dir", "log_level"):
                if layer.get(key) is not None:
                    setattr(run, key, layer[key])
            for section in CONFIG_SECTIONS:
                values = dict(layer.get(section) or {})
                if section == "cost":
                    values.pop("setting", None)
                getattr(run, section).update(values)

        if isinstance(run.seed, bool):
            raise ValidationError(f"seed must be an integer, got {run.seed!r}")
        try:
            run.seed = int(run.seed)
        except (TypeError, ValueError):
            raise ValidationError(f"seed must be an integer, got {run.seed!r}")
        run.log_level = str(run.log_level).upper()
        if run.cost:
            run.cost = {**DEFAULT_COST_MODEL.as_dict(), **run.cost}
        else:
            run.cost = DEFAULT_COST_MODEL.as_dict()
        # Fails early on an invalid cost model.
        run.cost_model()
        logger.debug("Resolved %s config: %s", command, run.as_dict())
        return run

    def validate_inputs(self, run: RunConfig, required: tuple = ()) -> None:
        """Check that every named input path of the run exists."""
        for name in required:
            value = run.paths.get(name)
            if value is None:
                raise UsageError(f"Missing required input: --{name.replace('_', '-')}")
            if not Path(value).exists():
                raise UsageError(f"Input file not found for --{name.replace('_', '-')}: {value}")


def _drop_unset(values: Mapping[str, Any]) -> Dict[str, Any]:
    cleaned: Dict[str, Any] = {}
    for key, value in values.items():
        if isinstance(value, Mapping):
            value = _drop_unset(value)
            if not value:
                continue
        if value is None:
            continue
        cleaned[key] = value
    return cleaned
