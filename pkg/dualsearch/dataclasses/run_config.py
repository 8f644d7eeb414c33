import copy
import json
import logging
import os
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from dualsearch.errors import ConfigError

logger = logging.getLogger(__name__)

COMMANDS = ("search", "train", "fuse", "eval")


class PathsConfig(BaseModel):
    # These properties MUST be sorted alphabetically
    model_config = ConfigDict(extra="forbid")

    architecture: str = ""
    checkpoint: str = ""
    extractor_weights: str = ""
    fused_dir: str = ""
    loss_weights: str = ""
    natural_manifest: str = ""
    output_dir: str = "output"
    test_manifest: str = ""
    train_manifest: str = ""


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha_noise: float = 1e-3
    iterations: int = 3
    stream_edges: int = 2
    width: int = 16

    @field_validator("iterations", "stream_edges", "width")
    @classmethod
    def _at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator("alpha_noise")
    @classmethod
    def _non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("must be >= 0")
        return value


class ExtractorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backend: Literal["deterministic_fallback", "pretrained_vgg16"] = "deterministic_fallback"
    epsilon: float = 1e-8
    fallback_seed: int = 0
    layers: List[int] = [0, 1, 2, 3]

    @field_validator("layers")
    @classmethod
    def _valid_layers(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("at least one layer is required")
        if any(layer < 0 or layer > 3 for layer in value):
            raise ValueError("layer ids must be in 0..3")
        return sorted(set(value))


class SearchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int = 2
    constraint: Literal["hybrid", "reference_only", "natural_only", "fixed"] = "hybrid"
    crop_size: int = 256
    fd_radius: float = 1e-2
    lr_alpha: float = 2e-1
    lr_beta: float = 3e-2
    lr_omega: float = 2e-4
    num_workers: int = 0
    prune_enabled: bool = True
    retain_p: int = 2
    search_epochs: int = 10
    seed: Optional[int] = None
    theta: Optional[float] = None

    @field_validator("lr_alpha", "lr_beta", "lr_omega", "fd_radius")
    @classmethod
    def _positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be > 0")
        return value

    @field_validator("batch_size", "search_epochs", "retain_p")
    @classmethod
    def _at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator("crop_size")
    @classmethod
    def _crop(cls, value: int) -> int:
        if value < 11:
            raise ValueError("crop_size must be >= 11")
        return value

    @field_validator("theta")
    @classmethod
    def _theta(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not 0 < value < 1:
            raise ValueError("theta must be in (0, 1)")
        return value


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int = 10
    crop_size: int = 256
    epochs: int = 60
    lr: float = 1e-4
    num_workers: int = 0
    resume: str = ""
    save_every: int = 1
    seed: Optional[int] = None

    @field_validator("batch_size", "epochs", "save_every")
    @classmethod
    def _at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator("lr")
    @classmethod
    def _positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be > 0")
        return value

    @field_validator("crop_size")
    @classmethod
    def _crop(cls, value: int) -> int:
        if value < 11:
            raise ValueError("crop_size must be >= 11")
        return value


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    command: Optional[Literal["search", "train", "fuse", "eval"]] = None
    deterministic: bool = True
    extractor: ExtractorConfig = ExtractorConfig()
    network: NetworkConfig = NetworkConfig()
    overrides: Dict[str, str] = {}
    paths: PathsConfig = PathsConfig()
    search: SearchConfig = SearchConfig()
    seed: int = 0
    train: TrainConfig = TrainConfig()

    def resolved_search(self) -> SearchConfig:
        """Search section with its seed falling back to the run seed."""
        seed = self.seed if self.search.seed is None else self.search.seed
        return self.search.model_copy(update={"seed": seed})

    def resolved_train(self) -> TrainConfig:
        seed = self.seed if self.train.seed is None else self.train.seed
        return self.train.model_copy(update={"seed": seed})

    def save(self, path: str):
        """
        Save the config file
        """
        logger.debug("Saving to %s", path)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as outfile:
            json.dump(self.model_dump(), outfile, indent=4, sort_keys=True)

    def load_params(self, params_dict: Dict) -> "RunConfig":
        """Return a copy with the nested values of params_dict applied on top of this config."""
        data = _deep_merge(self.model_dump(), params_dict)
        return _validate(data)

    def apply_overrides(self, overrides: List[str]) -> "RunConfig":
        data = self.model_dump()
        applied = dict(data.get("overrides") or {})
        for item in overrides:
            key, value = parse_override(item)
            _set_dotted(data, key, value)
            applied[key] = item.split("=", 1)[1]
        data["overrides"] = applied
        return _validate(data)

    def require(self, *keys: str):
        """Raise ConfigError when a required `paths` entry is empty."""
        missing = [key for key in keys if not getattr(self.paths, key)]
        if missing:
            raise ConfigError(f"Missing required path(s) for '{self.command}': "
                              + ", ".join(f"paths.{key}" for key in missing))


def parse_override(item: str):
    text = item[2:] if item.startswith("--") else item
    if "=" not in text:
        raise ConfigError(f"Override '{item}' must look like --section.key=value")
    key, raw = text.split("=", 1)
    if not key:
        raise ConfigError(f"Override '{item}' has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _set_dotted(data: Dict, key: str, value):
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"Unknown config section '{part}' in '{key}'")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"Unknown config key '{key}'")
    node[parts[-1]] = value


def _deep_merge(base: Dict, update: Dict) -> Dict:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict) and key != "overrides":
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _validate(data: Dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def from_file(config_file: str) -> RunConfig:
    """
    Load a run config from a JSON file.
    Args:
        config_file: Path of the JSON document

    Returns: RunConfig

    """
    if not os.path.exists(config_file):
        raise ConfigError(f"Config file not found: {config_file}")
    try:
        with open(config_file, "r", encoding="utf-8") as openfile:
            config_dict = json.load(openfile)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {config_file} is not valid JSON: {e}") from e
    if not isinstance(config_dict, dict):
        raise ConfigError(f"Config file {config_file} must hold a JSON object")
    return RunConfig().load_params(config_dict)


def load_run_config(command: Optional[str] = None, config_file: Optional[str] = None,
                    overrides: Optional[List[str]] = None) -> RunConfig:
    """Resolve defaults, then the config file, then dotted command-line overrides."""
    config = from_file(config_file) if config_file else RunConfig()
    if command is not None:
        if command not in COMMANDS:
            raise ConfigError(f"Unknown command '{command}'")
        config = config.load_params({"command": command})
    if overrides:
        config = config.apply_overrides(overrides)
    return config
