"""
Configuration models for every pipeline stage.

Defaults live in ``default_config.json`` next to this module; ``load_config``
overlays a user JSON file on top of them. Unknown keys are rejected.
"""

import copy
import json
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..core.errors import ConfigError, DataIOError

DEFAULT_CONFIG_PATH = Path(__file__).parent / "default_config.json"


class StrictModel(BaseModel):
    """Base model that rejects unknown keys and is immutable once built."""
    model_config = ConfigDict(extra="forbid", frozen=True)


class PreprocessConfig(StrictModel):
    target_height: int = Field(128, ge=16)
    target_width: int = Field(96, ge=16)
    pad_fraction: float = Field(0.02, ge=0.0, le=0.25)

    @classmethod
    def preset(cls, name: str) -> "PreprocessConfig":
        """Named input sizes: ``desk`` (128x96), ``square512``, ``wide1024``."""
        sizes = {"desk": (128, 96), "square512": (512, 512), "wide1024": (1024, 768)}
        if name not in sizes:
            raise ConfigError(f"Unknown preprocess preset {name!r}")
        height, width = sizes[name]
        return cls(target_height=height, target_width=width)


class ExtractorConfig(StrictModel):
    grid_h: int = Field(16, ge=1)
    grid_w: int = Field(12, ge=1)
    stats_per_cell: Literal[4] = 4
    channels: int = Field(64, ge=4)
    lr_max: float = Field(0.01, gt=0.0)
    lr_min: float = Field(1e-5, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    epochs: int = Field(50, ge=1)
    patience: int = Field(15, ge=1)
    batch_size: int = Field(32, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self) -> "ExtractorConfig":
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be smaller than lr_max")
        if self.patience > self.epochs:
            raise ValueError("patience must not exceed epochs")
        return self

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "ExtractorConfig":
        """``desk`` (64 channels) or ``full`` (512 channels)."""
        channels = {"desk": 64, "full": 512}
        if name not in channels:
            raise ConfigError(f"Unknown extractor preset {name!r}")
        return cls(channels=channels[name], **overrides)


class GbdtConfig(StrictModel):
    n_rounds: int = Field(100, ge=1)
    learning_rate: float = Field(0.1, gt=0.0)
    max_leaves: int = Field(31, ge=2)
    min_samples_leaf: int = Field(5, ge=1)
    reg_lambda: float = Field(1.0, ge=0.0)
    gamma: float = Field(0.0, ge=0.0)
    max_bins: int = Field(255, ge=2, le=255)
    early_stop_rounds: Optional[int] = Field(10, ge=1)
    seed: int = 0


class StratifyConfig(StrictModel):
    train: float = Field(0.70, gt=0.0, lt=1.0)
    val: float = Field(0.15, gt=0.0, lt=1.0)
    test: float = Field(0.15, gt=0.0, lt=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_sum(self) -> "StratifyConfig":
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("train + val + test must sum to 1")
        return self


class SynthConfig(StrictModel):
    n_train: int = Field(600, ge=1)
    n_val: int = Field(150, ge=1)
    n_test: int = Field(150, ge=1)
    height: int = Field(128, ge=16)
    width: int = Field(96, ge=16)
    p_vis: float = Field(0.6, ge=0.0, le=1.0)
    noise_sigma: float = Field(4.0, ge=0.0)
    density_jitter: float = Field(0.3, ge=0.0, le=1.0)
    seed: int = 0
    scheme: Literal["birads5", "pathology3"] = "birads5"


class PathsConfig(StrictModel):
    workspace: str = "."
    manifest: str = "manifest.csv"
    outputs: str = "outputs"


class PipelineConfig(StrictModel):
    scheme: Literal["birads5", "pathology3"] = "birads5"
    seed: int = 0
    jobs: int = Field(1, ge=1)
    preprocess: PreprocessConfig = PreprocessConfig()
    extractor: ExtractorConfig = ExtractorConfig()
    gbdt: GbdtConfig = GbdtConfig()
    stratify: StratifyConfig = StratifyConfig()
    synth: SynthConfig = SynthConfig()
    paths: PathsConfig = PathsConfig()

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy with ``seed`` applied to the pipeline and every stage."""
        return self.model_copy(update={
            "seed": seed,
            "extractor": self.extractor.model_copy(update={"seed": seed}),
            "gbdt": self.gbdt.model_copy(update={"seed": seed}),
            "stratify": self.stratify.model_copy(update={"seed": seed}),
            "synth": self.synth.model_copy(update={"seed": seed}),
        })

    def with_scheme(self, scheme: str) -> "PipelineConfig":
        return self.model_copy(update={
            "scheme": scheme,
            "synth": self.synth.model_copy(update={"scheme": scheme}),
        })


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _read_json(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise DataIOError(f"Config file '{path}' not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file '{path}' is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"Config file '{path}' must hold a JSON object")
    return data


def build_config(data: Dict[str, Any]) -> PipelineConfig:
    """Validate a config dictionary, naming the offending key on failure."""
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            key = ".".join(str(part) for part in err["loc"]) or "<root>"
            problems.append(f"{key}: {err['msg']}")
        raise ConfigError("Invalid configuration: " + "; ".join(problems)) from None


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """
    Load the packaged defaults, overlaid with ``path`` when given.

    Raises:
        ConfigError: unknown key, out-of-range value or malformed JSON.
        DataIOError: the file does not exist.
    """
    data = _read_json(DEFAULT_CONFIG_PATH)
    if path is not None:
        data = _deep_merge(data, _read_json(Path(path)))
    return build_config(data)
