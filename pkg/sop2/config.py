from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigurationError


class Settings(BaseSettings):
    # Logging
    log_level: str = "INFO"
    log_json: bool = True

    # Run defaults
    seed: int = 0
    sweep_workers: int = 1  # parallel processes for cmd_sweep
    nan_check: bool = True

    model_config = SettingsConfigDict(
        env_prefix="SOP2_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


settings = Settings()


class PromptMode(str, Enum):
    NONE = "none"
    TOKEN = "token"
    GENERATOR = "generator"
    POOL = "pool"


class TuningMode(str, Enum):
    FROM_SCRATCH = "from_scratch"
    HEAD_FINETUNE = "head_finetune"
    FULL_FINETUNE = "full_finetune"
    BITFIT = "bitfit"
    LORA = "lora"
    PROMPT_TOKEN = "prompt_token"
    PROMPT_GENERATOR = "prompt_generator"
    SOP2 = "sop2"
    SOP2_PLUS_LORA = "sop2_plus_lora"


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        value = value.strip()
        return [item.strip() for item in value.split(",")] if value else []
    return value


class ModelConfig(BaseModel):
    """Every hyperparameter of the detector; defaults follow the full-scale setup."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    # Backbone
    channels: int = Field(192, ge=1)
    blocks: int = Field(4, ge=1)
    set_size: int = Field(36, ge=1)
    heads: int = Field(8, ge=1)
    window_sizes: List[Tuple[int, int]] = Field(default_factory=list)
    mlp_ratio: int = Field(2, ge=1)
    head_channels: int = Field(64, ge=1)
    vfe_layers: int = Field(1, ge=1)

    # Voxelization
    grid_size: Tuple[float, float, float] = (0.32, 0.32, 6.0)
    extent: Tuple[float, float, float, float, float, float] = (0.0, 0.0, -2.0, 46.08, 46.08, 4.0)
    max_points_per_voxel: int = Field(32, ge=1)

    # Prompt mechanisms
    prompt_mode: PromptMode = PromptMode.NONE
    prompt_partitions: List[int] = Field(default_factory=list)
    num_tokens: int = Field(1, ge=0)
    num_generated: int = Field(1, ge=1)
    generator_layers: int = Field(4, ge=1)
    pool_size: int = Field(40, ge=1)
    prompt_length: int = Field(5, ge=1)
    top_k: int = Field(8, ge=1)
    key_pull_weight: float = Field(0.1, ge=0.0)
    prompt_init: float = Field(0.02, gt=0.0)

    # LoRA
    lora_rank: int = Field(4, ge=1)
    lora_alpha: float = Field(8.0, gt=0.0)

    # Numerics
    ln_eps: float = Field(1e-5, gt=0.0)
    cos_eps: float = Field(1e-8, gt=0.0)
    seed: int = 0

    @field_validator("grid_size", "extent", "prompt_partitions", mode="before")
    @classmethod
    def _csv_fields(cls, value: Any) -> Any:
        return _split_csv(value)

    @field_validator("window_sizes", mode="before")
    @classmethod
    def _window_pairs(cls, value: Any) -> Any:
        value = _split_csv(value)
        if isinstance(value, list):
            return [tuple(item.lower().split("x")) if isinstance(item, str) else item for item in value]
        return value

    @model_validator(mode="before")
    @classmethod
    def _fill_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        blocks = int(data.get("blocks", 4))
        if not _split_csv(data.get("window_sizes")):
            # Hybrid windows alternate block by block.
            data["window_sizes"] = [(12, 12) if b % 2 == 0 else (24, 24) for b in range(blocks)]
        if data.get("prompt_partitions") is None:
            data["prompt_partitions"] = list(range(1, 2 * blocks + 1))
        return data

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.channels % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide channels ({self.channels})")
        if self.top_k > self.pool_size:
            raise ValueError(f"top_k ({self.top_k}) exceeds pool_size ({self.pool_size})")
        if len(self.window_sizes) != self.blocks:
            raise ValueError(f"need {self.blocks} window sizes, got {len(self.window_sizes)}")
        if any(w < 1 for pair in self.window_sizes for w in pair):
            raise ValueError("window sizes must be >= 1")
        bad = [j for j in self.prompt_partitions if not 1 <= j <= 2 * self.blocks]
        if bad:
            raise ValueError(f"prompt partitions {bad} outside 1..{2 * self.blocks}")
        if len(set(self.prompt_partitions)) != len(self.prompt_partitions):
            raise ValueError("prompt partitions repeat")
        if any(d <= 0 for d in self.grid_size):
            raise ValueError("grid size must be positive")
        for axis in range(3):
            if self.extent[axis + 3] <= self.extent[axis]:
                raise ValueError("extent is empty")
        for axis in range(2):
            cells = (self.extent[axis + 3] - self.extent[axis]) / self.grid_size[axis]
            if abs(cells - round(cells)) > 1e-6:
                raise ValueError("extent must be a whole number of grid cells")
        return self

    @property
    def num_partitions(self) -> int:
        return 2 * self.blocks

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return (
            int(round((self.extent[3] - self.extent[0]) / self.grid_size[0])),
            int(round((self.extent[4] - self.extent[1]) / self.grid_size[1])),
        )

    def mode_for(self, partition: int) -> PromptMode:
        """Prompt mechanism attached to 1-based ``partition``."""
        return self.prompt_mode if partition in self.prompt_partitions else PromptMode.NONE

    def backbone_signature(self) -> str:
        """Canonical text of the fields that fix backbone and head tensor shapes."""
        keys = (
            "channels", "blocks", "set_size", "heads", "window_sizes", "mlp_ratio",
            "head_channels", "vfe_layers", "grid_size", "extent", "max_points_per_voxel",
        )
        return "\n".join(f"model.{k}={format_value(getattr(self, k))}" for k in keys)


class DomainParams(BaseModel):
    """Knobs of the synthetic scene generator; source and target differ in these."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    density: float = Field(2.0, gt=0.0)  # ground points per m^2
    sensor_height: float = 0.0  # m, shifts every z
    intensity_bias: float = 0.0
    box_scale: float = Field(1.0, gt=0.0)
    class_mix: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    boxes_per_scene: int = Field(6, ge=0)
    box_density_boost: float = Field(6.0, gt=0.0)

    @field_validator("class_mix", mode="before")
    @classmethod
    def _csv_mix(cls, value: Any) -> Any:
        return _split_csv(value)

    @field_validator("class_mix")
    @classmethod
    def _mix_is_distribution(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(p < 0 for p in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"class mix {value} is not a probability distribution")
        return value


SOURCE_DOMAIN = DomainParams()
TARGET_DOMAIN = DomainParams(
    density=1.2,
    sensor_height=0.3,
    intensity_bias=0.15,
    box_scale=0.85,
    class_mix=(0.4, 0.35, 0.25),
)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: TuningMode = TuningMode.SOP2
    epochs: int = Field(50, ge=0)
    lr: float = Field(1e-2, gt=0.0)
    warmup: float = Field(0.05, ge=0.0, lt=1.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    fraction: float = Field(1.0, gt=0.0, le=1.0)
    scenes: int = Field(8, ge=1)
    eval_scenes: int = Field(4, ge=1)
    source_scenes: int = Field(16, ge=1)
    pretrain_epochs: int = Field(100, ge=0)
    pretrain_lr: float = Field(1e-3, gt=0.0)
    seed: int = 0


_SECTIONS = ("model", "train", "source", "target")


class RunConfig(BaseModel):
    """Everything one experiment needs, readable from a ``section.key=value`` file."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    source: DomainParams = SOURCE_DOMAIN
    target: DomainParams = TARGET_DOMAIN

    def to_text(self) -> str:
        lines = []
        for section in _SECTIONS:
            part: BaseModel = getattr(self, section)
            for key in sorted(type(part).model_fields):
                lines.append(f"{section}.{key}={format_value(getattr(part, key))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        raw: Dict[str, Dict[str, str]] = {s: {} for s in _SECTIONS}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            section, _, field = key.partition(".")
            if section not in raw or not field:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
            model_cls = cls.model_fields[section].annotation
            assert isinstance(model_cls, type) and issubclass(model_cls, BaseModel)
            if field not in model_cls.model_fields:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
            raw[section][field] = value
        try:
            return cls(
                model=ModelConfig(**raw["model"]),
                train=TrainConfig(**raw["train"]),
                source=DomainParams.model_validate({**SOURCE_DOMAIN.model_dump(), **raw["source"]}),
                target=DomainParams.model_validate({**TARGET_DOMAIN.model_dump(), **raw["target"]}),
            )
        except ValidationError as exc:
            raise ConfigurationError(str(exc)) from exc

    def with_overrides(self, **sections: Dict[str, Any]) -> "RunConfig":
        """Copy with per-section field overrides, re-validated."""
        try:
            parts = {
                name: type(getattr(self, name)).model_validate(
                    {**getattr(self, name).model_dump(), **sections.get(name, {})}
                )
                for name in _SECTIONS
            }
        except ValidationError as exc:
            raise ConfigurationError(str(exc)) from exc
        return RunConfig(**parts)


def format_value(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], tuple):
            return ",".join("x".join(str(v) for v in pair) for pair in value)
        return ",".join(format_value(v) for v in value)
    return str(value)


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return RunConfig.from_text(path.read_text(encoding="utf-8"))


def full_config() -> RunConfig:
    """Full-scale dimensions (192 channels, 4 blocks, M=40, n_P=5, K=8)."""
    return RunConfig()


def desk_config(**model_overrides: Any) -> RunConfig:
    """Small dimensions that train in seconds on one core."""
    model = {
        "channels": 32,
        "heads": 4,
        "blocks": 2,
        "head_channels": 16,
        "extent": (0.0, 0.0, -2.0, 7.68, 7.68, 4.0),
        "pool_size": 8,
        "prompt_length": 2,
        "top_k": 2,
    }
    model.update(model_overrides)
    domain = {"boxes_per_scene": 2}
    return RunConfig(
        model=ModelConfig(**model),
        train=TrainConfig(),
        source=DomainParams(**domain),
        target=TARGET_DOMAIN.model_copy(update=domain),
    )
