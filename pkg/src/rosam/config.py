"""Configuration dataclasses for the model, training, and inference pipelines."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError


@dataclass(frozen=True)
class ModelConfig:
    """Geometric and architectural hyperparameters of the backbone.

    The full geometry uses a 1024-pixel canvas; the default here is a
    CPU-tractable 256-pixel toy geometry that preserves every mechanism.
    """

    canvas_size: int = 256
    patch_size: int = 16
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    lora_rank: int = 4
    mask_stride: int = 4
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.canvas_size <= 0 or self.canvas_size % self.patch_size != 0:
            raise ConfigurationError(
                f"canvas_size ({self.canvas_size}) must be a positive multiple of "
                f"patch_size ({self.patch_size})"
            )
        if self.canvas_size % self.mask_stride != 0:
            raise ConfigurationError(
                f"canvas_size ({self.canvas_size}) must be divisible by "
                f"mask_stride ({self.mask_stride})"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})"
            )
        # Adapted projections are square embed_dim x embed_dim.
        if not 0 < self.lora_rank < self.embed_dim:
            raise ConfigurationError(
                f"lora_rank ({self.lora_rank}) must satisfy 0 < r < {self.embed_dim} "
                "(min dimension of the adapted projections)"
            )
        if self.num_blocks < 1:
            raise ConfigurationError(f"num_blocks ({self.num_blocks}) must be >= 1")

    @property
    def grid_size(self) -> int:
        """Token grid side length."""
        return self.canvas_size // self.patch_size

    @property
    def logit_size(self) -> int:
        """Side length of the decoder's logit grid."""
        return self.canvas_size // self.mask_stride


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters and augmentation switches."""

    epochs: int = 24
    learning_rate: float = 1e-3
    batch_size: int = 1
    alternation_granularity: str = "per_iteration"  # or "per_epoch"
    bce_weight: float = 1.0
    dice_weight: float = 1.0
    weight_decay: float = 1e-4
    use_lsj: bool = True
    lsj_scale_range: tuple[float, float] = (0.1, 4.0)
    use_rotation: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError(f"epochs ({self.epochs}) must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate ({self.learning_rate}) must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size ({self.batch_size}) must be >= 1")
        if self.alternation_granularity not in ("per_iteration", "per_epoch"):
            raise ConfigurationError(
                f"alternation_granularity must be per_iteration or per_epoch, "
                f"got {self.alternation_granularity!r}"
            )
        if self.bce_weight < 0 or self.dice_weight < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.bce_weight == 0 and self.dice_weight == 0:
            raise ConfigurationError("bce_weight and dice_weight cannot both be zero")
        lo, hi = self.lsj_scale_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"lsj_scale_range ({self.lsj_scale_range}) must be 0 < lo <= hi")


@dataclass(frozen=True)
class InferenceConfig:
    """Prompt-centered tiled inference settings."""

    window_size: int = 512
    sampling_rate: int = 2
    interpolation: str = "bicubic"  # or "bilinear"
    single_object: bool = True
    logit_threshold: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.sampling_rate not in (1, 2, 4):
            raise ConfigurationError(f"sampling_rate ({self.sampling_rate}) must be 1, 2, or 4")
        if self.window_size <= 0:
            raise ConfigurationError(f"window_size ({self.window_size}) must be > 0")
        if self.interpolation not in ("bilinear", "bicubic"):
            raise ConfigurationError(
                f"interpolation must be bilinear or bicubic, got {self.interpolation!r}"
            )

    def validate_for_model(self, model: ModelConfig) -> None:
        if self.window_size * self.sampling_rate != model.canvas_size:
            raise ConfigurationError(
                f"window_size ({self.window_size}) x sampling_rate ({self.sampling_rate}) "
                f"must equal canvas_size ({model.canvas_size})"
            )


def _from_dict(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = dict(data)
    if cls is TrainConfig and "lsj_scale_range" in kwargs:
        kwargs["lsj_scale_range"] = tuple(kwargs["lsj_scale_range"])
    return cls(**kwargs)


@dataclass(frozen=True)
class RunConfig:
    """Merged view of all configuration sections plus paths, loadable from one flat JSON file."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferenceConfig = field(default_factory=InferenceConfig)
    dataset_root: str | None = None
    run_dir: str | None = None

    @classmethod
    def load(cls, path: str | Path, overrides: dict | None = None) -> "RunConfig":
        """Load from a JSON file, then apply flat ``section.field`` overrides."""
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(data, overrides)

    @classmethod
    def from_dict(cls, data: dict, overrides: dict | None = None) -> "RunConfig":
        data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
        for key, value in (overrides or {}).items():
            if "." in key:
                section, name = key.split(".", 1)
                data.setdefault(section, {})[name] = value
            else:
                data[key] = value
        known = {"model", "train", "infer", "dataset_root", "run_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            model=_from_dict(ModelConfig, data.get("model", {})),
            train=_from_dict(TrainConfig, data.get("train", {})),
            infer=_from_dict(InferenceConfig, data.get("infer", {})),
            dataset_root=data.get("dataset_root"),
            run_dir=data.get("run_dir"),
        )

    def to_dict(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "infer": dataclasses.asdict(self.infer),
            "dataset_root": self.dataset_root,
            "run_dir": self.run_dir,
        }

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
