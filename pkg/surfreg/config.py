"""Flat ``section.key=value`` configuration for training runs and experiments."""

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Union, get_type_hints

from .errors import ConfigError, GeometryError
from .regularizers import BIAS_DENOMINATORS, TV_TARGETS, LossWeights, RegularizerSettings
from .schedule import CurriculumSchedule
from .scene import SCENE_KINDS
from .sphere import U64_MAX, LatticeConfig

FINETUNE_LEARNING_RATE = 3.25e-4
LR_SCHEDULES = ("cosine", "fixed")
DTYPES = ("float32", "float64")


@dataclass
class TrainConfig:
    """Optimisation, regularisation and field-size settings of one run."""

    learning_rate: float = 0.02
    lr_final: float = 0.002
    lr_schedule: str = "cosine"
    batch_size: int = 1024
    seed: int = 0
    n_samples: int = 32
    samples_per_ray: int = 64
    reg_fraction: float = 1.0
    knn_k: int = 3
    bias_denominator: str = "channel_max"
    use_bias_loss: bool = True
    tv_target: str = "specular"
    regularize: bool = True
    dtype: str = "float32"
    log_every: int = 100
    checkpoint_every: int = 500
    grid_resolution: int = 64
    color_resolution: int = 32
    feature_dim: int = 8
    hidden_dim: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: CurriculumSchedule = field(
        default_factory=lambda: CurriculumSchedule(64, 4, 2000)
    )

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be positive")
        if self.learning_rate < 0 or self.lr_final < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"train.lr_schedule must be one of {LR_SCHEDULES}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"train.dtype must be one of {DTYPES}")
        if not 0 < self.reg_fraction <= 1:
            raise ConfigError("train.reg_fraction must be in (0, 1]")
        if self.bias_denominator not in BIAS_DENOMINATORS:
            raise ConfigError(f"train.bias_denominator must be one of {BIAS_DENOMINATORS}")
        if self.tv_target not in TV_TARGETS:
            raise ConfigError(f"train.tv_target must be one of {TV_TARGETS}")
        if not 0 <= self.seed <= U64_MAX:
            raise ConfigError("train.seed must be in [0, 2**64)")
        if self.samples_per_ray < 1:
            raise ConfigError("train.samples_per_ray must be positive")
        if self.knn_k >= self.n_samples:
            raise ConfigError("train.knn_k must be smaller than train.n_samples")
        for name in ("grid_resolution", "color_resolution"):
            if getattr(self, name) < 2:
                raise ConfigError(f"train.{name} must be at least 2")
        try:
            LatticeConfig(self.n_samples, self.seed)
        except GeometryError as e:
            raise ConfigError(f"train.n_samples: {e}") from e

    @property
    def lattice(self) -> LatticeConfig:
        return LatticeConfig(self.n_samples, self.seed)

    @property
    def regularizer_settings(self) -> RegularizerSettings:
        return RegularizerSettings(self.knn_k, self.bias_denominator, self.use_bias_loss, self.tv_target)

    def control(self) -> "TrainConfig":
        """Same run with regularisation switched off."""
        return replace(self, regularize=False)

    def for_finetuning(self, use_bias_loss: bool = None, tv_target: str = None) -> "TrainConfig":
        """Fixed learning rate, regularising at the final period throughout."""
        schedule = CurriculumSchedule.constant(self.schedule.final_period, self.schedule.total_iterations)
        return replace(
            self,
            learning_rate=FINETUNE_LEARNING_RATE,
            lr_final=FINETUNE_LEARNING_RATE,
            lr_schedule="fixed",
            schedule=schedule,
            use_bias_loss=self.use_bias_loss if use_bias_loss is None else use_bias_loss,
            tv_target=self.tv_target if tv_target is None else tv_target,
        )


@dataclass
class SceneConfig:
    """Analytic scene and the views rendered from it."""

    kind: str = "plane"
    views: int = 20
    image_size: int = 48
    eval_views: int = 4

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ConfigError(f"scene.kind must be one of {SCENE_KINDS}")
        if self.views < 1 or self.eval_views < 0 or self.image_size < 2:
            raise ConfigError("scene.views, scene.eval_views and scene.image_size are out of range")


@dataclass
class RunConfig:
    """Everything a config file describes."""

    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)

    def digest(self) -> str:
        """Stable hash of the serialised config."""
        return hashlib.sha256(serialize_config(self).encode("utf-8")).hexdigest()[:16]


_SECTIONS = {
    "train": lambda cfg: cfg.train,
    "weights": lambda cfg: cfg.train.weights,
    "schedule": lambda cfg: cfg.train.schedule,
    "scene": lambda cfg: cfg.scene,
}


def _scalar_fields(obj) -> Dict[str, type]:
    hints = get_type_hints(type(obj))
    return {
        f.name: hints[f.name]
        for f in fields(obj)
        if hints[f.name] in (int, float, str, bool)
    }


def _parse_value(raw: str, kind: type, key: str) -> Any:
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"invalid value for {key}: '{raw.strip()}'") from e


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: RunConfig = None) -> RunConfig:
    """Parse config text; unknown keys and bad values raise ConfigError."""
    base = base or RunConfig()
    updates: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key=value', got '{stripped}'")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key '{key}' has no section prefix")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section '{section}'")
        known = _scalar_fields(_SECTIONS[section](base))
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        updates[section][name] = _parse_value(value, known[name], key)

    train = base.train
    weights = replace(train.weights, **updates["weights"])
    schedule = replace(train.schedule, **updates["schedule"])
    train = replace(train, weights=weights, schedule=schedule, **updates["train"])
    scene = replace(base.scene, **updates["scene"])
    return RunConfig(train=train, scene=scene)


def serialize_config(config: RunConfig) -> str:
    """Every documented key, one per line, in a stable order."""
    lines = []
    for section, getter in _SECTIONS.items():
        obj = getter(config)
        for name in _scalar_fields(obj):
            lines.append(f"{section}.{name}={_format_value(getattr(obj, name))}")
    return "\n".join(lines) + "\n"


def load_config(path: Union[str, Path]) -> RunConfig:
    """Read a config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config(text)


def save_config(config: RunConfig, path: Union[str, Path]):
    Path(path).write_text(serialize_config(config), encoding="utf-8")
