"""surfreg package."""

__version__ = "0.1.0"

# Main components
from .cache import RunCache
from .config import RunConfig, SceneConfig, TrainConfig
from .experiment import ExperimentSpec, Report, run_experiment
from .field import FieldOutput, FieldQuery, GridField, RadianceField
from .main import app
from .regularizers import LossWeights, SurfaceCandidate, total_regularization
from .schedule import CurriculumSchedule, is_reg_step, schedule_preview
from .sphere import SampleSphere, SphereSampler, ball_partition, fibonacci_sphere, random_rotation
from .trainer import CurriculumTrainer, finetune, train
from .ui import UIManager

__all__ = [
    "CurriculumSchedule",
    "CurriculumTrainer",
    "ExperimentSpec",
    "FieldOutput",
    "FieldQuery",
    "GridField",
    "LossWeights",
    "RadianceField",
    "Report",
    "RunCache",
    "RunConfig",
    "SampleSphere",
    "SceneConfig",
    "SphereSampler",
    "SurfaceCandidate",
    "TrainConfig",
    "UIManager",
    "app",
    "ball_partition",
    "fibonacci_sphere",
    "finetune",
    "is_reg_step",
    "random_rotation",
    "run_experiment",
    "schedule_preview",
    "total_regularization",
    "train",
]
