"""Intervention-driven relation segmentation on a small numpy autodiff engine."""

from .autodiff import Tensor, no_grad
from .config import ConfigError, RunConfig, parse_config
from .diagnostics import DeletionCounter, deletion_probabilities, diagnose, relation_delta, sample_deletion, update_relations
from .grouping import PrototypeStore, SemanticBank, group
from .interaction import RelationState, interact, scatter, transform_relations
from .model import ModelConfig, SegmentationNet
from .scenes import SceneRule, generate, make_dataset, miou
from .train import Trainer, ablate, inspect_relations

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DeletionCounter",
    "ModelConfig",
    "PrototypeStore",
    "RelationState",
    "RunConfig",
    "SceneRule",
    "SegmentationNet",
    "SemanticBank",
    "Tensor",
    "Trainer",
    "ablate",
    "deletion_probabilities",
    "diagnose",
    "generate",
    "group",
    "inspect_relations",
    "interact",
    "make_dataset",
    "miou",
    "no_grad",
    "parse_config",
    "relation_delta",
    "sample_deletion",
    "scatter",
    "transform_relations",
    "update_relations",
]
