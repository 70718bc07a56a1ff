"""Tropical-cyclone wind-speed estimation with AlexNet-style regressors.

A reimplementation, on a small numpy autodiff engine, of the single
network, the bagged global ensemble and the Saffir-Simpson-gated mixture of
local experts, plus the dataset handling, metrics and grad-CAM tooling
around them.
"""

from .dataset import BatchSampler, CycloneSample, DatasetIndex, SamplerConfig, event_disjoint_split, load_dataset
from .evaluation import EvalReport, evaluate
from .models import (
    CATEGORIES,
    DistributedModel,
    GlobalEnsemble,
    SaffirSimpsonCategory,
    categorize,
    expert_range,
    moe_predict,
)
from .network import Model, NetworkConfig, build_alexnet, load_checkpoint, param_count, save_checkpoint
from .training import TrainHyper, train

__version__ = "0.1.0"

__all__ = [
    "BatchSampler",
    "CATEGORIES",
    "CycloneSample",
    "DatasetIndex",
    "DistributedModel",
    "EvalReport",
    "GlobalEnsemble",
    "Model",
    "NetworkConfig",
    "SaffirSimpsonCategory",
    "SamplerConfig",
    "TrainHyper",
    "build_alexnet",
    "categorize",
    "evaluate",
    "event_disjoint_split",
    "expert_range",
    "load_checkpoint",
    "load_dataset",
    "moe_predict",
    "param_count",
    "save_checkpoint",
    "train",
]
