"""Continual learning by merging per-task PEFT modules on a frozen backbone."""

__version__ = "0.1.0"

from .backbone import (
    BackboneConfig,
    BackboneParams,
    ClassifierModel,
    backbone_forward,
    pretrain_backbone,
)
from .bench import generate_suite, standard_orders
from .peft import PeftConfig, PeftParamSet, init_mean, init_pre, init_random
from .runner import (
    RunReport,
    TrainConfig,
    evaluate,
    run_ft_baseline,
    run_mtl_baseline,
    run_replay_baseline,
    run_sequential,
    train_task,
)
from .task_vector import (
    MergeConfig,
    TaskVector,
    apply,
    combine,
    compute_task_vector,
    fold_lora,
    lambda_sweep,
    load_container,
    save_container,
)

__all__ = [
    "BackboneConfig",
    "BackboneParams",
    "ClassifierModel",
    "MergeConfig",
    "PeftConfig",
    "PeftParamSet",
    "RunReport",
    "TaskVector",
    "TrainConfig",
    "apply",
    "backbone_forward",
    "combine",
    "compute_task_vector",
    "evaluate",
    "fold_lora",
    "generate_suite",
    "init_mean",
    "init_pre",
    "init_random",
    "lambda_sweep",
    "load_container",
    "pretrain_backbone",
    "run_ft_baseline",
    "run_mtl_baseline",
    "run_replay_baseline",
    "run_sequential",
    "save_container",
    "standard_orders",
    "train_task",
]
