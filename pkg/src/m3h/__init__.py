"""Multimodal multitask learning with cross-task attention and task-interaction scores."""

from m3h.data import Dataset, ModalitySchema, Sample, SynthConfig, TaskSpec, load_dataset, synth_generate, write_dataset
from m3h.errors import (
    CapacityError,
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    FormatError,
    M3HError,
    NumericError,
)
from m3h.model import AttentionParams, Model, ModelConfig, cross_task_attention, load_model, save_model
from m3h.numerics import ProblemClass, Tensor
from m3h.training import TrainConfig, cross_validate, score_model, train

__version__ = "0.1.0"
