"""Deterministic numpy network core: layers, model container and training."""

from .layers import (
    BatchNorm,
    ConfigurationError,
    Conv2d,
    Dense,
    Flatten,
    ForwardContext,
    Layer,
    ReLU,
    RngSource,
    ShapeError,
    Sign,
    Softmax,
    WEIGHT_LAYERS,
    WeightNoise,
    binarize_ste,
    binarize_ste_grad,
    sign,
    softmax,
    ste_mask,
)
from .model import (
    EVAL,
    TRAIN,
    Model,
    NonFiniteLossError,
    backward,
    cross_entropy,
    forward,
    mse,
    one_hot,
)
from .train import (
    SGD,
    Adam,
    CrossEntropyObjective,
    TrainConfig,
    TrainingDivergedError,
    TrainLog,
    VariationSpec,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
