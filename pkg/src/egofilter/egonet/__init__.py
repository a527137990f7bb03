"""Learned mapping from played to microphone-observed magnitude spectrograms."""

from egofilter.egonet.network import (
    EgoNetConfig,
    EgoNetWeights,
    ReceptiveFieldError,
    forward,
    forward_compressed,
    gradient,
    init_weights,
    loss_and_gradient,
    param_count,
    param_count_closed_form,
    power_law_loss,
)
from egofilter.egonet.optim import AdamState, NonFiniteGradientError, adam_step
from egofilter.egonet.serialization import (
    BadMagicError,
    ChecksumError,
    InconsistentShapeError,
    TruncatedError,
    VersionMismatchError,
    WeightsFormatError,
    load_weights,
    save_weights,
)
from egofilter.egonet.training import train

__all__ = [
    "AdamState",
    "BadMagicError",
    "ChecksumError",
    "EgoNetConfig",
    "EgoNetWeights",
    "InconsistentShapeError",
    "NonFiniteGradientError",
    "ReceptiveFieldError",
    "TruncatedError",
    "VersionMismatchError",
    "WeightsFormatError",
    "adam_step",
    "forward",
    "forward_compressed",
    "gradient",
    "init_weights",
    "load_weights",
    "loss_and_gradient",
    "param_count",
    "param_count_closed_form",
    "power_law_loss",
    "save_weights",
    "train",
]
