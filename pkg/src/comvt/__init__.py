"""Co-attentional multimodal video transformer for future-utterance
prediction, with its data pipeline and training/evaluation harness."""

from .autodiff import (
    GradTape,
    Tensor,
    attention,
    backward,
    finite_diff_check,
    layer_norm,
    no_grad,
    parameter,
    scaled_dot_attention,
    softmax,
    tensor,
)
from .errors import (
    ComvtError,
    ConfigError,
    ContractError,
    DataError,
    EmptyKeySetError,
    NumericError,
)
from .harness import RunConfig, estimate_flops, evaluate, gradcheck, recall_at_k, train
from .optim import LrSchedule, OptimizerState, adam_step, lr_at_step
from .rng import SeededRng

__version__ = "0.1.0"

__all__ = [
    "ComvtError", "ConfigError", "ContractError", "DataError",
    "EmptyKeySetError", "NumericError",
    "GradTape", "Tensor", "attention", "backward", "finite_diff_check",
    "layer_norm", "no_grad", "parameter", "scaled_dot_attention", "softmax",
    "tensor",
    "LrSchedule", "OptimizerState", "adam_step", "lr_at_step",
    "RunConfig", "SeededRng", "estimate_flops", "evaluate", "gradcheck",
    "recall_at_k", "train",
    "__version__",
]
