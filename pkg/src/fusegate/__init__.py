"""Adaptive per-channel temporal fusion for video classification.

Channels of a gated convolution are kept (computed), reused (copied from the
previous frame's raw output) or skipped (zero-filled), chosen per frame and
per sample by a small policy network trained end to end with a
straight-through Gumbel-Softmax estimator against an analytic FLOP budget.
"""

from .tensor import Tensor, Tape, backward
from .errors import (FusegateError, DimensionError, ContractError, NumericError,
                     ConfigError, FormatError, TrainingDiverged)
from .gating import (FusionGate, GumbelSample, PolicyNet, PolicyTrace, GateTrace,
                     block_cost, block_cost_relaxed, conv_flops, fuse,
                     gate_forward, gumbel_softmax)
from .model import (BaselinePolicy, CostReport, ToyNet, ToyNetConfig,
                    apply_baseline_policy, consensus, count_params)
from .data import SynthMotionSpec, VideoBatch, generate, load, load_all
from .train import MetricsRecord, TrainConfig, evaluate, loss_terms, lr_at, sgd_step, train
from .analysis import PolicyStats, aggregate, trend_fit

__all__ = [
    "Tensor", "Tape", "backward",
    "FusegateError", "DimensionError", "ContractError", "NumericError",
    "ConfigError", "FormatError", "TrainingDiverged",
    "FusionGate", "GumbelSample", "PolicyNet", "PolicyTrace", "GateTrace",
    "block_cost", "block_cost_relaxed", "conv_flops", "fuse", "gate_forward",
    "gumbel_softmax",
    "BaselinePolicy", "CostReport", "ToyNet", "ToyNetConfig",
    "apply_baseline_policy", "consensus", "count_params",
    "SynthMotionSpec", "VideoBatch", "generate", "load", "load_all",
    "MetricsRecord", "TrainConfig", "evaluate", "loss_terms", "lr_at",
    "sgd_step", "train",
    "PolicyStats", "aggregate", "trend_fit",
]

__version__ = "0.1.0"
