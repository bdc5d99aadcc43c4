"""Composable blocks for interfacing frozen perceptual encoders with frozen LMs.

The package implements every extraction / mapping / injection /
fine-tuning mechanism as a block, a toy frozen encoder+LM pair to host
them, a deterministic training harness on a synthetic captioning task,
and an accounting suite for trainable-parameter and step-cost claims.
"""

from .adapter import AdapterModel
from .config import AdapterConfig, expand_preset, preset_names
from .estimator import PerceptualCaptioner
from .task import SyntheticTaskSpec
from .train import greedy_decode, pretrain_toy_lm, train

__version__ = "0.1.0"

__all__ = [
    "AdapterModel",
    "AdapterConfig",
    "PerceptualCaptioner",
    "SyntheticTaskSpec",
    "expand_preset",
    "preset_names",
    "greedy_decode",
    "pretrain_toy_lm",
    "train",
    "__version__",
]
