"""Majority-vote preference aggregation for DPO fine-tuning of a toy conditional diffusion model."""

from .aggregate import SKIP, AggregationPolicy, label_dataset, label_pair, majority_consensus
from .config import ExperimentConfig, load_config, parse_config_text
from .dpo import DpoConfig, balanced_loss_and_grad, vanilla_loss_and_grad
from .prefcore import ConsensusLabel, PreferencePair, ScoreVector, ValidationError, seeded_rng
from .rewards import RewardRegistry, RewardSpec, default_registry

__version__ = "0.1.0"

__all__ = [
    "SKIP", "AggregationPolicy", "label_dataset", "label_pair", "majority_consensus",
    "ExperimentConfig", "load_config", "parse_config_text",
    "DpoConfig", "balanced_loss_and_grad", "vanilla_loss_and_grad",
    "ConsensusLabel", "PreferencePair", "ScoreVector", "ValidationError", "seeded_rng",
    "RewardRegistry", "RewardSpec", "default_registry",
]
