"""Post-training objectives and toy trainers."""

from .config import ConfigError, DpoConfig, SftConfig, SkldConfig
from .data import PreferencePair, SftExample
from .distill import ReplayBuffer, distill_generate, distill_train, heldout_skld
from .dpo import ConstantScorer, LogProbScorer, dpo_train, online_dpo_step
from .losses import dpo_loss, sft_loss, skld, skld_token_loss
from .sft import sft_train

__all__ = [
    "ConfigError",
    "ConstantScorer",
    "DpoConfig",
    "LogProbScorer",
    "PreferencePair",
    "ReplayBuffer",
    "SftConfig",
    "SftExample",
    "SkldConfig",
    "distill_generate",
    "distill_train",
    "dpo_loss",
    "dpo_train",
    "heldout_skld",
    "online_dpo_step",
    "sft_loss",
    "sft_train",
    "skld",
    "skld_token_loss",
]
