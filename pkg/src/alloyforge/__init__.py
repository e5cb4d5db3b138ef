"""Desk-scale post-training toolkit: SLERP merging, a toy GQA/RoPE/SwiGLU
decoder, DPO and skew-KL distillation, and needle-in-a-haystack evaluation."""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, ModelConfig, read_checkpoint, tensor_stats, write_checkpoint  # noqa: E402
from .merge import MergeSchedule, merge_checkpoints, slerp_vectors  # noqa: E402
from .transformer import ToyModel  # noqa: E402

__all__ = [
    "Checkpoint",
    "MergeSchedule",
    "ModelConfig",
    "ToyModel",
    "merge_checkpoints",
    "read_checkpoint",
    "slerp_vectors",
    "tensor_stats",
    "write_checkpoint",
]
