import numpy as np

from alloyforge.checkpoint import Checkpoint, ModelConfig


def random_checkpoint(rng, max_tensors=6, config=None):
    n = int(rng.integers(0, max_tensors + 1))
    tensors = {}
    for i in range(n):
        shape = tuple(int(s) for s in rng.integers(1, 6, size=int(rng.integers(1, 4))))
        dtype = np.float32 if rng.random() < 0.5 else np.float64
        tensors[f"layers.{i}.blk.w{int(rng.integers(0, 99))}"] = rng.normal(size=shape).astype(dtype)
    return Checkpoint(tensors, config or ModelConfig())
