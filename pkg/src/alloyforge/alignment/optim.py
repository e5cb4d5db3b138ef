import math

import numpy as np


def cosine_lr(step, total_steps, base_lr, warmup_steps=0):
    """Linear warmup then cosine decay to zero; ``step`` is 0-based."""
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Plain Adam over a ToyModel's parameter dict, updated in place."""

    def __init__(self, model, lr, betas=(0.9, 0.999), eps=1e-8):
        self.model = model
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params.items()}

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        if lr == 0:
            return
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.model.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.model.mark_updated()


def add_into(acc, grads, scale=1.0):
    """acc += scale * grads, key by key; returns acc."""
    for k, g in grads.items():
        if k in acc:
            acc[k] += scale * g
        else:
            acc[k] = scale * g
    return acc
