"""Sequence-level and distribution-matching distillation."""

import logging
from collections import deque

import numpy as np

from ..transformer import response_log_probs
from .losses import skld_token_loss
from .optim import Adam, add_into

log = logging.getLogger(__name__)


class ReplayBuffer:
    """Fixed-capacity store of student generations; evicts oldest first."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)
        self.reads = 0

    def __len__(self):
        return len(self._items)

    def push(self, item, epoch=0):
        self._items.append((item, epoch))

    def items(self):
        return [it for it, _ in self._items]

    def epochs(self):
        return [ep for _, ep in self._items]

    def sample(self, n, rng):
        """``n`` items drawn uniformly with replacement."""
        if not self._items:
            raise IndexError("sample from an empty replay buffer")
        self.reads += 1
        idx = rng.integers(0, len(self._items), n)
        return [self._items[i][0] for i in idx]


def distill_generate(teacher, prompts, max_new_tokens=8, temperature=0.0, seed=0):
    """Teacher continuations for each prompt, as (prompt, response) pairs.

    Output is reproducible for a given seed; temperature 0 is greedy.
    """
    rng = np.random.default_rng(seed)
    out = []
    for p in prompts:
        out.append((list(p), teacher.generate(p, max_new_tokens, temperature, rng)))
    return out


def skld_sequence_grad(student, teacher, prompt, response, alpha):
    """SKLD over the response positions, teacher constant; returns (loss, grads)."""
    _, t_rows, _ = response_log_probs(teacher, prompt, response)
    _, s_rows, full = response_log_probs(student, prompt, response, keep=True)
    loss, g_rows = skld_token_loss(s_rows, t_rows, alpha)
    P, R = len(prompt), len(response)
    up = np.zeros((len(full), student.config.vocab_size))
    up[P - 1 : P - 1 + R] = g_rows
    return loss, student.backward(full, up)


def heldout_skld(student, teacher, prompts, max_new_tokens=8, alpha=0.1):
    """Mean SKLD of the student on greedy teacher continuations of ``prompts``."""
    vals = []
    for prompt, resp in distill_generate(teacher, prompts, max_new_tokens, 0.0):
        if not resp:
            continue
        _, t_rows, _ = response_log_probs(teacher, prompt, resp)
        _, s_rows, _ = response_log_probs(student, prompt, resp)
        vals.append(skld_token_loss(s_rows, t_rows, alpha)[0])
    return float(np.mean(vals))


def distill_train(student, teacher, prompts, cfg, history=None, buffer=None):
    """Skew-KL distillation with an adaptive share of student-generated outputs.

    Each batch takes ``round(sgo_ratio * batch)`` sequences from the replay
    buffer (after pushing that many fresh student samples) and the rest from
    teacher samples. ``sgo_ratio`` moves by ``adapt_step`` after every epoch,
    clamped to [0, 1]. Updates ``student`` in place and returns it.
    """
    if not prompts:
        raise ValueError("empty prompt list")
    if student is teacher:
        raise ValueError("student and teacher must be distinct models")
    buffer = buffer if buffer is not None else ReplayBuffer(cfg.buffer_capacity)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(student, cfg.learning_rate)
    ratio = cfg.sgo_ratio
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(prompts))
        losses = []
        for start in range(0, len(prompts), cfg.batch_size):
            batch = [list(prompts[i]) for i in order[start : start + cfg.batch_size]]
            n_sgo = int(round(ratio * len(batch)))
            seqs = []
            if n_sgo:
                for p in batch[:n_sgo]:
                    buffer.push((p, student.generate(p, cfg.max_new_tokens, cfg.temperature, rng)), epoch)
                seqs.extend(buffer.sample(n_sgo, rng))
            for p in batch[n_sgo:]:
                seqs.append((p, teacher.generate(p, cfg.max_new_tokens, cfg.temperature, rng)))
            seqs = [(p, r) for p, r in seqs if r]
            if not seqs:
                continue
            acc = {}
            b_loss = 0.0
            for p, r in seqs:
                loss, grads = skld_sequence_grad(student, teacher, p, r, cfg.alpha)
                add_into(acc, grads, 1.0 / len(seqs))
                b_loss += loss / len(seqs)
            opt.step(acc)
            losses.append(b_loss)
            if history is not None:
                history.append({"step": step, "loss": b_loss, "margin_mean": None, "sgo_ratio": ratio})
            step += 1
        log.info("distill epoch %d mean skld %.6f sgo_ratio %.3f", epoch, np.mean(losses) if losses else float("nan"), ratio)
        ratio = min(1.0, max(0.0, ratio + cfg.adapt_step))
    return student
