"""Offline and online direct preference optimization on the toy model."""

import logging

import numpy as np

from ..transformer import sequence_log_prob, sequence_log_prob_and_grad
from .data import PreferencePair
from .losses import dpo_loss, dpo_loss_dmargin
from .optim import Adam, add_into

log = logging.getLogger(__name__)


def dpo_pair_grad(policy, ref_lps, pair, beta):
    """Loss, margin and policy-parameter gradient for one preference pair.

    ``ref_lps`` is (lp_ref_chosen, lp_ref_rejected) from the frozen reference.
    """
    lp_w, g_w = sequence_log_prob_and_grad(policy, pair.prompt, pair.chosen)
    lp_l, g_l = sequence_log_prob_and_grad(policy, pair.prompt, pair.rejected)
    loss, margin = dpo_loss(lp_w, lp_l, ref_lps[0], ref_lps[1], beta)
    c = dpo_loss_dmargin(margin, beta)
    grads = add_into(add_into({}, g_w, c), g_l, -c)
    return loss, margin, grads


def reference_log_probs(reference, pairs):
    return [
        (sequence_log_prob(reference, p.prompt, p.chosen), sequence_log_prob(reference, p.prompt, p.rejected))
        for p in pairs
    ]


def dpo_train(policy, reference, pairs, cfg, history=None, optimizer=None):
    """Offline DPO. ``reference`` is only read; ``policy`` is updated in place.

    Steps iterate over shuffled mini-batches of ``cfg.batch_size`` pairs for
    ``cfg.epochs`` epochs. Each history row records the pre-update batch
    loss and mean margin.
    """
    if not pairs:
        raise ValueError("empty preference pair list")
    if policy is reference:
        raise ValueError("policy and reference must be distinct models")
    for p in pairs:
        p.check_length(policy.config.max_seq_len)
    ref = reference_log_probs(reference, pairs)
    opt = optimizer or Adam(policy, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        losses, margins = [], []
        for start in range(0, len(pairs), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            acc = {}
            b_loss, b_margin = 0.0, 0.0
            for i in idx:
                loss, margin, grads = dpo_pair_grad(policy, ref[i], pairs[i], cfg.beta)
                add_into(acc, grads, 1.0 / len(idx))
                b_loss += loss / len(idx)
                b_margin += margin / len(idx)
            opt.step(acc)
            losses.append(b_loss)
            margins.append(b_margin)
            if history is not None:
                history.append({"step": step, "loss": b_loss, "margin_mean": b_margin, "sgo_ratio": None})
            step += 1
        log.info("dpo epoch %d mean loss %.6f mean margin %.6f", epoch, np.mean(losses), np.mean(margins))
    return policy


class ConstantScorer:
    def __init__(self, value=0.0):
        self.value = value

    def __call__(self, prompt, response):
        return self.value


class LogProbScorer:
    """Scores a response by its log-probability under a fixed target model."""

    def __init__(self, target, normalize=True):
        self.target = target
        self.normalize = normalize

    def __call__(self, prompt, response):
        lp = sequence_log_prob(self.target, prompt, response)
        return lp / len(response) if self.normalize else lp


def online_dpo_step(policy, reference, prompts, scorer, cfg, rng, optimizer=None, history=None):
    """Sample two responses per prompt, label them with ``scorer``, take one DPO step.

    Pairs whose responses or scores tie are skipped; with no usable pair the
    policy is left untouched. Scorer exceptions propagate.
    """
    if policy is reference:
        raise ValueError("policy and reference must be distinct models")
    pairs = []
    for prompt in prompts:
        y1 = policy.generate(prompt, cfg.max_new_tokens, cfg.temperature, rng)
        y2 = policy.generate(prompt, cfg.max_new_tokens, cfg.temperature, rng)
        if not y1 or y1 == y2:
            continue
        s1, s2 = float(scorer(prompt, y1)), float(scorer(prompt, y2))
        if s1 == s2:
            continue
        chosen, rejected = (y1, y2) if s1 > s2 else (y2, y1)
        pairs.append((list(prompt), chosen, rejected))

    row = {"step": len(history) if history is not None else 0, "loss": None, "margin_mean": None, "sgo_ratio": None}
    if pairs:
        pp = [PreferencePair(p, c, r, "online") for p, c, r in pairs]
        ref = reference_log_probs(reference, pp)
        acc = {}
        b_loss, b_margin = 0.0, 0.0
        for pair, rl in zip(pp, ref):
            loss, margin, grads = dpo_pair_grad(policy, rl, pair, cfg.beta)
            add_into(acc, grads, 1.0 / len(pp))
            b_loss += loss / len(pp)
            b_margin += margin / len(pp)
        opt = optimizer or Adam(policy, cfg.learning_rate)
        opt.step(acc)
        row.update(loss=b_loss, margin_mean=b_margin)
    if history is not None:
        history.append(row)
    return policy
