import logging

import numpy as np

from .losses import sft_loss
from .optim import Adam, add_into, cosine_lr

log = logging.getLogger(__name__)


def sft_train(model, examples, cfg, history=None):
    """Supervised fine-tuning with Adam and a warmup + cosine schedule.

    ``examples`` are SftExample-like objects (``prompt``, ``response``).
    Updates ``model`` in place and returns it. One row per optimizer step is
    appended to ``history`` when given.
    """
    limit = min(cfg.max_seq, model.config.max_seq_len)
    for ex in examples:
        if len(ex.prompt) + len(ex.response) > limit:
            raise ValueError(f"example of length {len(ex.prompt) + len(ex.response)} exceeds max_seq {limit}")
    if cfg.epochs == 0 or not examples:
        return model
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = -(-len(examples) // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    opt = Adam(model, cfg.learning_rate)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        losses = []
        for start in range(0, len(examples), cfg.batch_size):
            batch = [examples[i] for i in order[start : start + cfg.batch_size]]
            acc = {}
            batch_loss = 0.0
            for ex in batch:
                loss, grads = sft_loss(model, ex.prompt, ex.response)
                add_into(acc, grads, 1.0 / len(batch))
                batch_loss += loss / len(batch)
            opt.step(acc, cosine_lr(step, total, cfg.learning_rate, cfg.warmup_steps))
            losses.append(batch_loss)
            if history is not None:
                history.append({"step": step, "loss": batch_loss, "margin_mean": None, "sgo_ratio": None})
            step += 1
        log.info("sft epoch %d mean loss %.6f", epoch, float(np.mean(losses)))
    return model
