"""Post-training objectives: SFT cross-entropy, DPO and skew KL."""

import math

import numpy as np

from ..transformer import response_log_probs, softmax

SIMPLEX_TOL = 1e-9


def sft_loss(model, prompt, target):
    """Mean cross-entropy over ``target`` positions and its parameter gradients."""
    if len(target) == 0:
        raise ValueError("empty target")
    lp, rows, full = response_log_probs(model, prompt, target, keep=True)
    P, L = len(prompt), len(target)
    up = np.zeros((len(full), model.config.vocab_size))
    block = softmax(rows)
    block[np.arange(L), list(target)] -= 1.0
    up[P - 1 : P - 1 + L] = block / L
    return -float(lp.mean()), model.backward(full, up)


def _softplus(x):
    return float(np.logaddexp(0.0, x))


def dpo_margin(lp_pol_w, lp_pol_l, lp_ref_w, lp_ref_l):
    return (lp_pol_w - lp_ref_w) - (lp_pol_l - lp_ref_l)


def dpo_loss(lp_pol_w, lp_pol_l, lp_ref_w, lp_ref_l, beta=0.1):
    """-log sigmoid(beta * margin) where margin is the implied-reward gap.

    Returns ``(loss, margin)``; the margin is not scaled by beta.
    """
    vals = (lp_pol_w, lp_pol_l, lp_ref_w, lp_ref_l)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite log-probability in {vals}")
    if not beta > 0:
        raise ValueError("beta must be positive")
    m = dpo_margin(*vals)
    return _softplus(-beta * m), m


def dpo_loss_dmargin(margin, beta=0.1):
    """d loss / d margin = -beta * sigmoid(-beta * margin)."""
    z = beta * margin
    # sigmoid(-z), evaluated without overflow
    s = math.exp(-np.logaddexp(0.0, z))
    return -beta * s


def _check_simplex(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError(f"{name} must be a non-empty vector")
    if (x < 0).any() or not np.isfinite(x).all():
        raise ValueError(f"{name} has negative or non-finite entries")
    if abs(x.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"{name} sums to {x.sum()!r}, not 1")
    return x


def _check_alpha(alpha):
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")


def skld(p, q, alpha=0.1):
    """KL(p || alpha*p + (1-alpha)*q), natural log.

    Finite whenever alpha > 0. With alpha = 0 it is the plain KL and returns
    inf when q misses part of p's support. Rounding below zero is clipped.
    """
    _check_alpha(alpha)
    p = _check_simplex(p, "p")
    q = _check_simplex(q, "q")
    if p.shape != q.shape:
        raise ValueError("p and q differ in length")
    mix = p + (1.0 - alpha) * (q - p)
    support = p > 0
    if (mix[support] <= 0).any():
        return math.inf
    ps = p[support]
    return max(0.0, float(np.sum(ps * (np.log(ps) - np.log(mix[support])))))


def skld_token_loss(student_logits, teacher_logits, alpha=0.1):
    """Mean over rows of KL(teacher || alpha*teacher + (1-alpha)*student).

    Returns ``(loss, grad)`` with ``grad`` the derivative w.r.t.
    ``student_logits``. The teacher is a constant.
    """
    _check_alpha(alpha)
    zs = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    zt = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    if zs.shape != zt.shape:
        raise ValueError(f"shape mismatch: {zs.shape} vs {zt.shape}")
    n = zs.shape[0]
    t = softmax(zt)
    s = softmax(zs)
    mix = t + (1.0 - alpha) * (s - t)
    pos = t > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pos, t * (np.log(t) - np.log(mix)), 0.0)
        ratio_m1 = np.where(pos, (t - mix) / mix, -1.0)
    loss = float(terms.sum() / n)
    # d/dz_k = -(1-alpha) s_k [(r_k - 1) - sum_j s_j (r_j - 1)],  r = t / mix
    inner = ratio_m1 - (s * ratio_m1).sum(axis=-1, keepdims=True)
    grad = -(1.0 - alpha) * s * inner / n
    return loss, grad.reshape(np.shape(student_logits))
