"""Acceptance suite. One test per criterion; run with ``-s`` to see timings.

A PASS/FAIL line per criterion is also printed in the terminal summary.
"""

import hashlib
import json
import math
import struct
import time

import numpy as np
import pytest

from alloyforge.alignment import (
    DpoConfig,
    PreferencePair,
    SftConfig,
    SkldConfig,
    distill_train,
    dpo_train,
    heldout_skld,
    sft_train,
)
from alloyforge.alignment import data as adata
from alloyforge.alignment.distill import skld_sequence_grad
from alloyforge.alignment.dpo import dpo_pair_grad, reference_log_probs
from alloyforge.alignment.losses import dpo_loss, sft_loss, skld, skld_token_loss
from alloyforge.checkpoint import (
    MAGIC,
    BadMagicError,
    Checkpoint,
    DuplicateNameError,
    ModelConfig,
    TruncatedError,
    from_bytes,
    read_checkpoint,
    to_bytes,
    write_checkpoint,
)
from alloyforge.evalharness import (
    EchoStub,
    EmptyStub,
    count_occurrences,
    default_niah_spec,
    niah_generate,
    niah_grid,
)
from alloyforge.merge import MergeSchedule, merge_checkpoints, slerp_vectors
from alloyforge.transformer import RopeCache, ToyModel, gqa_attention, rope_apply, sequence_log_prob
from conftest import TINY
from helpers import random_checkpoint
from oracles import central_difference, kl_direct, rel_error, slerp_scalar


def report(criterion, msg):
    print(f"\n[criterion {criterion}] {msg}")


# ------------------------------------------------------------------ 1


def test_criterion_01_slerp_identities():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst_sym = worst_norm = 0.0
    for _ in range(1000):
        n = int(round(10 ** rng.uniform(math.log10(2), 5)))
        a = rng.normal(size=n)
        b = rng.normal(size=n)
        a /= np.linalg.norm(a)
        b /= np.linalg.norm(b)
        assert np.array_equal(slerp_vectors(a, b, 0.0), a)
        assert np.array_equal(slerp_vectors(a, b, 1.0), b)
        t = float(rng.uniform())
        m = slerp_vectors(a, b, t)
        worst_sym = max(worst_sym, float(np.abs(m - slerp_vectors(b, a, 1.0 - t)).max()))
        worst_norm = max(worst_norm, abs(float(np.linalg.norm(m)) - 1.0))
    elapsed = time.perf_counter() - start
    report(1, f"symmetry {worst_sym:.2e}, norm {worst_norm:.2e}, {elapsed:.1f}s")
    assert worst_sym <= 1e-9
    assert worst_norm <= 1e-9
    assert elapsed < 30


# ------------------------------------------------------------------ 2


def test_criterion_02_merge_oracle_and_constancy():
    a = ToyModel.init(TINY, seed=1).to_checkpoint()
    b = ToyModel.init(TINY, seed=2).to_checkpoint()
    sched = MergeSchedule([("layers.0.*", 0.2), ("*.gain", 0.9)], 0.5)
    merged, rep = merge_checkpoints(a, b, sched)
    worst = 0.0
    for e in rep.entries:
        name = e["name"]
        ref, theta = slerp_scalar(a.tensors[name], b.tensors[name], e["t_used"])
        got = merged.tensors[name].ravel()
        worst = max(worst, float(np.abs(got - np.array(ref)).max()))
        assert e["theta_radians"] == pytest.approx(theta, abs=1e-12)
    report(2, f"max element error {worst:.2e}")
    assert worst <= 1e-12
    for t in np.linspace(0, 1, 11):
        same, _ = merge_checkpoints(a, a, MergeSchedule.constant(float(t)))
        assert same == a


# ------------------------------------------------------------------ 3


def _mha(q, k, v):
    T, H, hd = q.shape
    out = np.zeros_like(q)
    for h in range(H):
        s = q[:, h] @ k[:, h].T / math.sqrt(hd)
        s[np.triu_indices(T, 1)] = -np.inf
        p = np.exp(s - s.max(axis=1, keepdims=True))
        out[:, h] = (p / p.sum(axis=1, keepdims=True)) @ v[:, h]
    return out


def test_criterion_03_architecture_equivalences():
    rng = np.random.default_rng(3)
    for ratio in (1, 2, 4):
        q = rng.normal(size=(9, 2 * ratio, 8))
        k, v = rng.normal(size=(9, 2, 8)), rng.normal(size=(9, 2, 8))
        out, probs = gqa_attention(q, k, v, return_probs=True)
        ref = _mha(q, np.repeat(k, ratio, axis=1), np.repeat(v, ratio, axis=1))
        assert np.abs(out - ref).max() <= 1e-12
        assert np.abs(probs.sum(axis=-1) - 1.0).max() <= 1e-6

    cache = RopeCache.build(8, 512, 500000.0)
    q, k = rng.normal(size=(1, 1, 8)), rng.normal(size=(1, 1, 8))
    offsets = [(3, 0), (10, 4), (1, 1)]
    for i, j in offsets:
        dots = []
        for base in (0, 7, 50, 200, 400):
            qr = rope_apply(q, [base + i], cache)
            kr = rope_apply(k, [base + j], cache)
            dots.append(float(qr.ravel() @ kr.ravel()))
        assert max(dots) - min(dots) <= 1e-6

    model = ToyModel.init(TINY, seed=0)
    toks = [int(x) for x in rng.integers(0, 32, 20)]
    base_logits = model.forward(toks)
    for layer in model._cache["layers"]:
        assert np.abs(layer["probs"].sum(axis=-1) - 1.0).max() <= 1e-6
    for j in (1, 6, 19):
        edited = toks[:j] + [(x + 1) % 32 for x in toks[j:]]
        assert np.array_equal(model.forward(edited)[:j], base_logits[:j])
    report(3, "gqa, row sums, rope offsets and causality hold")


# ------------------------------------------------------------------ 4


def test_criterion_04_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    results = {}
    for tie in (True, False):
        cfg = ModelConfig(n_layers=2, d_model=64, d_ffn=224, n_heads=8, n_kv_heads=2, vocab_size=48, max_seq_len=32, tie_embeddings=tie)
        model = ToyModel.init(cfg, seed=5)
        teacher = ToyModel.init(cfg, seed=6)
        reference = model.copy()
        for p in model.params.values():
            p += rng.normal(0, 0.02, p.shape)
        model.mark_updated()
        pair = PreferencePair([1, 2, 3], [4, 5, 6], [7, 8], "fd")
        (ref_lps,) = reference_log_probs(reference, [pair])
        prompt, target = [3, 1, 4, 1, 5], [9, 2, 6]

        losses = {
            "sft": (lambda: sft_loss(model, prompt, target)[0], sft_loss(model, prompt, target)[1]),
            "dpo": (
                lambda: dpo_loss(
                    sequence_log_prob(model, pair.prompt, pair.chosen),
                    sequence_log_prob(model, pair.prompt, pair.rejected),
                    *ref_lps,
                )[0],
                dpo_pair_grad(model, ref_lps, pair, 0.1)[2],
            ),
            "skld": (
                lambda: skld_sequence_grad(model, teacher, prompt, target, 0.1)[0],
                skld_sequence_grad(model, teacher, prompt, target, 0.1)[1],
            ),
        }
        for loss_name, (f, grads) in losses.items():
            for name, p in model.params.items():
                cls = name.split(".", 2)[-1] if name.startswith("layers.") else name
                for _ in range(2):
                    idx = tuple(int(rng.integers(0, s)) for s in p.shape)
                    num = central_difference(f, p, idx, 1e-5)
                    key = (tie, loss_name, cls)
                    results[key] = max(results.get(key, 0.0), rel_error(grads[name][idx], num))

    zs, zt = rng.normal(size=(4, 10)), rng.normal(size=(4, 10))
    _, g = skld_token_loss(zs, zt, 0.1)
    for idx in np.ndindex(zs.shape):
        num = central_difference(lambda: skld_token_loss(zs, zt, 0.1)[0], zs, idx, 1e-5)
        results[("logits", "skld_token", "z")] = max(results.get(("logits", "skld_token", "z"), 0.0), rel_error(g[idx], num))

    elapsed = time.perf_counter() - start
    worst_key = max(results, key=results.get)
    report(4, f"{len(results)} loss/param-class checks, worst {results[worst_key]:.2e} at {worst_key}, {elapsed:.1f}s")
    assert results[worst_key] < 1e-4
    assert elapsed < 300


# ------------------------------------------------------------------ 5


def test_criterion_05_dpo_analytics():
    for lp in (-3.0, 0.0, -17.25):
        loss, margin = dpo_loss(lp, lp, lp, lp)
        assert margin == 0.0
        assert abs(loss - math.log(2)) <= 1e-12
    vals = (-2.5, -4.75, -3.125, -3.5)
    base = dpo_loss(*vals)
    for c in (-8.0, -0.5, 0.25, 16.0):
        assert dpo_loss(*(v + c for v in vals)) == base
    cfg = DpoConfig()
    assert cfg.beta == 0.1
    assert cfg.learning_rate == 1e-6
    assert dpo_loss.__defaults__ == (0.1,)
    report(5, "ln 2 at zero margin, exact shift invariance, defaults 0.1 / 1e-6")


# ------------------------------------------------------------------ 6


def test_criterion_06_skld_properties():
    rng = np.random.default_rng(6)
    worst_kl = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 17))
        p = rng.dirichlet(np.ones(k))
        q = rng.dirichlet(np.ones(k))
        if rng.random() < 0.3 and k > 1:
            p[rng.integers(0, k)] = 0.0
            p /= p.sum()
        alpha = float(rng.uniform(0, 0.99))
        assert skld(p, q, alpha) >= 0.0
        assert skld(p, p, alpha) == 0.0
        if (q > 0).all():
            worst_kl = max(worst_kl, abs(skld(p, q, 0.0) - kl_direct(p, q)))
    assert worst_kl <= 1e-12
    p = np.array([0.5, 0.5, 0.0, 0.0])
    q = np.array([0.0, 0.0, 0.3, 0.7])
    for alpha in (1e-6, 0.1, 0.5, 0.9):
        assert math.isfinite(skld(p, q, alpha))
    assert skld(p, q, 0.0) == math.inf
    report(6, f"1000 pairs ok, alpha=0 vs direct KL {worst_kl:.2e}")


# ------------------------------------------------------------------ 7


def test_criterion_07a_dpo_margin_trend():
    start = time.perf_counter()
    policy = ToyModel.init(TINY, seed=0)
    ref = policy.copy()
    pair = PreferencePair([1, 2, 3, 1], [2, 3, 1, 2], [7, 7, 9, 4], "fixture")
    history = []
    dpo_train(policy, ref, [pair], DpoConfig(learning_rate=1e-3, epochs=50, batch_size=1), history)
    (rl,) = reference_log_probs(ref, [pair])
    final = dpo_loss(
        sequence_log_prob(policy, pair.prompt, pair.chosen), sequence_log_prob(policy, pair.prompt, pair.rejected), *rl
    )[1]
    margins = [r["margin_mean"] for r in history] + [final]
    elapsed = time.perf_counter() - start
    report(7, f"dpo margin {margins[0]:.3f} -> {margins[-1]:.3f} over 50 steps, {elapsed:.1f}s")
    assert len(history) == 50
    assert all(b > a for a, b in zip(margins, margins[1:]))
    assert elapsed < 120


def test_criterion_07b_distill_trend():
    start = time.perf_counter()
    teacher, student = ToyModel.init(TINY, seed=1), ToyModel.init(TINY, seed=2)
    train = adata.synthetic_prompts(32, 50, 0)
    held = adata.synthetic_prompts(32, 16, 99)
    before = heldout_skld(student, teacher, held)
    history = []
    distill_train(student, teacher, train, SkldConfig(epochs=10, batch_size=5, learning_rate=3e-3), history)
    after = heldout_skld(student, teacher, held)
    elapsed = time.perf_counter() - start
    report(7, f"held-out skld {before:.4f} -> {after:.4f} ({1 - after / before:.0%} drop), {elapsed:.1f}s")
    assert len(history) == 100
    assert after <= 0.7 * before
    assert elapsed < 120


# ------------------------------------------------------------------ 8


def test_criterion_08_niah_harness():
    spec = default_niah_spec(256, (16, 64, 256), (0.0, 0.25, 0.5, 0.75, 1.0), seed=8, trials=3)
    assert (niah_grid(EchoStub(spec.answer), spec).accuracy == 1.0).all()
    assert (niah_grid(EmptyStub(), spec).accuracy == 0.0).all()
    rng = np.random.default_rng(8)
    for i in range(100):
        length = int(rng.integers(8, 300))
        depth = float(rng.uniform())
        seeded = default_niah_spec(256, (length,), (depth,), seed=int(rng.integers(0, 2**31)))
        x = niah_generate(seeded, length, depth, i % 4)
        y = niah_generate(seeded, length, depth, i % 4)
        assert x == y
        assert len(x["document"]) == length
        assert count_occurrences(x["document"], seeded.needle) == 1
        s = x["needle_start"]
        assert x["document"][s : s + len(seeded.needle)] == seeded.needle
    report(8, "stub grids exact; 100 instances deterministic with a unique needle")


# ------------------------------------------------------------------ 9


def _header(buf):
    (n,) = struct.unpack("<Q", buf[8:16])
    return n, json.loads(buf[16 : 16 + n])


def _rebuild(header, payload):
    raw = json.dumps(header).encode()
    return MAGIC + struct.pack("<Q", len(raw)) + raw + payload


def test_criterion_09_checkpoint_container(tmp_path):
    rng = np.random.default_rng(9)
    for i in range(500):
        ck = random_checkpoint(rng)
        buf = to_bytes(ck)
        back = from_bytes(buf)
        assert back == ck
        assert to_bytes(back) == buf
        if i % 50 == 0:
            path = tmp_path / f"c{i}.ack"
            write_checkpoint(ck, path)
            assert read_checkpoint(path) == ck

    good = to_bytes(Checkpoint({"a": np.ones(3), "b": np.zeros(3)}))
    bad_magic = b"XXXXXXXX" + good[8:]
    with pytest.raises(BadMagicError):
        from_bytes(bad_magic)
    with pytest.raises(TruncatedError):
        from_bytes(good[:24])
    n, header = _header(good)
    header["tensors"][1]["name"] = "a"
    with pytest.raises(DuplicateNameError):
        from_bytes(_rebuild(header, good[16 + n :]))
    report(9, "500 bitwise round trips; corrupt fixtures raise their errors")


# ------------------------------------------------------------------ 10

PIPE_CONFIG = ModelConfig(n_layers=2, d_model=32, d_ffn=112, n_heads=4, n_kv_heads=2, vocab_size=64, max_seq_len=128)


def _digest(model):
    return hashlib.sha256(to_bytes(model.to_checkpoint())).hexdigest()


def _pipeline(seed):
    eval_spec = default_niah_spec(64, (16, 32), (0.0, 0.5, 1.0), seed=seed + 11, trials=4)
    train_spec = default_niah_spec(64, (16, 24, 32), (0.0, 0.25, 0.5, 0.75, 1.0), seed=seed + 1000, trials=1)
    examples = []
    for length in train_spec.context_lengths:
        for depth in train_spec.depth_fractions:
            for trial in range(8):
                inst = niah_generate(train_spec, length, depth, trial)
                examples.append(adata.SftExample(inst["prompt"], inst["expected"]))

    base = ToyModel.init(PIPE_CONFIG, seed=seed)
    untrained = niah_grid(base, eval_spec)

    sft_a = sft_train(base.copy(), examples, SftConfig(learning_rate=3e-3, epochs=6, batch_size=8, warmup_steps=5, seed=seed + 1))
    sft_b = sft_train(base.copy(), examples, SftConfig(learning_rate=3e-3, epochs=6, batch_size=8, warmup_steps=5, seed=seed + 2))
    merged_ck, rep = merge_checkpoints(sft_a.to_checkpoint(), sft_b.to_checkpoint(), MergeSchedule.constant(0.5))
    merged = ToyModel(merged_ck)

    pairs = []
    for i, ex in enumerate(examples[::10]):
        wrong = [(t + 1 + i) % 48 for t in ex.response]
        pairs.append(PreferencePair(ex.prompt, ex.response, wrong, "niah"))
    aligned = merged.copy()
    dpo_train(aligned, merged, pairs, DpoConfig(learning_rate=1e-4, epochs=1, batch_size=4, seed=seed + 3))

    student = ToyModel.init(PIPE_CONFIG, seed=seed + 4)
    prompts = [ex.prompt for ex in examples[::3]]
    distill_train(student, aligned, prompts, SkldConfig(epochs=3, batch_size=8, learning_rate=3e-3, max_new_tokens=2, seed=seed + 5))

    final = niah_grid(student, eval_spec)
    return {
        "untrained": untrained.mean(),
        "merged": niah_grid(merged, eval_spec).mean(),
        "final": final.mean(),
        "final_csv": final.to_csv(),
        "digests": [_digest(m) for m in (sft_a, sft_b, merged, aligned, student)],
        "merge_methods": rep.counts,
    }


@pytest.mark.slow
def test_criterion_10_end_to_end_pipeline():
    start = time.perf_counter()
    first = _pipeline(seed=0)
    second = _pipeline(seed=0)
    elapsed = time.perf_counter() - start
    report(
        10,
        f"niah accuracy untrained {first['untrained']:.3f}, merged {first['merged']:.3f}, "
        f"final {first['final']:.3f}; two runs in {elapsed:.1f}s",
    )
    assert first["digests"] == second["digests"]
    assert first["final_csv"] == second["final_csv"]
    assert first["final"] >= first["untrained"]
    assert elapsed < 600
