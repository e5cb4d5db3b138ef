"""Needle-in-a-haystack generation, scoring and accuracy grids; benchmark tables."""

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

DEFAULT_TRIALS = 8


@dataclass
class NiahSpec:
    """Grid and token content for a needle-in-a-haystack run.

    ``needle`` is inserted into filler drawn from ``filler_corpus``; the model
    sees the document followed by ``question`` and must produce ``answer``.
    """

    context_lengths: list
    depth_fractions: list
    needle: list
    question: list
    answer: list
    filler_corpus: list
    seed: int = 0
    trials: int = DEFAULT_TRIALS

    def __post_init__(self):
        self.context_lengths = [int(x) for x in self.context_lengths]
        self.depth_fractions = [float(x) for x in self.depth_fractions]
        self.needle = [int(x) for x in self.needle]
        self.question = [int(x) for x in self.question]
        self.answer = [int(x) for x in self.answer]
        self.filler_corpus = [int(x) for x in self.filler_corpus]
        if not self.needle or not self.answer:
            raise ValueError("needle and answer must be non-empty")
        if any(not 0.0 <= d <= 1.0 for d in self.depth_fractions):
            raise ValueError("depth fractions must lie in [0, 1]")
        if self.depth_fractions != sorted(self.depth_fractions):
            raise ValueError("depth fractions must be sorted ascending")
        floor = len(self.needle) + len(self.question)
        for n in self.context_lengths:
            if n < floor:
                raise ValueError(f"context length {n} < needle + question length {floor}")
        if not self._filler_pool():
            raise ValueError("filler corpus has no token usable around the needle")
        if self.trials < 1:
            raise ValueError("trials must be positive")

    def _filler_pool(self):
        # The needle's first token never appears in filler; any match must
        # then start inside the inserted needle.
        return sorted(set(self.filler_corpus) - {self.needle[0]})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def default_niah_spec(vocab_size=256, context_lengths=(64, 128, 256), depth_fractions=(0.0, 0.5, 1.0), seed=0, trials=DEFAULT_TRIALS):
    """Synthetic key/value needle at the top of the vocabulary.

    The needle is ``key + value``; the question repeats ``key`` and the answer
    is ``value``. Filler uses the lower part of the vocabulary.
    """
    key = [vocab_size - 6, vocab_size - 5]
    value = [vocab_size - 4, vocab_size - 3]
    return NiahSpec(
        context_lengths=list(context_lengths),
        depth_fractions=list(depth_fractions),
        needle=key + value,
        question=key,
        answer=value,
        filler_corpus=list(range(vocab_size - 16)),
        seed=seed,
        trials=trials,
    )


def count_occurrences(haystack, needle):
    n, m = len(haystack), len(needle)
    return sum(1 for i in range(n - m + 1) if haystack[i : i + m] == needle)


def contains(haystack, needle):
    m = len(needle)
    return any(haystack[i : i + m] == needle for i in range(len(haystack) - m + 1))


def needle_start(length, needle_len, depth):
    return int(round(depth * (length - needle_len)))


def niah_generate(spec, length, depth, trial_index=0):
    """One haystack document of exactly ``length`` tokens with the needle inside.

    Returns ``{"document", "prompt", "expected", "needle_start"}``; ``prompt``
    is the document followed by the question. Deterministic in
    (seed, length, depth, trial_index).
    """
    m = len(spec.needle)
    if length < m + len(spec.question):
        raise ValueError(f"length {length} too small for needle ({m}) and question ({len(spec.question)})")
    if not 0.0 <= depth <= 1.0:
        raise ValueError("depth must lie in [0, 1]")
    rng = np.random.default_rng([spec.seed, int(length), int(round(depth * 1_000_000)), int(trial_index)])
    pool = np.asarray(spec._filler_pool())
    start = needle_start(length, m, depth)
    for _ in range(100):
        filler = [int(t) for t in rng.choice(pool, length - m)]
        doc = filler[:start] + spec.needle + filler[start:]
        if count_occurrences(doc, spec.needle) == 1:
            break
    else:  # pragma: no cover - needs a pathological needle
        raise RuntimeError("could not place a unique needle")
    return {"document": doc, "prompt": doc + spec.question, "expected": list(spec.answer), "needle_start": start}


def niah_score(model_output, expected):
    """1 if ``expected`` occurs contiguously in ``model_output``, else 0."""
    expected = list(expected)
    if not expected:
        raise ValueError("expected answer must be non-empty")
    return int(contains(list(model_output), expected))


class EchoStub:
    """Answers every question correctly; sanity check for the scorer."""

    def __init__(self, answer):
        self.answer = list(answer)

    def generate(self, prompt, max_new_tokens, temperature=0.0, rng=None):
        return list(self.answer)


class EmptyStub:
    def generate(self, prompt, max_new_tokens, temperature=0.0, rng=None):
        return []


@dataclass
class AccuracyGrid:
    depths: list
    lengths: list
    accuracy: np.ndarray  # (len(depths), len(lengths))
    trials: int
    outputs: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.accuracy = np.asarray(self.accuracy, dtype=np.float64)
        if self.accuracy.shape != (len(self.depths), len(self.lengths)):
            raise ValueError("accuracy matrix does not match grid dimensions")
        if ((self.accuracy < 0) | (self.accuracy > 1)).any():
            raise ValueError("accuracies must lie in [0, 1]")

    def mean(self):
        return float(self.accuracy.mean())

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["depth", "length", "accuracy", "trials"])
        for i, d in enumerate(self.depths):
            for j, n in enumerate(self.lengths):
                w.writerow([repr(float(d)), n, repr(float(self.accuracy[i, j])), self.trials])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write(self.to_csv())


def niah_grid(model, spec, trials=None, max_new_tokens=None):
    """Accuracy for every (depth, length) cell, each over ``trials`` documents.

    ``model`` needs ``generate(prompt, max_new_tokens)``; greedy decoding is
    used. Models exposing ``max_seq_len`` are checked against the largest
    prompt plus answer before anything runs.
    """
    trials = trials or spec.trials
    new_tokens = max_new_tokens or len(spec.answer)
    cap = getattr(model, "max_seq_len", None)
    if cap is not None:
        need = max(spec.context_lengths) + len(spec.question) + new_tokens
        if need > cap:
            raise ValueError(f"context of {need} tokens exceeds model capacity {cap}")
    acc = np.zeros((len(spec.depth_fractions), len(spec.context_lengths)))
    outputs = {}
    for i, depth in enumerate(spec.depth_fractions):
        for j, length in enumerate(spec.context_lengths):
            hits = 0
            for trial in range(trials):
                inst = niah_generate(spec, length, depth, trial)
                out = model.generate(inst["prompt"], new_tokens, 0.0, None)
                outputs[(depth, length, trial)] = list(out)
                hits += niah_score(out, inst["expected"])
            acc[i, j] = hits / trials
    return AccuracyGrid(list(spec.depth_fractions), list(spec.context_lengths), acc, trials, outputs)


def _cell(value, rank):
    text = "-" if value is None else f"{value:.2f}"
    if value is None:
        return text
    if rank == 0:
        return f"**{text}**"
    if rank == 1:
        return f"<u>{text}</u>"
    return text


def format_benchmark_table(results, baselines=None, model_name="ours"):
    """Markdown table, one row per benchmark and one column per model.

    ``results`` maps benchmark -> score for the evaluated model, which forms
    the first column; ``baselines`` maps model name -> {benchmark: score}.
    In every row the best score is bold and the second best underlined; ties
    go to the earlier column.
    """
    columns = [(model_name, dict(results))] + list((baselines or {}).items())
    if not columns or all(not scores for _, scores in columns):
        raise ValueError("at least one score column is required")
    benchmarks = []
    for _, scores in columns:
        for b in scores:
            if b not in benchmarks:
                benchmarks.append(b)
    lines = ["| Benchmark | " + " | ".join(name for name, _ in columns) + " |"]
    lines.append("|---|" + "|".join("---:" for _ in columns) + "|")
    for b in benchmarks:
        vals = [scores.get(b) for _, scores in columns]
        present = [(v, k) for k, v in enumerate(vals) if v is not None]
        order = sorted(present, key=lambda vk: (-vk[0], vk[1]))
        rank = {k: r for r, (_, k) in enumerate(order)}
        cells = [_cell(v, rank.get(k)) for k, v in enumerate(vals)]
        lines.append(f"| {b} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
