"""Token-level data records, JSON-lines I/O and seeded synthetic corpora."""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

# Reference token counts of the production corpora. Kept as manifest metadata
# only; nothing at desk scale reproduces them.
REFERENCE_TOKEN_COUNTS = {
    "pretraining": 4_676_972_806,
    "sft": 1_924_108_600,
    "preference": 18_596_038,
}


@dataclass
class PreferencePair:
    prompt: list
    chosen: list
    rejected: list
    source_tag: str = ""

    def __post_init__(self):
        self.prompt = [int(t) for t in self.prompt]
        self.chosen = [int(t) for t in self.chosen]
        self.rejected = [int(t) for t in self.rejected]
        if not (self.prompt and self.chosen and self.rejected):
            raise ValueError("prompt, chosen and rejected must all be non-empty")
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected responses are identical")

    def check_length(self, max_seq_len):
        need = len(self.prompt) + max(len(self.chosen), len(self.rejected))
        if need > max_seq_len:
            raise ValueError(f"pair needs {need} positions, model allows {max_seq_len}")


@dataclass
class SftExample:
    prompt: list
    response: list

    @classmethod
    def from_record(cls, rec):
        if "tokens" in rec:
            toks = [int(t) for t in rec["tokens"]]
            if len(toks) < 2:
                raise ValueError("a {tokens} record needs at least two tokens")
            return cls(toks[:1], toks[1:])
        return cls([int(t) for t in rec["prompt"]], [int(t) for t in rec["response"]])


@dataclass
class CorpusManifest:
    """Size metadata written next to a generated corpus."""

    name: str
    kind: str
    n_records: int
    n_tokens: int
    seed: int
    reference_tokens: int = None
    extra: dict = field(default_factory=dict)

    def write(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)


def read_jsonl(path):
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    return out


def write_jsonl(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, separators=(",", ":")) + "\n")


def load_preference_pairs(path):
    pairs = []
    for rec in read_jsonl(path):
        pairs.append(PreferencePair(rec["prompt"], rec["chosen"], rec["rejected"], rec.get("source_tag", "")))
    return pairs


def save_preference_pairs(path, pairs):
    write_jsonl(path, [asdict(p) for p in pairs])


def load_sft_examples(path):
    return [SftExample.from_record(r) for r in read_jsonl(path)]


def load_prompts(path):
    """Prompts from {prompt:[ids]} or {tokens:[ids]} records."""
    out = []
    for rec in read_jsonl(path):
        toks = rec["prompt"] if "prompt" in rec else rec["tokens"]
        out.append([int(t) for t in toks])
    return out


LOG_FIELDS = ("step", "loss", "margin_mean", "sgo_ratio")


def write_training_log(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["step"]] + [_fmt(r.get(k)) for k in LOG_FIELDS[1:]])


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v))


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

def pattern_sequence(rng, vocab_size, length, n_symbols=None):
    """A short repeating motif; gives the toy models something learnable."""
    n_symbols = n_symbols or min(vocab_size, 32)
    period = int(rng.integers(2, 5))
    motif = rng.integers(0, n_symbols, period)
    return [int(motif[i % period]) for i in range(length)]


def synthetic_sft_corpus(vocab_size, n, seed, prompt_len=4, response_len=6):
    """Prompt/response records where the response continues the prompt's motif."""
    rng = np.random.default_rng(seed)
    recs = []
    for _ in range(n):
        seq = pattern_sequence(rng, vocab_size, prompt_len + response_len)
        recs.append({"prompt": seq[:prompt_len], "response": seq[prompt_len:]})
    return recs


def synthetic_preference_pairs(vocab_size, n, seed, prompt_len=4, response_len=4):
    """Chosen continues the prompt's motif; rejected is uniform noise."""
    rng = np.random.default_rng(seed)
    pairs = []
    n_symbols = min(vocab_size, 32)
    while len(pairs) < n:
        seq = pattern_sequence(rng, vocab_size, prompt_len + response_len, n_symbols)
        rejected = [int(t) for t in rng.integers(0, n_symbols, response_len)]
        chosen = seq[prompt_len:]
        if rejected == chosen:
            continue
        pairs.append(PreferencePair(seq[:prompt_len], chosen, rejected, "synthetic"))
    return pairs


def synthetic_prompts(vocab_size, n, seed, prompt_len=4):
    rng = np.random.default_rng(seed)
    return [pattern_sequence(rng, vocab_size, prompt_len) for _ in range(n)]
