"""Toy decoder-only transformer: pre-RMSNorm, SwiGLU, RoPE, grouped-query attention.

Everything runs on a single token sequence in float64. ``forward`` keeps the
intermediates needed by ``backward``, which returns analytic gradients for
every parameter given the loss gradient w.r.t. the logits.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .checkpoint import Checkpoint, ModelConfig, expected_shapes, validate_against_config


class StaleCacheError(RuntimeError):
    """backward() called without a matching forward() on the current parameters."""


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def swish(z, beta=1.0):
    return z * sigmoid(beta * z)


def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def rmsnorm(x, gain, eps):
    """gain * x / sqrt(mean(x**2) + eps) along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return gain * (x * r)


def _rmsnorm_fwd(x, gain, eps):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    n = x * r
    return n * gain, (n, r)


def _rmsnorm_bwd(dy, gain, saved):
    n, r = saved
    dg = (dy * n).sum(axis=0)
    dn = dy * gain
    dx = r * (dn - n * np.mean(dn * n, axis=-1, keepdims=True))
    return dx, dg


def swiglu_ffn(x, w_gate, w_up, w_down, beta=1.0):
    """w_down^T (swish(w_gate^T x) * (w_up^T x)) for row vectors x."""
    x = np.asarray(x, dtype=np.float64)
    return (swish(x @ w_gate, beta) * (x @ w_up)) @ w_down


@dataclass
class RopeCache:
    """cos/sin tables of shape (max_seq_len, head_dim // 2)."""

    cos: np.ndarray
    sin: np.ndarray
    theta: float

    @classmethod
    def build(cls, head_dim, max_seq_len, theta):
        if head_dim % 2:
            raise ValueError("head_dim must be even")
        inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
        angles = np.arange(max_seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
        return cls(np.cos(angles), np.sin(angles), float(theta))

    @property
    def max_positions(self):
        return self.cos.shape[0]


def rope_apply(heads, positions, cache, inverse=False):
    """Rotate each pair (x[2i], x[2i+1]) by position * theta_i.

    ``heads`` has shape (seq, n_heads, head_dim). ``inverse`` applies the
    transposed rotation, which is what the backward pass needs.
    """
    heads = np.asarray(heads, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (heads.shape[0],):
        raise ValueError("one position per sequence row is required")
    if positions.size and (positions.min() < 0 or positions.max() >= cache.max_positions):
        raise IndexError(f"position out of rope cache range [0, {cache.max_positions})")
    return kernels.rope_rotate(heads, positions, cache.cos, cache.sin, -1.0 if inverse else 1.0)


def _causal_mask(n):
    return np.triu(np.full((n, n), -np.inf), k=1)


def gqa_attention(q, k, v, causal=True, return_probs=False):
    """Grouped-query attention.

    q: (seq, n_heads, hd); k, v: (seq, n_kv_heads, hd). Query head h reads kv
    head h // (n_heads // n_kv_heads). With ``return_probs`` the attention
    weights are returned too, shaped (n_heads, seq, seq).
    """
    out, probs = _attn_fwd(np.asarray(q, np.float64), np.asarray(k, np.float64), np.asarray(v, np.float64), causal)
    if return_probs:
        T = q.shape[0]
        return out, probs.reshape(-1, T, T)
    return out


def _attn_fwd(q, k, v, causal=True):
    T, H, hd = q.shape
    if k.shape != v.shape or k.shape[0] != T or k.shape[2] != hd:
        raise ValueError(f"shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    KV = k.shape[1]
    if H % KV:
        raise ValueError(f"n_heads={H} not divisible by n_kv_heads={KV}")
    q4 = q.reshape(T, KV, H // KV, hd)
    scores = np.einsum("tgrd,sgd->grts", q4, k) / math.sqrt(hd)
    if causal:
        scores = scores + _causal_mask(T)
    probs = softmax(scores)
    out = np.einsum("grts,sgd->tgrd", probs, v).reshape(T, H, hd)
    return out, probs


def _attn_bwd(dout, q, k, v, probs):
    T, H, hd = q.shape
    KV = k.shape[1]
    q4 = q.reshape(T, KV, H // KV, hd)
    do4 = dout.reshape(T, KV, H // KV, hd)
    dprobs = np.einsum("tgrd,sgd->grts", do4, v)
    dv = np.einsum("grts,tgrd->sgd", probs, do4)
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores /= math.sqrt(hd)
    dq = np.einsum("grts,sgd->tgrd", dscores, k).reshape(T, H, hd)
    dk = np.einsum("grts,tgrd->sgd", dscores, q4)
    return dq, dk, dv


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def init_params(config, seed=0):
    """Seeded random parameters; norm gains start at one."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif name in ("embed.weight", "output.weight"):
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(config.d_model), shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
    return params


class ToyModel:
    """Parameters (float64, keyed by checkpoint names) plus their config."""

    def __init__(self, params, config=None):
        if isinstance(params, Checkpoint):
            config = config or params.config
            params = params.tensors
        if config is None:
            raise ValueError("config is required when params is a plain dict")
        self.config = config
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        validate_against_config(Checkpoint(self.params, config), strict=True)
        self.rope = RopeCache.build(config.head_dim, config.max_seq_len, config.rope_theta)
        self.version = 0
        self._cache = None

    @classmethod
    def init(cls, config=None, seed=0):
        config = config or ModelConfig()
        return cls(init_params(config, seed), config)

    @property
    def max_seq_len(self):
        return self.config.max_seq_len

    def copy(self):
        return ToyModel({k: v.copy() for k, v in self.params.items()}, self.config)

    def to_checkpoint(self):
        return Checkpoint({k: v.copy() for k, v in self.params.items()}, self.config)

    def mark_updated(self):
        """Call after mutating parameters in place; invalidates the forward cache."""
        self.version += 1
        self._cache = None

    def output_weight(self):
        return self.params["embed.weight"] if self.config.tie_embeddings else self.params["output.weight"]

    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ValueError("tokens must be a non-empty 1-d sequence")
        if tokens.size > self.config.max_seq_len:
            raise ValueError(f"sequence length {tokens.size} exceeds max_seq_len {self.config.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError("token id out of range")
        return tokens

    def forward(self, tokens, keep=True):
        """Logits of shape (seq, vocab). ``keep=False`` skips caching for backward."""
        tokens = self._check_tokens(tokens)
        c, p = self.config, self.params
        T, H, KV, hd = tokens.size, c.n_heads, c.n_kv_heads, c.head_dim
        pos = np.arange(T)
        x = p["embed.weight"][tokens]
        layers = []
        for i in range(c.n_layers):
            pre = f"layers.{i}."
            h, n1 = _rmsnorm_fwd(x, p[pre + "attn_norm.gain"], c.rmsnorm_eps)
            q = rope_apply((h @ p[pre + "attn.wq"]).reshape(T, H, hd), pos, self.rope)
            k = rope_apply((h @ p[pre + "attn.wk"]).reshape(T, KV, hd), pos, self.rope)
            v = (h @ p[pre + "attn.wv"]).reshape(T, KV, hd)
            o, probs = _attn_fwd(q, k, v)
            o = o.reshape(T, c.d_model)
            x = x + o @ p[pre + "attn.wo"]
            h2, n2 = _rmsnorm_fwd(x, p[pre + "ffn_norm.gain"], c.rmsnorm_eps)
            a = h2 @ p[pre + "ffn.w_gate"]
            b = h2 @ p[pre + "ffn.w_up"]
            sg = sigmoid(c.swiglu_beta * a)
            s = a * sg
            u = s * b
            x = x + u @ p[pre + "ffn.w_down"]
            if keep:
                layers.append(dict(h=h, n1=n1, q=q, k=k, v=v, probs=probs, o=o, h2=h2, n2=n2, a=a, b=b, sg=sg, s=s, u=u))
        hf, nf = _rmsnorm_fwd(x, p["final_norm.gain"], c.rmsnorm_eps)
        logits = hf @ self.output_weight().T
        if keep:
            self._cache = dict(tokens=tokens.copy(), version=self.version, layers=layers, hf=hf, nf=nf)
        return logits

    def backward(self, tokens, dlogits):
        """Parameter gradients for upstream ``dlogits`` (seq, vocab)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        cache = self._cache
        if cache is None or cache["version"] != self.version or not np.array_equal(cache["tokens"], tokens):
            raise StaleCacheError("no forward cache for these tokens and parameters")
        c, p = self.config, self.params
        T, H, KV, hd = tokens.size, c.n_heads, c.n_kv_heads, c.head_dim
        pos = np.arange(T)
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if dlogits.shape != (T, c.vocab_size):
            raise ValueError(f"upstream gradient shape {dlogits.shape} != {(T, c.vocab_size)}")
        grads = {k: np.zeros_like(v) for k, v in p.items()}

        W = self.output_weight()
        dW = dlogits.T @ cache["hf"]
        if c.tie_embeddings:
            grads["embed.weight"] += dW
        else:
            grads["output.weight"] += dW
        dx, grads["final_norm.gain"] = _rmsnorm_bwd(dlogits @ W, p["final_norm.gain"], cache["nf"])

        for i in reversed(range(c.n_layers)):
            pre = f"layers.{i}."
            L = cache["layers"][i]
            # ffn sub-layer
            wd = p[pre + "ffn.w_down"]
            grads[pre + "ffn.w_down"] = L["u"].T @ dx
            du = dx @ wd.T
            ds = du * L["b"]
            db = du * L["s"]
            beta, a, sg = c.swiglu_beta, L["a"], L["sg"]
            da = ds * (sg + beta * a * sg * (1.0 - sg))
            grads[pre + "ffn.w_gate"] = L["h2"].T @ da
            grads[pre + "ffn.w_up"] = L["h2"].T @ db
            dh2 = da @ p[pre + "ffn.w_gate"].T + db @ p[pre + "ffn.w_up"].T
            dxn, grads[pre + "ffn_norm.gain"] = _rmsnorm_bwd(dh2, p[pre + "ffn_norm.gain"], L["n2"])
            dx = dx + dxn
            # attention sub-layer
            grads[pre + "attn.wo"] = L["o"].T @ dx
            do = (dx @ p[pre + "attn.wo"].T).reshape(T, H, hd)
            dq, dk, dv = _attn_bwd(do, L["q"], L["k"], L["v"], L["probs"])
            dq = rope_apply(dq, pos, self.rope, inverse=True).reshape(T, c.d_model)
            dk = rope_apply(dk, pos, self.rope, inverse=True).reshape(T, c.kv_dim)
            dv = dv.reshape(T, c.kv_dim)
            h = L["h"]
            grads[pre + "attn.wq"] = h.T @ dq
            grads[pre + "attn.wk"] = h.T @ dk
            grads[pre + "attn.wv"] = h.T @ dv
            dh = dq @ p[pre + "attn.wq"].T + dk @ p[pre + "attn.wk"].T + dv @ p[pre + "attn.wv"].T
            dxn, grads[pre + "attn_norm.gain"] = _rmsnorm_bwd(dh, p[pre + "attn_norm.gain"], L["n1"])
            dx = dx + dxn

        np.add.at(grads["embed.weight"], tokens, dx)
        return grads

    def next_token_logits(self, tokens):
        return self.forward(tokens, keep=False)[-1]

    def generate(self, prompt, max_new_tokens, temperature=0.0, rng=None):
        """Sample a continuation by naive recompute; temperature 0 is greedy.

        Stops early only when the context reaches ``max_seq_len``.
        """
        seq = [int(t) for t in prompt]
        out = []
        for _ in range(max_new_tokens):
            if len(seq) >= self.config.max_seq_len:
                break
            z = self.next_token_logits(seq)
            if temperature <= 0:
                tok = int(np.argmax(z))
            else:
                if rng is None:
                    raise ValueError("sampling with temperature > 0 needs an rng")
                probs = softmax(z / temperature)
                tok = int(rng.choice(probs.size, p=probs))
            seq.append(tok)
            out.append(tok)
        return out


def forward(model, tokens):
    return model.forward(tokens)


def backward(model, tokens, upstream):
    return model.backward(tokens, upstream)


def response_log_probs(model, prompt, response, keep=False):
    """Per-token log-probabilities of ``response`` given ``prompt``.

    Returns ``(token_logps, logits_rows, full_tokens)`` where ``logits_rows``
    are the rows predicting each response token.
    """
    prompt, response = list(prompt), list(response)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if not response:
        raise ValueError("response must be non-empty")
    full = prompt + response
    logits = model.forward(full, keep=keep)
    P, R = len(prompt), len(response)
    rows = logits[P - 1 : P - 1 + R]
    lp = log_softmax(rows)[np.arange(R), response]
    return lp, rows, full


def sequence_log_prob(model, prompt, response):
    """Sum of log p(response_t | prompt, response_<t); always <= 0."""
    lp, _, _ = response_log_probs(model, prompt, response)
    return float(lp.sum())


def sequence_log_prob_and_grad(model, prompt, response):
    """Summed response log-probability and its gradient w.r.t. every parameter."""
    lp, rows, full = response_log_probs(model, prompt, response, keep=True)
    P, R = len(prompt), len(response)
    up = np.zeros((len(full), model.config.vocab_size))
    block = -softmax(rows)
    block[np.arange(R), list(response)] += 1.0
    up[P - 1 : P - 1 + R] = block
    return float(lp.sum()), model.backward(full, up)


def validation_loss(model, sequences):
    """Mean next-token cross-entropy over a list of token sequences."""
    losses = []
    for seq in sequences:
        seq = list(seq)
        if len(seq) < 2:
            continue
        lp, _, _ = response_log_probs(model, seq[:1], seq[1:])
        losses.append(-float(lp.mean()))
    if not losses:
        raise ValueError("no sequence of length >= 2 to evaluate")
    return float(np.mean(losses))
