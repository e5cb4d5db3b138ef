"""Spherical linear interpolation of checkpoints with per-tensor schedules."""

import fnmatch
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .checkpoint import Checkpoint, CheckpointError, tensor_stats

# sin(theta) below this is treated as parallel and falls back to lerp
EPS_PARALLEL = 1e-7
# theta above pi - EPS_ANTIPARALLEL is rejected
EPS_ANTIPARALLEL = 1e-7


class MergeError(CheckpointError):
    """Parents are incompatible or a tensor pair cannot be interpolated."""

    def __init__(self, message, tensor=None):
        super().__init__(message)
        self.tensor = tensor


class AntiparallelError(MergeError):
    pass


def _check_t(t):
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation parameter must lie in [0, 1], got {t}")
    return t


def _angle_from(dot, n1sq, n2sq):
    cos = dot / (math.sqrt(n1sq) * math.sqrt(n2sq))
    return math.acos(min(1.0, max(-1.0, cos)))


def angle_between(w1, w2):
    """Angle in radians between two vectors, in [0, pi]."""
    w1 = np.asarray(w1)
    w2 = np.asarray(w2)
    if w1.size != w2.size:
        raise ValueError(f"length mismatch: {w1.size} vs {w2.size}")
    dot, n1sq, n2sq = kernels.dot_norms(w1, w2)
    if n1sq == 0.0 or n2sq == 0.0:
        raise ValueError("angle undefined for a zero-norm vector")
    return _angle_from(dot, n1sq, n2sq)


def _slerp_flat(w1, w2, t):
    """Interpolate flattened float64 arrays. Returns (out, theta, method).

    ``theta`` is nan when it is undefined (a zero-norm side).
    """
    if t == 0.0 or t == 1.0:
        out = w1 if t == 0.0 else w2
        try:
            theta = angle_between(w1, w2)
        except ValueError:
            theta = float("nan")
        return out.copy(), theta, "copied"
    if np.array_equal(w1, w2):
        return w1.copy(), 0.0, "copied"
    dot, n1sq, n2sq = kernels.dot_norms(w1, w2)
    if n1sq == 0.0 or n2sq == 0.0:
        return kernels.lincomb(w1, w2, 1.0 - t, t), float("nan"), "lerp_fallback"
    theta = _angle_from(dot, n1sq, n2sq)
    if theta > math.pi - EPS_ANTIPARALLEL:
        raise AntiparallelError(f"antiparallel inputs (theta={theta!r}); great-circle path undefined")
    sin_theta = math.sin(theta)
    if sin_theta < EPS_PARALLEL:
        return kernels.lincomb(w1, w2, 1.0 - t, t), theta, "lerp_fallback"
    c1 = math.sin((1.0 - t) * theta) / sin_theta
    c2 = math.sin(t * theta) / sin_theta
    return kernels.lincomb(w1, w2, c1, c2), theta, "slerp"


def slerp_vectors(w1, w2, t):
    """SLERP between two equal-length vectors.

    Near-parallel inputs (sin(theta) < 1e-7) use linear interpolation; t=0
    and t=1 return exact copies of the endpoints. Raises ``AntiparallelError``
    when the angle is within 1e-7 of pi.
    """
    t = _check_t(t)
    a = np.asarray(w1, dtype=np.float64).ravel()
    b = np.asarray(w2, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if not (a @ a > 0 and b @ b > 0):
        raise ValueError("slerp undefined for a zero-norm vector")
    theta = angle_between(a, b)
    if theta > math.pi - EPS_ANTIPARALLEL:
        raise AntiparallelError(f"antiparallel inputs (theta={theta!r}); great-circle path undefined")
    out, _, _ = _slerp_flat(a, b, t)
    return out


@dataclass
class MergeSchedule:
    """Ordered glob rules mapping tensor names to interpolation parameters.

    The first matching rule wins; ``default_t`` applies otherwise.
    """

    rules: list = field(default_factory=list)
    default_t: float = 0.5

    def __post_init__(self):
        self.default_t = _check_t(self.default_t)
        rules = []
        for r in self.rules:
            if isinstance(r, dict):
                pattern, t = r["pattern"], r["t"]
            else:
                pattern, t = r
            if not isinstance(pattern, str):
                raise ValueError(f"rule pattern must be a string, got {pattern!r}")
            rules.append((pattern, _check_t(t)))
        self.rules = rules

    @classmethod
    def constant(cls, t):
        return cls([], t)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"default_t", "rules"}
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(list(d.get("rules", [])), d.get("default_t", 0.5))

    def to_dict(self):
        return {"default_t": self.default_t, "rules": [{"pattern": p, "t": t} for p, t in self.rules]}

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def resolve_t(schedule, tensor_name):
    for pattern, t in schedule.rules:
        if fnmatch.fnmatchcase(tensor_name, pattern):
            return t
    return schedule.default_t


@dataclass
class MergeReport:
    entries: list = field(default_factory=list)

    @property
    def counts(self):
        out = {"slerp": 0, "lerp_fallback": 0, "copied": 0}
        for e in self.entries:
            out[e["method"]] += 1
        return out

    def to_jsonl(self):
        lines = []
        for e in self.entries:
            theta = e["theta_radians"]
            row = {**e, "theta_radians": None if math.isnan(theta) else theta}
            lines.append(json.dumps(row, allow_nan=False) + "\n")
        return "".join(lines)

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.to_jsonl())


def check_compatible(a, b):
    if a.config != b.config:
        raise MergeError("parent configs differ")
    names_a, names_b = set(a.tensors), set(b.tensors)
    if names_a != names_b:
        odd = sorted(names_a ^ names_b)
        raise MergeError(f"tensor name sets differ, e.g. {odd[0]!r}", tensor=odd[0])
    for name, x in a.tensors.items():
        y = b.tensors[name]
        if x.shape != y.shape:
            raise MergeError(f"shape mismatch for {name!r}: {x.shape} vs {y.shape}", tensor=name)


def merge_checkpoints(a, b, schedule, workers=None):
    """Merge two compatible checkpoints tensor by tensor.

    Every tensor, embeddings and norm gains included, is flattened whole and
    interpolated in float64, then cast back to ``a``'s dtype for that name.
    Returns ``(Checkpoint, MergeReport)``; the output follows ``a``'s order.
    """
    check_compatible(a, b)
    names = list(a.tensors)

    def one(name):
        x, y = a.tensors[name], b.tensors[name]
        t = resolve_t(schedule, name)
        try:
            flat, theta, method = _slerp_flat(
                np.asarray(x, dtype=np.float64).ravel(), np.asarray(y, dtype=np.float64).ravel(), t
            )
        except AntiparallelError as e:
            raise AntiparallelError(f"{name}: {e}", tensor=name) from None
        if method == "copied" and t in (0.0, 1.0):
            out = (x if t == 0.0 else y).astype(x.dtype, copy=True)
        else:
            out = flat.reshape(x.shape).astype(x.dtype)
        return out, {"name": name, "t_used": t, "theta_radians": theta, "method": method}

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, names))
    else:
        results = [one(n) for n in names]

    tensors = {n: r[0] for n, r in zip(names, results)}
    report = MergeReport([r[1] for r in results])
    merged = Checkpoint(tensors, a.config, a.format_version, a.allow_nonfinite or b.allow_nonfinite)
    return merged, report


@dataclass
class CheckpointSummary:
    t: float
    global_l2: float
    tensor_l2: dict
    val_loss: float = float("nan")

    def same_as(self, other, rtol=0.0, atol=0.0):
        def close(x, y):
            if math.isnan(x) and math.isnan(y):
                return True
            return abs(x - y) <= atol + rtol * abs(y)

        return (
            self.tensor_l2.keys() == other.tensor_l2.keys()
            and close(self.global_l2, other.global_l2)
            and all(close(v, other.tensor_l2[k]) for k, v in self.tensor_l2.items())
            and close(self.val_loss, other.val_loss)
        )


def summarize(ckpt, t=float("nan"), val_sequences=None):
    """Norm summary of a checkpoint, plus validation loss when sequences are given."""
    l2 = {name: tensor_stats(ckpt, name)["l2_norm"] for name in ckpt.tensors}
    total = math.sqrt(sum(v * v for v in l2.values()))
    loss = float("nan")
    if val_sequences:
        from .transformer import ToyModel, validation_loss

        loss = validation_loss(ToyModel(ckpt), val_sequences)
    return CheckpointSummary(t, total, l2, loss)


def sweep_merge(a, b, t_values, val_sequences=None):
    """Constant-schedule merges over ``t_values``; one summary per t."""
    out = []
    for t in t_values:
        merged, _ = merge_checkpoints(a, b, MergeSchedule.constant(t))
        out.append((float(t), summarize(merged, float(t), val_sequences)))
    return out
