"""Named-tensor checkpoint container.

File layout::

    bytes 0..7      magic b"ALLOYCK1"
    bytes 8..15     little-endian uint64 N, length of the JSON index
    bytes 16..16+N  UTF-8 JSON {format_version, allow_nonfinite, config, tensors}
    payload         raw little-endian tensor data, each entry 64-byte aligned

Tensor offsets in the index are relative to the payload start. The index is
space-padded so the payload itself starts on a 64-byte boundary.
"""

import json
import math
import re
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import kernels

MAGIC = b"ALLOYCK1"
FORMAT_VERSION = 1
ALIGN = 64

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class CheckpointError(ValueError):
    """Base class for container and validation failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class DuplicateNameError(CheckpointError):
    pass


class NonFiniteError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters of the decoder stack.

    Defaults are the desk-scale toy shape: the FFN/model ratio (3.5) and the
    query/kv head ratio (4) of the 8B reference model are preserved.
    """

    n_layers: int = 2
    d_model: int = 64
    d_ffn: int = 224
    n_heads: int = 8
    n_kv_heads: int = 2
    vocab_size: int = 256
    max_seq_len: int = 512
    rope_theta: float = 500_000.0
    rmsnorm_eps: float = 1e-5
    swiglu_beta: float = 1.0
    tie_embeddings: bool = True

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_ffn", "n_heads", "n_kv_heads", "vocab_size", "max_seq_len"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise CheckpointError(f"{name} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads:
            raise CheckpointError("d_model must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads:
            raise CheckpointError("n_heads must be divisible by n_kv_heads")
        if self.head_dim % 2:
            raise CheckpointError("head_dim must be even for rotary pairing")
        if not self.rope_theta > 1:
            raise CheckpointError("rope_theta must be > 1")
        if not self.rmsnorm_eps > 0:
            raise CheckpointError("rmsnorm_eps must be > 0")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    @property
    def kv_dim(self):
        return self.n_kv_heads * self.head_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise CheckpointError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# Production-scale 8B reference shape, kept for documentation and shape-ratio tests.
REFERENCE_8B = ModelConfig(
    n_layers=32,
    d_model=4096,
    d_ffn=14336,
    n_heads=32,
    n_kv_heads=8,
    vocab_size=128_256,
    max_seq_len=131_072,
    rope_theta=500_000.0,
)


@dataclass(frozen=True)
class TensorRecord:
    """One entry of the on-disk index."""

    name: str
    dtype: str
    shape: tuple
    offset: int
    nbytes: int


@dataclass
class Checkpoint:
    """Ordered named tensors plus the model configuration they belong to.

    Iteration order of ``tensors`` is the serialized order.
    """

    tensors: dict = field(default_factory=dict)
    config: ModelConfig = field(default_factory=ModelConfig)
    format_version: int = FORMAT_VERSION
    allow_nonfinite: bool = False

    def __post_init__(self):
        self.tensors = dict(self.tensors)
        self.validate()

    def validate(self):
        for name, arr in self.tensors.items():
            if not isinstance(name, str) or not name:
                raise CheckpointError("tensor names must be non-empty strings")
            if not isinstance(arr, np.ndarray):
                raise CheckpointError(f"{name}: expected ndarray, got {type(arr).__name__}")
            if arr.dtype not in _DTYPE_NAMES:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            if arr.ndim == 0 or any(s < 1 for s in arr.shape):
                raise CheckpointError(f"{name}: shape entries must be positive, got {arr.shape}")
            if not self.allow_nonfinite and not np.isfinite(arr).all():
                raise NonFiniteError(f"{name}: non-finite element")

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def __eq__(self, other):
        """Bitwise equality: same order, names, dtypes, shapes and bytes."""
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if (self.config, self.format_version, self.allow_nonfinite) != (
            other.config,
            other.format_version,
            other.allow_nonfinite,
        ):
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        for name, a in self.tensors.items():
            b = other.tensors[name]
            if a.dtype != b.dtype or a.shape != b.shape:
                return False
            if np.ascontiguousarray(a).tobytes() != np.ascontiguousarray(b).tobytes():
                return False
        return True

    __hash__ = None

    def copy(self):
        return Checkpoint(
            {k: v.copy() for k, v in self.tensors.items()},
            self.config,
            self.format_version,
            self.allow_nonfinite,
        )


def _build_index(ckpt):
    records = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        nbytes = arr.size * arr.dtype.itemsize
        records.append(TensorRecord(name, _DTYPE_NAMES[arr.dtype], tuple(arr.shape), offset, nbytes))
        offset += -(-nbytes // ALIGN) * ALIGN
    return records


def _index_bytes(ckpt, records):
    header = {
        "format_version": ckpt.format_version,
        "allow_nonfinite": ckpt.allow_nonfinite,
        "config": ckpt.config.to_dict(),
        "tensors": [
            {"name": r.name, "dtype": r.dtype, "shape": list(r.shape), "offset": r.offset, "nbytes": r.nbytes}
            for r in records
        ],
    }
    raw = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    pad = -(16 + len(raw)) % ALIGN
    return raw + b" " * pad


def to_bytes(ckpt):
    """Serialize ``ckpt``; output is a pure function of the input."""
    ckpt.validate()
    records = _build_index(ckpt)
    index = _index_bytes(ckpt, records)
    parts = [MAGIC, struct.pack("<Q", len(index)), index]
    for rec, arr in zip(records, ckpt.tensors.values()):
        data = np.ascontiguousarray(arr, dtype=DTYPES[rec.dtype]).tobytes()
        parts.append(data)
        parts.append(b"\x00" * (-len(data) % ALIGN))
    return b"".join(parts)


def write_checkpoint(ckpt, path):
    with open(path, "wb") as f:
        f.write(to_bytes(ckpt))


def from_bytes(buf):
    buf = memoryview(buf)
    if len(buf) < 16 or bytes(buf[:8]) != MAGIC:
        raise BadMagicError("not an ALLOYCK1 checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", buf[8:16])
    if 16 + n > len(buf):
        raise TruncatedError(f"index length {n} exceeds file size {len(buf)}")
    try:
        header = json.loads(bytes(buf[16 : 16 + n]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt index: {e}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format_version {version!r}, expected {FORMAT_VERSION}")
    config = ModelConfig.from_dict(header["config"])
    payload = 16 + n
    tensors = {}
    for entry in header["tensors"]:
        name = entry["name"]
        if name in tensors:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        if entry["dtype"] not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype {entry['dtype']!r}")
        dtype = DTYPES[entry["dtype"]]
        shape = tuple(int(s) for s in entry["shape"])
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != math.prod(shape) * dtype.itemsize:
            raise CheckpointError(f"{name}: nbytes {nbytes} disagrees with shape {shape}")
        start = payload + offset
        if offset < 0 or start + nbytes > len(buf):
            raise TruncatedError(f"{name}: entry [{offset}, +{nbytes}) runs past end of file")
        arr = np.frombuffer(buf[start : start + nbytes], dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return Checkpoint(tensors, config, version, bool(header.get("allow_nonfinite", False)))


def read_checkpoint(path):
    with open(path, "rb") as f:
        return from_bytes(f.read())


def tensor_stats(ckpt, name):
    """min, max, mean and L2 norm of one tensor, accumulated in float64."""
    if name not in ckpt.tensors:
        raise KeyError(f"unknown tensor {name!r}")
    lo, hi, mean, l2 = kernels.stats(ckpt.tensors[name])
    return {"min": float(lo), "max": float(hi), "mean": float(mean), "l2_norm": float(l2)}


# ---------------------------------------------------------------------------
# parameter naming and shape contract
# ---------------------------------------------------------------------------

LAYER_PARAMS = (
    "attn_norm.gain",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ffn_norm.gain",
    "ffn.w_gate",
    "ffn.w_up",
    "ffn.w_down",
)


def expected_shapes(config):
    """Ordered name -> shape map of every transformer parameter."""
    c = config
    shapes = {"embed.weight": (c.vocab_size, c.d_model)}
    per_layer = {
        "attn_norm.gain": (c.d_model,),
        "attn.wq": (c.d_model, c.d_model),
        "attn.wk": (c.d_model, c.kv_dim),
        "attn.wv": (c.d_model, c.kv_dim),
        "attn.wo": (c.d_model, c.d_model),
        "ffn_norm.gain": (c.d_model,),
        "ffn.w_gate": (c.d_model, c.d_ffn),
        "ffn.w_up": (c.d_model, c.d_ffn),
        "ffn.w_down": (c.d_ffn, c.d_model),
    }
    for i in range(c.n_layers):
        for key in LAYER_PARAMS:
            shapes[f"layers.{i}.{key}"] = per_layer[key]
    shapes["final_norm.gain"] = (c.d_model,)
    if not c.tie_embeddings:
        shapes["output.weight"] = (c.vocab_size, c.d_model)
    return shapes


_LAYER_RE = re.compile(r"^layers\.(\d+)\.(.+)$")


def validate_against_config(ckpt, config=None, strict=False):
    """Raise ConfigMismatchError if any present tensor disagrees with the config.

    With ``strict=True`` names outside the parameter contract and missing
    parameters are errors as well.
    """
    config = config or ckpt.config
    want = expected_shapes(config)
    for name, arr in ckpt.tensors.items():
        if name in want:
            if tuple(arr.shape) != want[name]:
                raise ConfigMismatchError(f"{name}: shape {tuple(arr.shape)} != expected {want[name]}")
            continue
        m = _LAYER_RE.match(name)
        if m and m.group(2) in LAYER_PARAMS:
            raise ConfigMismatchError(f"{name}: layer index out of range for n_layers={config.n_layers}")
        if name == "output.weight":
            if tuple(arr.shape) != (config.vocab_size, config.d_model):
                raise ConfigMismatchError(f"{name}: shape {tuple(arr.shape)} disagrees with config")
            continue
        if strict:
            raise ConfigMismatchError(f"{name}: not a parameter of this architecture")
    if strict:
        missing = [n for n in want if n not in ckpt.tensors]
        if missing:
            raise ConfigMismatchError(f"missing parameters: {missing[:5]}")
