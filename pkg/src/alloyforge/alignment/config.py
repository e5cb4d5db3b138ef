"""Training configurations with strict dict/JSON loading."""

import json
from dataclasses import asdict, dataclass, fields


class ConfigError(ValueError):
    pass


class _Config:
    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError(f"{cls.__name__}: expected a JSON object")
        spec = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(spec)
        if unknown:
            raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            want = type(getattr(cls, k))
            if want is float and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            if type(v) is not want:
                raise ConfigError(f"{cls.__name__}.{k}: expected {want.__name__}, got {v!r}")
            kwargs[k] = v
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            try:
                return cls.from_dict(json.load(f))
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: {e}") from None

    def to_dict(self):
        return asdict(self)

    def _nonneg(self, *names):
        for n in names:
            if getattr(self, n) < 0:
                raise ConfigError(f"{type(self).__name__}.{n} must be >= 0")

    def _positive(self, *names):
        for n in names:
            if not getattr(self, n) > 0:
                raise ConfigError(f"{type(self).__name__}.{n} must be > 0")


@dataclass
class SftConfig(_Config):
    learning_rate: float = 2e-5
    epochs: int = 2
    max_seq: int = 8192
    warmup_steps: int = 100
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        self._nonneg("learning_rate", "epochs", "warmup_steps")
        self._positive("max_seq", "batch_size")


@dataclass
class DpoConfig(_Config):
    beta: float = 0.1
    learning_rate: float = 1e-6
    epochs: int = 2
    batch_size: int = 8
    # online sampling
    temperature: float = 1.0
    max_new_tokens: int = 4
    seed: int = 0

    def __post_init__(self):
        self._positive("beta", "batch_size", "max_new_tokens")
        self._nonneg("learning_rate", "epochs", "temperature")


@dataclass
class SkldConfig(_Config):
    alpha: float = 0.1
    sgo_ratio: float = 0.0
    buffer_capacity: int = 64
    adapt_step: float = 0.1
    learning_rate: float = 1e-3
    epochs: int = 2
    batch_size: int = 8
    max_new_tokens: int = 8
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("SkldConfig.alpha must lie in [0, 1)")
        if not 0.0 <= self.sgo_ratio <= 1.0:
            raise ConfigError("SkldConfig.sgo_ratio must lie in [0, 1]")
        self._positive("buffer_capacity", "batch_size", "max_new_tokens")
        self._nonneg("learning_rate", "epochs", "temperature")
