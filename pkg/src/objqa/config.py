"""Run configuration: one flat dataclass, read from ``key = value`` text."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


def _default_data_dir() -> str:
    return os.environ.get("OQA_DATA_DIR", "")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data_dir: str = field(default_factory=_default_data_dir)
    kind: str = "Mixed"

    # desk-scale sizes
    n_clean: int = 1000
    n_intra: int = 1000
    n_inter: int = 1000
    n_sequences: int = 200
    seq_min: int = 5
    seq_max: int = 9

    # extractor
    feature_dim: int = 64
    hidden: int = 256
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3

    # relative quality
    heads: int = 4
    attention: str = "standard"
    rqa_lr: float = 5e-4
    rqa_decay_rate: float = 0.94
    rqa_decay_every: int = 200
    rqa_batch: int = 32
    rqa_epochs: int = 1200
    lambda_c: float = 1.0
    template_triplets: int = 64

    # absolute quality
    aqa_hidden: int = 64
    aqa_lr: float = 1e-3
    aqa_weight_decay: float = 5e-4
    aqa_batch: int = 2048
    aqa_epochs: int = 1500
    eps: float = 0.02
    zeta: float = 0.01
    lambda_intra: float = 1.0
    lambda_a1: float = 1.0
    lambda_a2: float = 1.0
    entropy_floor: float = 0.0
    aqa_average_from: float = 0.5
    use_intra: bool = True
    use_inter: bool = True

    # eval
    ablation: bool = False

    def __post_init__(self):
        if self.kind not in ("Blur", "Illumination", "Mixed"):
            raise ConfigError(f"kind must be Blur, Illumination or Mixed, got {self.kind!r}")
        if self.attention not in ("standard", "as-printed"):
            raise ConfigError(f"attention must be 'standard' or 'as-printed', got {self.attention!r}")
        if self.feature_dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide feature_dim={self.feature_dim}")
        if not 3 <= self.seq_min <= self.seq_max:
            raise ConfigError("need 3 <= seq_min <= seq_max")
        if not 0.0 <= self.aqa_average_from <= 1.0:
            raise ConfigError("aqa_average_from must lie in [0, 1]")
        if self.n_clean < 20:
            raise ConfigError("n_clean must be at least 20 (two per class)")

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        merged = asdict(self)
        merged.update(_coerce(overrides))
        return RunConfig(**merged)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(raw: dict) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        typ = _TYPES[key]
        if not isinstance(value, str):
            out[key] = value
            continue
        try:
            if typ == "bool":
                low = value.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                out[key] = low in ("1", "true", "yes")
            elif typ == "int":
                out[key] = int(value)
            elif typ == "float":
                out[key] = float(value)
            else:
                out[key] = value.strip()
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return out


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        raw[k.strip()] = v.strip()
    return raw


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    raw = parse_config_text(Path(path).read_text()) if path else {}
    raw.update(overrides or {})
    return RunConfig().with_overrides(raw)
