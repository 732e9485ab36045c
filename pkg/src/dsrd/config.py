"""Run configuration dataclasses and the line-based config file format."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict


@dataclass
class AblationFlags:
    no_decay: bool = False      # fix the temporal decay factor in the event weights to 1
    no_diffusion: bool = False  # skip cross-depth state propagation (single hop only)
    no_state: bool = False      # no persistent state; score from fresh injections alone
    no_block: bool = False      # replace the gated state machine by flat aggregation


@dataclass
class ModelConfig:
    dim: int = 64               # model width d
    layers: int = 2             # propagation depths K
    heads: int = 2              # parallel heads H (head width = dim // heads)
    neighbors: int = 20         # short-term temporal neighbors per query
    time_dim: int = 64          # time-encoding width
    ff_mult: int = 4            # feed-forward expansion
    num_classes: int = 1        # node-label channels
    dtype: str = "float32"      # training arithmetic; checks run float64
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 200
    patience: int = 10
    max_epochs: int = 50
    seed: int = 0
    dropout: float = 0.1
    task: str = "link_prediction"  # or "node_classification"

    def __post_init__(self):
        # lr = 0 is legal and means "score but never update"
        if self.lr < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("bad training configuration")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout out of range")
        if self.task not in ("link_prediction", "node_classification"):
            raise ValueError(f"unknown task {self.task!r}")


_INT_KEYS = {"batch_size", "patience", "max_epochs", "seed", "layers", "heads",
             "dim", "neighbors", "time_dim", "ff_mult", "num_classes"}
_FLOAT_KEYS = {"lr", "dropout"}
_BOOL_KEYS = {"no_decay", "no_diffusion", "no_state", "no_block"}


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Parse `key = value` lines; '#' starts a comment; unknown keys fail."""
    model_kw, train_kw, flags_kw = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("ablation."):
            key = key[len("ablation."):]
            if key not in _BOOL_KEYS:
                raise ValueError(f"config line {lineno}: unknown ablation flag {key!r}")
            flags_kw[key] = value.lower() in ("1", "true", "yes", "on")
        elif key in _INT_KEYS:
            kw = model_kw if key in ("layers", "heads", "dim", "neighbors",
                                     "time_dim", "ff_mult", "num_classes") else train_kw
            kw[key] = int(value)
        elif key in _FLOAT_KEYS:
            train_kw[key] = float(value)
        elif key == "task":
            train_kw[key] = value
        elif key == "dtype":
            model_kw[key] = value
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    model = ModelConfig(ablation=AblationFlags(**flags_kw), **model_kw)
    train = TrainConfig(**train_kw)
    return model, train


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def config_dict(model: ModelConfig, train: TrainConfig | None = None) -> dict:
    out = {"model": asdict(model)}
    if train is not None:
        out["train"] = asdict(train)
    return out


def config_hash(model: ModelConfig, train: TrainConfig | None = None) -> str:
    blob = json.dumps(config_dict(model, train), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
