"""Flat ``key = value`` configuration shared by the data generator, model and trainer."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Union


@dataclass
class Config:
    # synthetic data
    class_count: int = 4
    samples_per_class: int = 200
    patch_noise: float = 1.0
    patch_jitter: float = 1.0
    tokens_per_class: int = 16
    vocab_overlap: float = 0.25
    train_fraction: float = 0.8
    data_seed: int = 0
    # encoders
    dim: int = 64
    patch_dim: int = 8
    patches: int = 16
    seq_len: int = 12
    vocab_size: int = 64
    heads: int = 2
    ffn_dim: int = 64
    pos_encoding: bool = True
    ln_eps: float = 1e-5
    # augmentation for the divergence path
    aug_noise: float = 0.1
    aug_flip_prob: float = 0.5
    aug_scale_min: float = 0.8
    aug_scale_max: float = 1.2
    # knowledge graph
    relations_per_class: int = 3
    entity_dim: int = 32
    transe_margin: float = 1.0
    transe_epochs: int = 200
    transe_lr: float = 0.01
    gat_slope: float = 0.2
    knowledge_trainable: bool = False
    # loss hyper-parameters
    tau1: float = 0.07
    lambda0: float = 0.5
    tau2: float = 0.1
    share_local_qkv: bool = False
    tau3: float = 0.1
    tau4: float = 0.1
    prototypes: int = 8
    fused_dim: int = 64
    topic_mode: str = "scalar"
    topic_groups: int = 8
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 3
    sinkhorn_eval_iters: int = 50
    margin_itm: float = 0.5
    margin_ts: float = 0.5
    alpha: float = 0.5
    swap_prob: float = 0.15
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    # optimisation
    steps: int = 500
    batch_size: int = 16
    lr: float = 0.002
    momentum: float = 0.9
    optimizer: str = "adam"
    lr_schedule: str = "cosine"
    seed: int = 0
    precision: str = "f32"
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if int(round(self.patches**0.5)) ** 2 != self.patches:
            raise ValueError("patches must be a perfect square")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.fused_dim != self.dim:
            raise ValueError("fused_dim must equal dim (codes and prototypes share a space)")
        if self.topic_mode not in ("scalar", "sequence"):
            raise ValueError("topic_mode must be 'scalar' or 'sequence'")
        if self.topic_mode == "sequence" and self.dim % self.topic_groups:
            raise ValueError("dim must be divisible by topic_groups")
        for name in ("tau1", "tau2", "tau3", "tau4", "sinkhorn_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        weights = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5]
        if min(weights + [self.lambda0]) < 0:
            raise ValueError("loss weights must be >= 0")
        if max(weights) <= 0:
            raise ValueError("at least one of lambda1..lambda5 must be > 0")
        if not 0.0 <= self.swap_prob <= 1.0:
            raise ValueError("swap_prob must lie in [0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")
        vocab_needed = 1 + self.tokens_per_class + (self.class_count - 1) * self.vocab_stride
        if vocab_needed > self.vocab_size:
            raise ValueError(f"vocab_size {self.vocab_size} too small; need {vocab_needed}")

    @property
    def vocab_stride(self) -> int:
        shared = int(round(self.vocab_overlap * self.tokens_per_class))
        return max(1, self.tokens_per_class - shared)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(name: str, raw: str, kind: type) -> Any:
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ValueError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from exc


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config_text(text: str, base: Config = None, allowed: set = None) -> Config:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys raise."""
    types = {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(Config)}
    values: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types or (allowed is not None and key not in allowed):
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    base = base or Config()
    return dataclasses.replace(base, **values)


def load_config(path: Union[str, Path], base: Config = None, allowed: set = None) -> Config:
    return parse_config_text(Path(path).read_text(), base=base, allowed=allowed)


DATASET_KEYS = {
    "class_count",
    "samples_per_class",
    "patch_noise",
    "patch_jitter",
    "tokens_per_class",
    "vocab_overlap",
    "train_fraction",
    "data_seed",
    "patch_dim",
    "patches",
    "seq_len",
    "vocab_size",
}
