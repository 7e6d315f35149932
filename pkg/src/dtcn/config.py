"""Run configuration and its flat ``key = value`` text format.

One assignment per line; ``#`` starts a comment; blank lines are ignored.
Tuples are written comma-separated (``image_size = 16,16``) and
``clip_norm = off`` disables gradient clipping.  ``lr = lr_paper`` selects the
fine-tuning rate used with pretrained backbones.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

LR_PAPER = 2e-5


@dataclass(frozen=True)
class RunConfig:
    hidden_dim: int = 32
    n_heads: int = 8
    text_layers: int = 2
    extra_text_layers: int = 1
    image_layers: int = 2
    ffn_mult: int = 4
    patch_size: int = 4
    image_size: tuple[int, int] = (16, 16)
    channels: int = 1
    vocab_size: int = 1000
    max_seq_len: int = 16
    num_classes: int = 3
    tau: float = 0.5
    lam: float = 0.2
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    dropout: float = 0.1
    seed: int = 42
    fusion: str = "early"
    f1_average: str = "macro"
    clip_norm: float | None = 1.0
    patience: int = 10

    def __post_init__(self):
        self.validate()

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.hidden_dim

    @property
    def n_patches(self) -> int:
        h, w = self.image_size
        return (h // self.patch_size) * (w // self.patch_size)

    def validate(self) -> None:
        def need(cond: bool, msg: str):
            if not cond:
                raise ConfigError(msg)

        for name in ("hidden_dim", "n_heads", "text_layers", "image_layers", "patch_size", "channels",
                     "batch_size", "ffn_mult", "patience"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.extra_text_layers >= 0, "extra_text_layers must be >= 0")
        need(self.epochs >= 0, "epochs must be >= 0")
        need(self.hidden_dim % self.n_heads == 0,
             f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        h, w = self.image_size
        need(h >= 1 and w >= 1, "image_size extents must be positive")
        need(h % self.patch_size == 0 and w % self.patch_size == 0,
             f"image_size {h}x{w} not divisible by patch_size {self.patch_size}")
        need(self.vocab_size >= 6, "vocab_size must be >= 6 (reserved tokens)")
        need(self.max_seq_len >= 2, "max_seq_len must be >= 2")
        need(self.num_classes >= 2, "num_classes must be >= 2")
        need(self.tau > 0, "tau must be > 0")
        need(self.lam >= 0, "lambda must be >= 0")
        need(self.lr > 0, "lr must be > 0")
        need(0.0 <= self.dropout < 1.0, "dropout must be in [0, 1)")
        need(0 <= self.seed < 2**64, "seed must be a 64-bit unsigned integer")
        need(self.fusion in ("early", "late"), f"fusion must be early|late, got {self.fusion!r}")
        need(self.f1_average in ("macro", "weighted"), f"f1_average must be macro|weighted, got {self.f1_average!r}")
        need(self.clip_norm is None or self.clip_norm > 0, "clip_norm must be > 0 or off")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------ text format

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{_KEY_OF.get(f.name, f.name)} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = parse_assignments(text)
        return (base or cls()).with_overrides(values)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
        return cls.loads(text)

    def with_overrides(self, values: dict[str, str]) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(self)}
        unknown = [k for k in values if _FIELD_OF.get(k, k) not in fields]
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        changes = {}
        for key, raw in values.items():
            name = _FIELD_OF.get(key, key)
            changes[name] = _parse(name, raw, type(getattr(self, name)))
        return dataclasses.replace(self, **changes)


_KEY_OF = {"lam": "lambda"}
_FIELD_OF = {v: k for k, v in _KEY_OF.items()}


def parse_assignments(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _format(value) -> str:
    if value is None:
        return "off"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(name: str, raw: str, current_type: type):
    try:
        if name == "clip_norm":
            return None if raw.lower() in ("off", "none") else float(raw)
        if name == "lr" and raw == "lr_paper":
            return LR_PAPER
        if name == "image_size":
            parts = [int(p) for p in raw.replace("x", ",").split(",")]
            if len(parts) == 1:
                parts *= 2
            if len(parts) != 2:
                raise ValueError(raw)
            return tuple(parts)
        if current_type is bool:
            return raw.lower() in ("1", "true", "yes")
        if current_type is int:
            return int(raw)
        if current_type is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {raw!r}") from e
