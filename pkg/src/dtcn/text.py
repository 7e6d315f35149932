"""Text branch: whitespace tokenizer, vocabulary, and the [CLS]-pooled encoder."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ContractError, DataError
from .nn import EncoderLayerParams, encoder_stack, init_encoder_layer
from .rng import Rng
from .tensor import Tensor, add, embedding_lookup, parameter, slice_row

PAD, CLS, UNK, URL, USER, EMOJI = range(6)
RESERVED = ("[PAD]", "[CLS]", "[UNK]", "[URL]", "[USER]", "[EMOJI]")
# surface forms written by the text normaliser
SURFACE = {"HTTPURL": URL, "@USER": USER, "EMOJI": EMOJI}
_DETOKEN = {URL: "HTTPURL", USER: "@USER", EMOJI: "EMOJI", UNK: "[UNK]"}


def _word_key(word: str) -> str:
    return word if word in SURFACE or word in RESERVED else word.lower()


class Vocab:
    """Token <-> id map with the six reserved ids fixed at 0..5."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise DataError(f"vocabulary must start with {RESERVED}")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        if len(self.stoi) != len(tokens):
            raise DataError("duplicate token in vocabulary")
        for word, idx in SURFACE.items():
            self.stoi[word] = idx

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, word: str) -> int:
        return self.stoi.get(_word_key(word), UNK)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int) -> "Vocab":
        """Most frequent words first, ties broken alphabetically; capped at ``max_size``."""
        if max_size < len(RESERVED):
            raise ValueError(f"vocabulary cap must be >= {len(RESERVED)}")
        counts = Counter()
        for text in texts:
            for word in text.split():
                key = _word_key(word)
                if key not in SURFACE and key not in RESERVED:
                    counts[key] += 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        words = [w for w, _ in ranked[: max_size - len(RESERVED)]]
        return cls(list(RESERVED) + words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def tokenize(text: str, vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """``[CLS]`` + whitespace tokens, truncated/padded to ``max_len``.

    Returns ``(ids, mask)``; ``mask`` marks [CLS] and the real tokens.
    """
    if max_len < 2:
        raise ContractError(f"max_len must be >= 2, got {max_len}")
    words = text.split()[: max_len - 1]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[0] = CLS
    for i, w in enumerate(words, start=1):
        ids[i] = vocab.id(w)
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(words) + 1] = True
    return ids, mask


def detokenize(ids: np.ndarray, vocab: Vocab) -> str:
    words = []
    for i in np.asarray(ids):
        i = int(i)
        if i in (PAD, CLS):
            continue
        words.append(_DETOKEN.get(i, vocab.itos[i]))
    return " ".join(words)


@dataclass
class TextBranchParams:
    token_embedding: Tensor
    position_embedding: Tensor
    base: list[EncoderLayerParams]
    refine: list[EncoderLayerParams]

    @property
    def max_len(self) -> int:
        return self.position_embedding.shape[0]


def init_text_branch(
    rng: Rng, vocab_size: int, max_len: int, d: int, n_heads: int, d_ff: int, n_base: int, n_refine: int
) -> TextBranchParams:
    if n_base < 1 or n_refine < 0 or max_len < 2:
        raise ContractError(f"text branch needs >=1 base layers, >=0 refinement layers, max_len >= 2")
    return TextBranchParams(
        token_embedding=parameter(rng.spawn("token_embedding").normal((vocab_size, d), 0.02)),
        position_embedding=parameter(rng.spawn("position_embedding").normal((max_len, d), 0.02)),
        base=[init_encoder_layer(rng.spawn(f"base.{i}"), d, n_heads, d_ff) for i in range(n_base)],
        refine=[init_encoder_layer(rng.spawn(f"refine.{i}"), d, n_heads, d_ff) for i in range(n_refine)],
    )


def embed_text(ids: np.ndarray, params: TextBranchParams) -> Tensor:
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.shape[1] != params.max_len:
        raise ContractError(f"expected ids of shape (B, {params.max_len}), got {ids.shape}")
    return add(embedding_lookup(params.token_embedding, ids), params.position_embedding)


def encode_text(
    ids: np.ndarray,
    mask: np.ndarray,
    params: TextBranchParams,
    rng: Rng | None = None,
    training: bool = False,
    p_drop: float = 0.0,
) -> Tensor:
    """Batched text encoder returning the refined [CLS] rows, shape ``(B, d)``."""
    hidden = encoder_stack(embed_text(ids, params), params.base, mask, rng, training, p_drop)
    hidden = encoder_stack(hidden, params.refine, mask, rng, training, p_drop)
    return slice_row(hidden, 0, axis=1)
