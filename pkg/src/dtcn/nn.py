"""Transformer encoder blocks shared by the text and image branches.

Post-norm layout::

    y   = LN(x + MHSA(x))
    out = LN(y + W2 . dropout(gelu(W1 . y)))

Linear weights are stored ``(in, out)`` so a projection is ``x @ w + b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    dropout,
    gelu,
    layer_norm,
    matmul,
    parameter,
    reshape,
    scale,
    softmax,
    transpose,
)


@dataclass
class Linear:
    w: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)


def init_linear(rng: Rng, n_in: int, n_out: int, zero: bool = False) -> Linear:
    """Xavier-normal weights (all zeros with ``zero=True``), zero bias."""
    if zero:
        w = np.zeros((n_in, n_out))
    else:
        w = rng.normal((n_in, n_out), math.sqrt(2.0 / (n_in + n_out)))
    return Linear(parameter(w), parameter(np.zeros(n_out)))


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


def init_layer_norm(d: int) -> LayerNormParams:
    return LayerNormParams(parameter(np.ones(d)), parameter(np.zeros(d)))


@dataclass
class EncoderLayerParams:
    q: Linear
    k: Linear
    v: Linear
    out: Linear
    ff1: Linear
    ff2: Linear
    ln1: LayerNormParams
    ln2: LayerNormParams
    n_heads: int

    @property
    def d(self) -> int:
        return self.q.w.shape[0]


def init_encoder_layer(rng: Rng, d: int, n_heads: int, d_ff: int) -> EncoderLayerParams:
    if n_heads < 1 or d % n_heads:
        raise DimensionError(f"hidden size {d} is not divisible by {n_heads} heads")
    if d_ff < d:
        raise DimensionError(f"feed-forward width {d_ff} must be >= hidden size {d}")
    return EncoderLayerParams(
        q=init_linear(rng.spawn("q"), d, d),
        k=init_linear(rng.spawn("k"), d, d),
        v=init_linear(rng.spawn("v"), d, d),
        out=init_linear(rng.spawn("out"), d, d),
        ff1=init_linear(rng.spawn("ff1"), d, d_ff),
        ff2=init_linear(rng.spawn("ff2"), d_ff, d),
        ln1=init_layer_norm(d),
        ln2=init_layer_norm(d),
        n_heads=n_heads,
    )


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def attention_weights(x: Tensor, params: EncoderLayerParams, mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
    """Per-head attention probabilities ``(B, h, n, n)`` and values ``(B, h, n, d/h)``."""
    if x.ndim != 3:
        raise DimensionError(f"attention expects (B, n, d), got {x.shape}")
    b, n, d = x.shape
    h = params.n_heads
    if d != params.d or d % h:
        raise DimensionError(f"attention: input width {d} vs params {params.d} with {h} heads")
    key_mask = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (b, n):
            raise DimensionError(f"attention mask shape {mask.shape} != {(b, n)}")
        if not mask.any(axis=1).all():
            raise ContractError("attention: sequence with every position masked")
        # queries may be padding; keys that are padding are never attended to
        key_mask = mask[:, None, None, :]
    q = _split_heads(params.q(x), h)
    k = _split_heads(params.k(x), h)
    v = _split_heads(params.v(x), h)
    logits = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // h))
    return softmax(logits, key_mask), v


def multi_head_self_attention(x: Tensor, params: EncoderLayerParams, mask: np.ndarray | None = None) -> Tensor:
    weights, v = attention_weights(x, params, mask)
    b, n, d = x.shape
    heads = transpose(matmul(weights, v), (0, 2, 1, 3))
    return params.out(reshape(heads, (b, n, d)))


def encoder_layer(
    x: Tensor,
    params: EncoderLayerParams,
    mask: np.ndarray | None = None,
    rng: Rng | None = None,
    training: bool = False,
    p_drop: float = 0.0,
) -> Tensor:
    y = params.ln1(add(x, multi_head_self_attention(x, params, mask)))
    ff = params.ff2(dropout(gelu(params.ff1(y)), p_drop, rng, training))
    return params.ln2(add(y, ff))


def encoder_stack(
    x: Tensor,
    layers: list[EncoderLayerParams],
    mask: np.ndarray | None = None,
    rng: Rng | None = None,
    training: bool = False,
    p_drop: float = 0.0,
) -> Tensor:
    for layer in layers:
        x = encoder_layer(x, layer, mask, rng, training, p_drop)
    return x
