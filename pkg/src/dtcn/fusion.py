"""Fusion and objectives: modality projections, mean early fusion, NT-Xent,
the classifier head, the joint loss, and the decision-level late-fusion variant."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError
from .nn import LayerNormParams, Linear, init_layer_norm, init_linear
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    concat,
    constant,
    cross_entropy_from_logits,
    dropout,
    gelu,
    l2_normalize_rows,
    log_softmax,
    matmul,
    mean,
    pick,
    scale,
    transpose,
)

DEFAULT_TAU = 0.5
DEFAULT_LAMBDA = 0.2


@dataclass
class ContrastiveConfig:
    tau: float = DEFAULT_TAU
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if not self.lam >= 0:
            raise ConfigError(f"contrastive weight must be non-negative, got {self.lam}")


@dataclass
class FusionParams:
    """Early mode fills the projection/classifier fields, late mode the two heads."""

    proj_text: Linear | None = None
    proj_image: Linear | None = None
    head_norm: LayerNormParams | None = None
    head_hidden: Linear | None = None
    head_out: Linear | None = None
    late_text: Linear | None = None
    late_image: Linear | None = None


def init_fusion(rng: Rng, d: int, n_classes: int, mode: str = "early", d_hidden: int | None = None) -> FusionParams:
    """Layers that emit logits start at zero so every class begins equally likely."""
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    d_hidden = d if d_hidden is None else d_hidden
    if mode == "early":
        return FusionParams(
            proj_text=init_linear(rng.spawn("proj_text"), d, d),
            proj_image=init_linear(rng.spawn("proj_image"), d, d),
            head_norm=init_layer_norm(d),
            head_hidden=init_linear(rng.spawn("head_hidden"), d, d_hidden),
            head_out=init_linear(rng.spawn("head_out"), d_hidden, n_classes, zero=True),
        )
    if mode == "late":
        return FusionParams(
            late_text=init_linear(rng.spawn("late_text"), d, n_classes, zero=True),
            late_image=init_linear(rng.spawn("late_image"), d, n_classes, zero=True),
        )
    raise ConfigError(f"unknown fusion mode {mode!r}")


def fuse_early(h_text: Tensor, h_image: Tensor, params: FusionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(z_text, z_image, h_joint)`` with ``h_joint = (z_text + z_image) / 2``."""
    if h_text.shape != h_image.shape or h_text.ndim != 2:
        raise DimensionError(f"fuse_early: text {h_text.shape} vs image {h_image.shape}")
    z_text = params.proj_text(h_text)
    z_image = params.proj_image(h_image)
    return z_text, z_image, scale(add(z_text, z_image), 0.5)


def nt_xent(z_text: Tensor, z_image: Tensor, tau: float) -> Tensor:
    """NT-Xent over the ``2B`` normalised rows; each row's positive is its
    cross-modal partner and the self-similarity is left out of the denominator."""
    if z_text.shape != z_image.shape or z_text.ndim != 2:
        raise DimensionError(f"nt_xent: {z_text.shape} vs {z_image.shape}")
    b = z_text.shape[0]
    if b == 0:
        raise ContractError("nt_xent on an empty batch")
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    z = concat([l2_normalize_rows(z_text), l2_normalize_rows(z_image)], axis=0)
    sim = scale(matmul(z, transpose(z)), 1.0 / tau)
    not_self = ~np.eye(2 * b, dtype=bool)
    positives = np.concatenate([np.arange(b, 2 * b), np.arange(b)])
    return scale(mean(pick(log_softmax(sim, not_self), positives)), -1.0)


def classify(h_joint: Tensor, params: FusionParams, rng: Rng | None = None, training: bool = False, p_drop: float = 0.0) -> Tensor:
    hidden = gelu(params.head_hidden(params.head_norm(h_joint)))
    return params.head_out(dropout(hidden, p_drop, rng, training))


def fuse_late(h_text: Tensor, h_image: Tensor, params: FusionParams) -> Tensor:
    """Decision-level fusion: average of per-modality linear logits."""
    if h_text.shape != h_image.shape or h_text.ndim != 2:
        raise DimensionError(f"fuse_late: text {h_text.shape} vs image {h_image.shape}")
    return scale(add(params.late_text(h_text), params.late_image(h_image)), 0.5)


def check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    bad = np.flatnonzero((labels < 0) | (labels >= n_classes))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"sample {i}: label {int(labels[i])} outside [0, {n_classes})")
    return labels


def joint_loss(
    logits: Tensor, labels: np.ndarray, z_text: Tensor | None, z_image: Tensor | None, cfg: ContrastiveConfig
) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, classification, contrastive)`` with total = cls + lambda * contrast.

    With no projections (late fusion) the contrastive term is a constant 0.
    """
    labels = check_labels(labels, logits.shape[1])
    l_cls = cross_entropy_from_logits(logits, labels)
    if z_text is None or z_image is None:
        l_con = constant(0.0)
    else:
        l_con = nt_xent(z_text, z_image, cfg.tau)
    return add(l_cls, scale(l_con, cfg.lam)), l_cls, l_con
