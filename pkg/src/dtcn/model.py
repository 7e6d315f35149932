"""The full dual-branch model: parameters, forward pass and loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .fusion import (
    ContrastiveConfig,
    FusionParams,
    classify,
    fuse_early,
    fuse_late,
    init_fusion,
    joint_loss,
)
from .image import ImageBranchParams, encode_image, init_image_branch
from .rng import Rng
from .tensor import Tensor, named_parameters
from .text import TextBranchParams, encode_text, init_text_branch


@dataclass
class ModelParams:
    text: TextBranchParams
    image: ImageBranchParams
    fusion: FusionParams

    def named(self) -> list[tuple[str, Tensor]]:
        return list(named_parameters(self))


@dataclass
class Batch:
    ids: np.ndarray  # (B, max_len) int
    mask: np.ndarray  # (B, max_len) bool
    images: np.ndarray  # (B, H, W, C) in [0, 1]
    labels: np.ndarray  # (B,) int
    sample_ids: list[str]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Output:
    logits: Tensor
    z_text: Tensor | None
    z_image: Tensor | None


def init_model(cfg: RunConfig, vocab_size: int) -> ModelParams:
    """Every tensor draws from its own stream ``init/<path>`` so that changing
    one part of the architecture leaves the rest of the initialisation intact."""
    root = Rng(cfg.seed).spawn("init")
    d, h, ff = cfg.hidden_dim, cfg.n_heads, cfg.ffn_dim
    return ModelParams(
        text=init_text_branch(
            root.spawn("text"), vocab_size, cfg.max_seq_len, d, h, ff, cfg.text_layers, cfg.extra_text_layers
        ),
        image=init_image_branch(
            root.spawn("image"), cfg.image_size, cfg.patch_size, cfg.channels, d, h, ff, cfg.image_layers
        ),
        fusion=init_fusion(root.spawn("fusion"), d, cfg.num_classes, cfg.fusion),
    )


def forward(params: ModelParams, batch: Batch, cfg: RunConfig, rng: Rng | None = None, training: bool = False) -> Output:
    p = cfg.dropout
    h_text = encode_text(batch.ids, batch.mask, params.text, rng, training, p)
    h_image = encode_image(batch.images, params.image, cfg.patch_size, rng, training, p)
    if cfg.fusion == "late":
        return Output(fuse_late(h_text, h_image, params.fusion), None, None)
    z_text, z_image, h_joint = fuse_early(h_text, h_image, params.fusion)
    return Output(classify(h_joint, params.fusion, rng, training, p), z_text, z_image)


def loss(out: Output, batch: Batch, cfg: RunConfig) -> tuple[Tensor, Tensor, Tensor]:
    lam = 0.0 if cfg.fusion == "late" else cfg.lam
    return joint_loss(out.logits, batch.labels, out.z_text, out.z_image, ContrastiveConfig(cfg.tau, lam))
