"""Image branch: PGM IO, patchify, and a small ViT-style encoder.

Images are float arrays of shape ``(H, W, C)`` with values in ``[0, 1]``.
Before projection each pixel is standardised as ``(x - 0.5) / 0.5``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .nn import EncoderLayerParams, Linear, encoder_stack, init_encoder_layer, init_linear
from .rng import Rng
from .tensor import Tensor, add, broadcast_to, concat, constant, matmul, parameter, reshape, slice_row

PIXEL_MEAN = 0.5
PIXEL_STD = 0.5

_HEADER = re.compile(rb"\s*(?:#[^\n]*\n\s*)*")


def read_pgm(path: str | Path, patch_size: int | None = None) -> np.ndarray:
    """Read a binary (P5) PGM into an ``(H, W, 1)`` array scaled to ``[0, 1]``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: cannot read image ({e.strerror})") from e
    if raw[:2] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {raw[:2]!r})")
    pos = 2
    values = []
    for _ in range(3):
        pos = _HEADER.match(raw, pos).end()
        m = re.compile(rb"\d+").match(raw, pos)
        if m is None:
            raise DataError(f"{path}: malformed PGM header")
        values.append(int(m.group()))
        pos = m.end()
    width, height, maxval = values
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte before the raster
    body = raw[pos : pos + width * height]
    if len(body) != width * height:
        raise DataError(f"{path}: truncated raster ({len(body)} of {width * height} bytes)")
    img = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 1).astype(np.float64) / 255.0
    if patch_size is not None:
        check_divisible(height, width, patch_size, where=str(path))
    return img


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    """Write an ``(H, W)`` or ``(H, W, 1)`` uint8 array as P5."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 3:
        pixels = pixels[..., 0]
    if pixels.dtype != np.uint8:
        raise ValueError("write_pgm expects uint8 pixels")
    h, w = pixels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def check_divisible(height: int, width: int, patch: int, where: str = "image") -> None:
    if patch < 1 or height % patch or width % patch:
        raise ConfigError(f"{where}: H={height}, W={width} not divisible by patch size P={patch}")


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping ``patch x patch`` tiles in reading order.

    Accepts ``(H, W, C)`` or a batch ``(B, H, W, C)``; each output row is one
    tile flattened row-major over (row, col, channel).
    """
    img = np.asarray(img, dtype=np.float64)
    single = img.ndim == 3
    if single:
        img = img[None]
    b, h, w, c = img.shape
    check_divisible(h, w, patch)
    tiles = img.reshape(b, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    tiles = tiles.reshape(b, (h // patch) * (w // patch), patch * patch * c)
    return tiles[0] if single else tiles


@dataclass
class ImageBranchParams:
    patch_proj: Linear
    cls_token: Tensor
    position_embedding: Tensor
    layers: list[EncoderLayerParams]


def init_image_branch(
    rng: Rng, image_size: tuple[int, int], patch: int, channels: int, d: int, n_heads: int, d_ff: int, n_layers: int
) -> ImageBranchParams:
    h, w = image_size
    check_divisible(h, w, patch)
    if n_layers < 1:
        raise ContractError("image branch needs at least one encoder layer")
    n_patches = (h // patch) * (w // patch)
    return ImageBranchParams(
        patch_proj=init_linear(rng.spawn("patch_proj"), patch * patch * channels, d),
        cls_token=parameter(rng.spawn("cls_token").normal(d, 0.02)),
        position_embedding=parameter(rng.spawn("position_embedding").normal((n_patches + 1, d), 0.02)),
        layers=[init_encoder_layer(rng.spawn(f"layers.{i}"), d, n_heads, d_ff) for i in range(n_layers)],
    )


def embed_image(images: np.ndarray, params: ImageBranchParams, patch: int) -> Tensor:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ContractError(f"expected images (B, H, W, C), got {images.shape}")
    if not np.isfinite(images).all() or images.min() < 0.0 or images.max() > 1.0:
        raise ContractError("pixel values must be finite and in [0, 1]")
    tiles = patchify((images - PIXEL_MEAN) / PIXEL_STD, patch)
    b, p, _ = tiles.shape
    if p + 1 != params.position_embedding.shape[0]:
        raise ContractError(f"{p} patches but positional table has {params.position_embedding.shape[0]} rows")
    tokens = params.patch_proj(constant(tiles))
    cls = broadcast_to(reshape(params.cls_token, (1, 1, -1)), (b, 1, tokens.shape[2]))
    return add(concat([cls, tokens], axis=1), params.position_embedding)


def encode_image(
    images: np.ndarray,
    params: ImageBranchParams,
    patch: int,
    rng: Rng | None = None,
    training: bool = False,
    p_drop: float = 0.0,
) -> Tensor:
    """Batched image encoder returning the [CLS] rows, shape ``(B, d)``.  No
    padding exists here, so attention runs unmasked over all ``p + 1`` tokens."""
    hidden = encoder_stack(embed_image(images, params, patch), params.layers, None, rng, training, p_drop)
    return slice_row(hidden, 0, axis=1)
