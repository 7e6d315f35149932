"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"DTCN" | version | config_len | config text (utf-8)
    then per tensor: name_len | name | rank | extents... | float64 LE payload

Files are written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import CheckpointError, DTCNError
from .model import ModelParams, init_model

MAGIC = b"DTCN"
VERSION = 1


def encode(cfg: RunConfig, params: ModelParams) -> bytes:
    text = cfg.dumps().encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text]
    for name, t in params.named():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def save(path: str | Path, cfg: RunConfig, params: ModelParams) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode(cfg, params))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def decode(blob: bytes, where: str = "checkpoint") -> tuple[RunConfig, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{where}: bad magic {blob[:4]!r}")
    try:
        version, n = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"{where}: unsupported format version {version}")
        pos = 12
        cfg = RunConfig.loads(blob[pos : pos + n].decode("utf-8"))
        pos += n
        tensors: dict[str, np.ndarray] = {}
        while pos < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"{where}: truncated payload for {name}")
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"{where}: corrupt checkpoint ({e})") from e
    except CheckpointError:
        raise
    except DTCNError as e:
        raise CheckpointError(f"{where}: embedded config invalid ({e})") from e
    return cfg, tensors


def load(path: str | Path, vocab_size: int | None = None) -> tuple[RunConfig, ModelParams]:
    """Rebuild a model from disk.  ``vocab_size`` defaults to the stored table."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror}") from e
    cfg, tensors = decode(blob, str(path))
    if vocab_size is None:
        key = "text.token_embedding"
        if key not in tensors:
            raise CheckpointError(f"{path}: missing {key}")
        vocab_size = tensors[key].shape[0]
    params = init_model(cfg, vocab_size)
    named = dict(params.named())
    if set(named) != set(tensors):
        missing = sorted(set(named) - set(tensors))
        extra = sorted(set(tensors) - set(named))
        raise CheckpointError(f"{path}: parameter mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, t in named.items():
        if t.shape != tensors[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, config implies {t.shape}")
        t.data = tensors[name]
    return cfg, params
