"""Binary on-disk format for attention feature arrays.

Each file is a 16-byte header followed by raw little-endian float32 data:

    bytes 0..3   magic  b"AMKB"
    bytes 4..7   rank   uint32 LE (1 or 2)
    bytes 8..11  dim0   uint32 LE
    bytes 12..15 dim1   uint32 LE (1 when rank is 1)

Feature blocks are stored rank-2 as [heads * tokens, head_dim]; the token
layout needed to fold them back lives in the owning directory's manifest.
Writes go through a temp file and rename so readers never see partial data.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .attention import FeatureBlock, TokenLayout

MAGIC = b"AMKB"
_HEADER = struct.Struct("<4sIII")


def write_array(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim == 1:
        dims = (arr.shape[0], 1)
    elif arr.ndim == 2:
        dims = (arr.shape[0], arr.shape[1])
    else:
        raise ValueError(f"only rank 1 or 2 arrays are stored, got rank {arr.ndim}")
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, arr.ndim, dims[0], dims[1]))
        fh.write(arr.tobytes(order="C"))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, rank, dim0, dim1 = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if rank not in (1, 2):
            raise ValueError(f"{path}: unsupported rank {rank}")
        count = dim0 * dim1
        payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return arr.reshape(dim0) if rank == 1 else arr.reshape(dim0, dim1)


def write_block(path, block: FeatureBlock) -> None:
    layout = block.layout
    flat = block.values.reshape(layout.heads * layout.total_tokens, layout.head_dim)
    write_array(path, flat)


def read_block(path, layout: TokenLayout) -> FeatureBlock:
    flat = read_array(path)
    expected = (layout.heads * layout.total_tokens, layout.head_dim)
    if flat.shape != expected:
        raise ValueError(f"{path}: stored shape {flat.shape} does not match layout {expected}")
    values = flat.reshape(layout.heads, layout.total_tokens, layout.head_dim)
    return FeatureBlock(values, layout)


def layout_to_json(layout: TokenLayout) -> dict:
    return {
        "text_tokens": layout.text_tokens,
        "image_tokens": layout.image_tokens,
        "heads": layout.heads,
        "head_dim": layout.head_dim,
    }


def layout_from_json(data: dict) -> TokenLayout:
    return TokenLayout(
        text_tokens=int(data["text_tokens"]),
        image_tokens=int(data["image_tokens"]),
        heads=int(data["heads"]),
        head_dim=int(data["head_dim"]),
    )
