"""File formats: binary PGM images and masks, PFM float fields, and the DCNW checkpoint container."""

from __future__ import annotations

import os
import re
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"DCNW"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Raised for malformed or unsupported files."""


def _read_header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(buf, pos)
        if m is None:
            raise FormatError("truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def write_pgm(path, img: np.ndarray) -> None:
    """Write a [0, 1] float image (or {0, 1} mask) as 8-bit binary PGM."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got shape {img.shape}")
    raster = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raster.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM (maxval 255) into float32 values in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, start = _read_header_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: expected P5 magic, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, found {maxval}")
    data = buf[start:start + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: truncated raster ({len(data)} of {w * h} bytes)")
    return (np.frombuffer(data, dtype=np.uint8).reshape(h, w) / 255.0).astype(np.float32)


def read_mask_pgm(path) -> np.ndarray:
    return (read_pgm(path) >= 0.5).astype(np.uint8)


def _pf_block(plane: np.ndarray) -> bytes:
    h, w = plane.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    # PFM stores rows bottom-to-top
    return header + np.ascontiguousarray(plane[::-1], dtype="<f4").tobytes()


def write_pfm(path, field: np.ndarray) -> None:
    """Write a scalar (H, W) field as one Pf raster, or an (H, W, 2) field as two
    concatenated Pf rasters (x component first, then y)."""
    field = np.asarray(field, dtype=np.float32)
    if field.ndim == 2:
        planes = [field]
    elif field.ndim == 3 and field.shape[-1] == 2:
        planes = [field[..., 0], field[..., 1]]
    else:
        raise FormatError(f"PFM needs (H, W) or (H, W, 2), got {field.shape}")
    with open(path, "wb") as fh:
        for plane in planes:
            fh.write(_pf_block(plane))


def read_pfm(path) -> np.ndarray:
    """Read one or two concatenated Pf rasters; two planes come back as (H, W, 2)."""
    buf = Path(path).read_bytes()
    planes = []
    pos = 0
    while pos < len(buf):
        tokens, start = _read_header_tokens(buf[pos:], 4)
        if tokens[0] != b"Pf":
            raise FormatError(f"{path}: expected Pf magic, found {tokens[0]!r}")
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
        dtype = "<f4" if scale < 0 else ">f4"
        n = w * h * 4
        raw = buf[pos + start:pos + start + n]
        if len(raw) != n:
            raise FormatError(f"{path}: truncated Pf raster")
        planes.append(np.frombuffer(raw, dtype=dtype).reshape(h, w)[::-1].astype(np.float32))
        pos += start + n
    if len(planes) == 1:
        return planes[0]
    if len(planes) == 2:
        return np.stack(planes, axis=-1)
    raise FormatError(f"{path}: expected 1 or 2 planes, found {len(planes)}")


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors to the DCNW container (all integers little-endian)."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<HI", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 10
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + n > len(buf):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += n
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    return out
