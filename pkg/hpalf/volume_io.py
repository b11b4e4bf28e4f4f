"""HPVOL1 raw volume files and 8-bit PGM export."""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError
from .mrisim import SliceVolume, normalize_volume

logger = logging.getLogger("hpalf")

VOLUME_MAGIC = b"HPVOL1\0\0"
_VOLUME_HEADER = struct.Struct("<8s3I12x")


def write_volume(path: str | Path, voxels: np.ndarray) -> Path:
    """Store a (D, H, W) array as little-endian float32 behind a 32-byte header."""
    if voxels.ndim != 3:
        raise DimensionError(f"volume must be (D, H, W), got {voxels.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    depth, height, width = voxels.shape
    with path.open("wb") as handle:
        handle.write(_VOLUME_HEADER.pack(VOLUME_MAGIC, depth, height, width))
        handle.write(np.ascontiguousarray(voxels, dtype="<f4").tobytes())
    return path


def read_volume(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _VOLUME_HEADER.size:
        raise ContractError(f"{path} is too short for an HPVOL1 header")
    magic, depth, height, width = _VOLUME_HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise ContractError(f"{path} is not an HPVOL1 volume")
    expected = depth * height * width * 4
    body = raw[_VOLUME_HEADER.size :]
    if len(body) != expected:
        raise ContractError(f"{path}: expected {expected} voxel bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(depth, height, width).astype(np.float64)


def load_volume(path: str | Path, *, normalize: bool = True) -> SliceVolume:
    """Ingest a volume file; raw intensities are rescaled to [-1, 1] unless told otherwise."""
    voxels = read_volume(path)
    if normalize:
        return normalize_volume(voxels)
    return SliceVolume(voxels=voxels, intensity_range=(float(voxels.min()), float(voxels.max())))


def write_pgm(path: str | Path, image: np.ndarray, low: float | None = None, high: float | None = None) -> Path:
    """Write a binary P5 greyscale image, linearly mapping [low, high] to 0..255."""
    if image.ndim != 2:
        raise DimensionError(f"PGM export expects a 2D image, got {image.shape}")
    low = float(image.min()) if low is None else low
    high = float(image.max()) if high is None else high
    span = high - low if high > low else 1.0
    pixels = np.clip(np.round((image - low) / span * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        handle.write(pixels.tobytes())
    logger.debug("Wrote %s", path)
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    cursor = 0
    while len(fields) < 4:
        while raw[cursor : cursor + 1].isspace():
            cursor += 1
        if raw[cursor : cursor + 1] == b"#":
            cursor = raw.index(b"\n", cursor) + 1
            continue
        end = cursor
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[cursor:end])
        cursor = end
    if fields[0] != b"P5":
        raise ContractError(f"{path} is not a binary PGM")
    width, height = int(fields[1]), int(fields[2])
    cursor += 1
    return np.frombuffer(raw[cursor : cursor + width * height], dtype=np.uint8).reshape(height, width)
