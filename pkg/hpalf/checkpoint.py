"""Versioned HPCK1 checkpoint files.

Layout: a fixed header (magic, version, config length, manifest length), the
run configuration as UTF-8 ``key=value`` lines, a tab separated manifest with
one ``name, shape, dtype, offset, nbytes`` row per tensor, then the raw
little-endian tensor bytes.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractError, DimensionError
from .layers import Module

logger = logging.getLogger("hpalf")

MAGIC = b"HPCK1\0\0\0"
VERSION = 1
_HEADER = struct.Struct("<8s3I")


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    shape: tuple[int, ...]
    dtype: str
    offset: int
    nbytes: int


@dataclass
class Checkpoint:
    """Decoded checkpoint: flat config and named arrays."""

    config: dict[str, str]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    manifest: list[ManifestEntry] = field(default_factory=list)

    def state_for(self, prefix: str) -> dict[str, np.ndarray]:
        """Return the tensors stored under ``prefix.`` with the prefix removed."""
        head = prefix + "."
        return {name[len(head) :]: value for name, value in self.tensors.items() if name.startswith(head)}


def _encode_config(config: Mapping[str, object]) -> bytes:
    lines = []
    for key, value in config.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise ContractError(f"config entry {key!r} cannot be serialised as a key=value line")
        lines.append(f"{key}={text}")
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def _decode_config(raw: bytes) -> dict[str, str]:
    config: dict[str, str] = {}
    for line in raw.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        config[key] = value
    return config


def save_checkpoint(path: str | Path, modules: Mapping[str, Module], config: Mapping[str, object]) -> Path:
    """Write every parameter and buffer of ``modules`` under their mapping key."""
    blobs: list[bytes] = []
    manifest: list[ManifestEntry] = []
    offset = 0
    for prefix, module in modules.items():
        for name, values in module.state_dict().items():
            array = np.ascontiguousarray(values)
            little = array.astype(array.dtype.newbyteorder("<"), copy=False)
            data = little.tobytes()
            manifest.append(
                ManifestEntry(f"{prefix}.{name}", tuple(array.shape), array.dtype.name, offset, len(data))
            )
            blobs.append(data)
            offset += len(data)
    manifest_text = "".join(
        f"{e.name}\t{','.join(map(str, e.shape))}\t{e.dtype}\t{e.offset}\t{e.nbytes}\n" for e in manifest
    ).encode("utf-8")
    config_text = _encode_config(config)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(_HEADER.pack(MAGIC, VERSION, len(config_text), len(manifest_text)))
        handle.write(config_text)
        handle.write(manifest_text)
        for blob in blobs:
            handle.write(blob)
    logger.info("Wrote checkpoint %s (%s tensors, %s bytes)", path, len(manifest), offset)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ContractError(f"{path} is too short to be a checkpoint")
    magic, version, config_len, manifest_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ContractError(f"{path} is not an HPCK1 checkpoint")
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    cursor = _HEADER.size
    config = _decode_config(raw[cursor : cursor + config_len])
    cursor += config_len
    manifest_text = raw[cursor : cursor + manifest_len].decode("utf-8")
    cursor += manifest_len

    checkpoint = Checkpoint(config=config)
    for line in manifest_text.splitlines():
        name, shape_text, dtype, offset, nbytes = line.split("\t")
        shape = tuple(int(s) for s in shape_text.split(",") if s)
        entry = ManifestEntry(name, shape, dtype, int(offset), int(nbytes))
        start = cursor + entry.offset
        values = np.frombuffer(raw[start : start + entry.nbytes], dtype=np.dtype(dtype).newbyteorder("<"))
        checkpoint.tensors[name] = values.astype(np.dtype(dtype)).reshape(shape)
        checkpoint.manifest.append(entry)
    return checkpoint


def restore(module: Module, checkpoint: Checkpoint, prefix: str) -> None:
    """Load ``prefix.*`` tensors into ``module``; shapes must match exactly."""
    state = checkpoint.state_for(prefix)
    expected = module.state_dict()
    missing = sorted(set(expected) - set(state))
    if missing:
        raise ContractError(f"checkpoint lacks {prefix} tensors: {', '.join(missing[:5])}")
    for name, current in expected.items():
        if tuple(state[name].shape) != tuple(np.shape(current)):
            raise DimensionError(f"{prefix}.{name}: checkpoint shape {state[name].shape} != {np.shape(current)}")
    module.load_state_dict(state)
