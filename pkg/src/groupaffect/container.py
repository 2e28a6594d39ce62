"""Binary feature-file container.

Layout (all little-endian)::

    magic      4 bytes  b"GAFE"
    version    u32
    modality   u8       0 face, 1 body, 2 scene
    n_images   u32
    region_dim u32
    counts     n_images x u32
    data       sum(counts) x region_dim float32, image by image
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import DescriptorSet, Modality

MAGIC = b"GAFE"
VERSION = 1
_HEADER = struct.Struct("<4sIBII")


class ContainerError(ValueError):
    pass


def write_features(path: str | Path, modality: Modality | str, region_dim: int, sets: Sequence[DescriptorSet]) -> None:
    modality = Modality(modality)
    counts = np.array([len(s) for s in sets], dtype="<u4")
    for s in sets:
        if len(s) and s.dim != region_dim:
            raise ContainerError(f"region dimension {s.dim} != declared {region_dim}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, modality.code, len(sets), region_dim))
        fh.write(counts.tobytes())
        for s in sets:
            if len(s):
                fh.write(np.ascontiguousarray(s.regions, dtype="<f4").tobytes())


def read_header(path: str | Path) -> tuple[Modality, int, int]:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    return _unpack_header(raw)[:3]


def _unpack_header(raw: bytes):
    if len(raw) < _HEADER.size:
        raise ContainerError("truncated header")
    magic, version, mod, n_images, dim = _HEADER.unpack(raw[: _HEADER.size])
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    return Modality.from_code(mod), n_images, dim, version


def read_features(path: str | Path) -> tuple[Modality, int, list[DescriptorSet]]:
    """Return ``(modality, region_dim, descriptor sets)``."""
    raw = Path(path).read_bytes()
    modality, n_images, dim, _ = _unpack_header(raw)
    off = _HEADER.size
    counts = np.frombuffer(raw, dtype="<u4", count=n_images, offset=off).astype(np.int64)
    off += 4 * n_images
    expected = off + int(counts.sum()) * dim * 4
    if len(raw) != expected:
        raise ContainerError(f"file size {len(raw)} does not match header ({expected})")
    sets = []
    for c in counts:
        block = np.frombuffer(raw, dtype="<f4", count=int(c) * dim, offset=off).reshape(int(c), dim)
        off += int(c) * dim * 4
        sets.append(DescriptorSet(modality, block.astype(np.float32), [int(c)] if c else []))
    return modality, dim, sets


def iter_counts(sets: Iterable[DescriptorSet]) -> list[int]:
    return [len(s) for s in sets]
