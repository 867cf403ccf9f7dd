"""Binary parameter and feature files.

``OQAP`` container (little-endian)::

    b"OQAP"  u32 version  u32 n_sections
    per section:  4-byte tag  u32 n_tensors
    per tensor:   u32 ndim  ndim x u32 dims  f32 data (row-major)

Known section tags are ``EXT1`` (extractor), ``RQA1`` and ``AQA1``; sections
are always written in that order.

``OQAF`` feature file::

    b"OQAF"  u32 N  u32 C  N x C f32 (row-major, one row per sample)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .dataio import atomic_write
from .errors import FormatError

OQAP_MAGIC = b"OQAP"
OQAF_MAGIC = b"OQAF"
VERSION = 1
SECTION_ORDER = ("EXT1", "RQA1", "AQA1")


def pack_container(sections: dict[str, list[np.ndarray]]) -> bytes:
    unknown = set(sections) - set(SECTION_ORDER)
    if unknown:
        raise FormatError(f"unknown section tags {sorted(unknown)}")
    tags = [t for t in SECTION_ORDER if t in sections]
    out = [OQAP_MAGIC, struct.pack("<II", VERSION, len(tags))]
    for tag in tags:
        tensors = sections[tag]
        out.append(tag.encode("ascii") + struct.pack("<I", len(tensors)))
        for t in tensors:
            t = np.asarray(t)
            out.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
            out.append(t.astype("<f4").tobytes())
    return b"".join(out)


def unpack_container(data: bytes) -> dict[str, list[np.ndarray]]:
    if data[:4] != OQAP_MAGIC:
        raise FormatError("not an OQAP container")
    try:
        version, n_sec = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise FormatError(f"unsupported OQAP version {version}")
        pos = 12
        sections = {}
        for _ in range(n_sec):
            tag = data[pos:pos + 4].decode("ascii")
            (n_t,) = struct.unpack_from("<I", data, pos + 4)
            pos += 8
            tensors = []
            for _ in range(n_t):
                (ndim,) = struct.unpack_from("<I", data, pos)
                shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
                pos += 4 + 4 * ndim
                count = int(np.prod(shape)) if ndim else 1
                if pos + 4 * count > len(data):
                    raise OSError("truncated OQAP tensor")
                arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
                tensors.append(arr.reshape(shape).astype(np.float64))
                pos += 4 * count
            sections[tag] = tensors
    except struct.error as exc:
        raise OSError(f"truncated OQAP container: {exc}") from exc
    return sections


def write_container(path, sections: dict[str, list[np.ndarray]]) -> None:
    atomic_write(path, pack_container(sections))


def read_container(path) -> dict[str, list[np.ndarray]]:
    return unpack_container(Path(path).read_bytes())


def update_container(path, tag: str, tensors: list[np.ndarray]) -> None:
    """Add or replace one section, keeping the others."""
    path = Path(path)
    sections = read_container(path) if path.exists() else {}
    sections[tag] = tensors
    write_container(path, sections)


def write_features(path, feats: np.ndarray) -> None:
    """``feats`` is C x N (one column per sample), stored as N rows."""
    rows = np.ascontiguousarray(np.asarray(feats).T, dtype="<f4")
    n, c = rows.shape
    atomic_write(path, OQAF_MAGIC + struct.pack("<II", n, c) + rows.tobytes())


def read_features(path) -> np.ndarray:
    """Back to C x N float64."""
    data = Path(path).read_bytes()
    if data[:4] != OQAF_MAGIC:
        raise FormatError(f"{path}: not an OQAF feature file")
    n, c = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * n * c:
        raise OSError(f"{path}: expected {n}x{c} floats")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(n, c).T.astype(np.float64)
