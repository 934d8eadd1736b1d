"""Point patches: normalization, rotation augmentation, splitting and the GAPC file format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

MAGIC = b"GAPC"
VERSION = 1
FLAG_NORMALS = 1
FLAG_SHARP = 2


class FormatError(ValueError):
    """A patch or checkpoint file is malformed; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


@dataclass(eq=False)
class PointPatch:
    """A fixed-size point set with per-point labels.

    Arrays are stored in single precision (``sharp`` as uint8) so that a
    patch survives a file round trip bit-exactly.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    sharp: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float32).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals and points differ in length")
        if self.sharp is not None:
            sharp = np.asarray(self.sharp)
            if sharp.size and not np.isin(sharp, (0, 1)).all():
                raise ValueError("sharp flags must be 0 or 1")
            self.sharp = np.ascontiguousarray(sharp, dtype=np.uint8).reshape(-1)
            if len(self.sharp) != len(self.points):
                raise ValueError("sharp flags and points differ in length")

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointPatch):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            same(self.points, other.points)
            and same(self.normals, other.normals)
            and same(self.sharp, other.sharp)
            and self.meta == other.meta
        )


def normalize_patch(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Center on the centroid and scale so the farthest point has norm 1.

    Returns ``(points', centroid, scale)``; coincident inputs use scale 1.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("normalize_patch needs at least one point")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    radius = float(np.sqrt((centered * centered).sum(axis=1)).max())
    scale = radius if radius > 0 else 1.0
    return centered / scale, centroid, scale


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrix from a random unit quaternion."""
    u1, u2, u3 = rng.random(3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    w = a * np.sin(2 * np.pi * u2)
    x = a * np.cos(2 * np.pi * u2)
    y = b * np.sin(2 * np.pi * u3)
    z = b * np.cos(2 * np.pi * u3)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotate_patch(patch: PointPatch, rotation: np.ndarray) -> PointPatch:
    r = np.asarray(rotation, dtype=np.float64)
    pts = patch.points.astype(np.float64) @ r.T
    nrm = None if patch.normals is None else patch.normals.astype(np.float64) @ r.T
    return PointPatch(pts, nrm, None if patch.sharp is None else patch.sharp.copy(), dict(patch.meta))


def augment_rotate(patch: PointPatch, seed: int | None) -> PointPatch:
    """Rotate points and normals by one random rotation drawn from ``seed``.

    ``seed=None`` applies the identity and returns an equal copy.
    """
    if seed is None:
        return PointPatch(patch.points.copy(), None if patch.normals is None else patch.normals.copy(),
                          None if patch.sharp is None else patch.sharp.copy(), dict(patch.meta))
    return rotate_patch(patch, random_rotation(np.random.default_rng(seed)))


def split_dataset(patch_ids: Sequence, seed: int) -> tuple[list, list, list]:
    """Shuffle and split 4:1:1 into train/val/test; the remainder goes to train."""
    ids = list(patch_ids)
    if len(ids) < 6:
        raise ValueError(f"need at least 6 patches to split 4:1:1, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_small = len(ids) // 6
    val = shuffled[:n_small]
    test = shuffled[n_small : 2 * n_small]
    train = shuffled[2 * n_small :]
    return train, val, test


# ---------------------------------------------------------------------------
# GAPC binary format


def patch_to_bytes(patch: PointPatch) -> bytes:
    flags = (FLAG_NORMALS if patch.normals is not None else 0) | (
        FLAG_SHARP if patch.sharp is not None else 0
    )
    parts = [MAGIC, struct.pack("<III", VERSION, len(patch), flags)]
    parts.append(patch.points.astype("<f4").tobytes())
    if patch.normals is not None:
        parts.append(patch.normals.astype("<f4").tobytes())
    if patch.sharp is not None:
        parts.append(patch.sharp.astype(np.uint8).tobytes())
    meta = json.dumps(patch.meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def patch_from_bytes(buf: bytes) -> PointPatch:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a GAPC patch file", 0)
    version = r.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported GAPC version {version}", 4)
    n = r.u32("point count")
    flags = r.u32("flags")
    if flags & ~(FLAG_NORMALS | FLAG_SHARP):
        raise FormatError(f"unknown flag bits {flags:#x}", 12)
    points = np.frombuffer(r.take(12 * n, "points"), dtype="<f4").reshape(n, 3)
    normals = sharp = None
    if flags & FLAG_NORMALS:
        normals = np.frombuffer(r.take(12 * n, "normals"), dtype="<f4").reshape(n, 3)
    if flags & FLAG_SHARP:
        at = r.pos
        sharp = np.frombuffer(r.take(n, "sharp flags"), dtype=np.uint8)
        if sharp.size and sharp.max() > 1:
            raise FormatError("sharp flag outside {0,1}", at + int(np.argmax(sharp > 1)))
    meta_len = r.u32("metadata length")
    at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid UTF-8 JSON: {exc}", at) from None
    if r.pos != len(buf):
        raise FormatError("trailing bytes after metadata", r.pos)
    return PointPatch(points.astype(np.float32), None if normals is None else normals.astype(np.float32),
                      None if sharp is None else sharp.copy(), meta)


def write_patch(path, patch: PointPatch) -> None:
    Path(path).write_bytes(patch_to_bytes(patch))


def read_patch(path) -> PointPatch:
    return patch_from_bytes(Path(path).read_bytes())
