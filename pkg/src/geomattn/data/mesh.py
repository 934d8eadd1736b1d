"""Triangle meshes: OBJ loading, dihedral sharp-edge detection, surface sampling, label transfer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sampling import AREA_PER_SAMPLE, CANDIDATE_FACTOR, SamplingError, poisson_select, sample_triangles

DEFAULT_SHARP_THRESHOLD = math.radians(30.0)
# spacings beyond this multiple of the bounding-box diagonal are rejected
EXTENT_FACTOR = 10.0


class ObjParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class LabelTransferError(ValueError):
    """A point is too far from the mesh surface for its labels to be meaningful."""


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    sharp_edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.sharp_edges = np.asarray(self.sharp_edges, dtype=np.int64).reshape(-1, 2)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def face_normals(self) -> np.ndarray:
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @property
    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def edge_faces(self) -> dict[tuple[int, int], list[int]]:
        out: dict[tuple[int, int], list[int]] = {}
        for f, (a, b, c) in enumerate(self.faces.tolist()):
            for u, v in ((a, b), (b, c), (c, a)):
                out.setdefault((min(u, v), max(u, v)), []).append(f)
        return out


def detect_sharp_edges(mesh: TriMesh, threshold: float = DEFAULT_SHARP_THRESHOLD) -> np.ndarray:
    """Interior edges whose adjacent face normals differ by more than ``threshold`` radians."""
    normals = mesh.face_normals
    sharp = []
    for edge, fs in sorted(mesh.edge_faces().items()):
        if len(fs) != 2:
            continue
        c = float(np.clip(normals[fs[0]] @ normals[fs[1]], -1.0, 1.0))
        if math.acos(c) > threshold:
            sharp.append(edge)
    return np.asarray(sharp, dtype=np.int64).reshape(-1, 2)


def load_obj(path, sharp_threshold: float = DEFAULT_SHARP_THRESHOLD) -> TriMesh:
    """Read ``v``/``f`` records; polygons are fan-triangulated, zero-area faces dropped."""
    verts: list[list[float]] = []
    raw_faces: list[tuple[int, list[int]]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0] not in ("v", "f"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ObjParseError("vertex needs three coordinates", lineno)
                try:
                    verts.append([float(t) for t in parts[1:4]])
                except ValueError:
                    raise ObjParseError(f"bad vertex coordinate in {line.strip()!r}", lineno) from None
            else:
                if len(parts) < 4:
                    raise ObjParseError("face needs at least three vertices", lineno)
                idx = []
                for tok in parts[1:]:
                    try:
                        i = int(tok.split("/")[0])
                    except ValueError:
                        raise ObjParseError(f"bad face index {tok!r}", lineno) from None
                    idx.append(i)
                raw_faces.append((lineno, idx))

    n = len(verts)
    faces = []
    for lineno, idx in raw_faces:
        resolved = []
        for i in idx:
            j = i - 1 if i > 0 else n + i
            if i == 0 or not 0 <= j < n:
                raise ObjParseError(f"face index {i} out of range (have {n} vertices)", lineno)
            resolved.append(j)
        for t in range(1, len(resolved) - 1):
            faces.append((resolved[0], resolved[t], resolved[t + 1]))

    mesh = TriMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    if len(mesh.faces):
        mesh.faces = mesh.faces[mesh.face_areas > 1e-14]
    mesh.sharp_edges = detect_sharp_edges(mesh, sharp_threshold)
    return mesh


def poisson_sample_mesh(mesh: TriMesh, spacing: float, seed: int = 0) -> np.ndarray:
    """Poisson-disk samples over the mesh surface at roughly ``spacing`` apart."""
    if len(mesh.faces) == 0:
        raise SamplingError("cannot sample an empty mesh")
    if spacing <= 0:
        raise SamplingError("spacing must be positive")
    extent = float(np.linalg.norm(np.ptp(mesh.vertices[mesh.faces.reshape(-1)], axis=0)))
    if spacing > EXTENT_FACTOR * extent:
        raise SamplingError(f"spacing {spacing} exceeds the mesh extent {extent:.4g}")
    rng = np.random.default_rng(seed)
    area = float(mesh.face_areas.sum())
    expected = area / (AREA_PER_SAMPLE * spacing * spacing)
    count = max(64, int(CANDIDATE_FACTOR * expected))
    candidates, _ = sample_triangles(mesh.triangles, count, rng)
    target = max(1, int(round(expected)))
    keep = poisson_select(candidates, spacing, target)
    return candidates[np.sort(keep)]


def _closest_on_triangles(p: np.ndarray, tri: np.ndarray):
    """Closest points from one query to many triangles.

    Returns (distance, closest point, feature) per triangle where feature is
    0 for the face interior, 1..3 for edges (ab, bc, ca) and 4..6 for
    vertices (a, b, c).
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    m = len(tri)
    closest = np.empty((m, 3))
    feature = np.zeros(m, dtype=np.int64)
    done = np.zeros(m, dtype=bool)

    def assign(mask, pts, feat):
        mask = mask & ~done
        closest[mask] = pts[mask] if pts.ndim == 2 else pts
        feature[mask] = feat
        done[mask] = True

    assign((d1 <= 0) & (d2 <= 0), a, 4)
    assign((d3 >= 0) & (d4 <= d3), b, 5)
    assign((d6 >= 0) & (d5 <= d6), c, 6)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab, 1)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac, 3)
        w2 = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w2[:, None] * (c - b), 2)
        denom = 1.0 / (va + vb + vc)
        vv = vb * denom
        ww = vc * denom
        assign(np.ones(m, dtype=bool), a + ab * vv[:, None] + ac * ww[:, None], 0)
    dist = np.linalg.norm(closest - p, axis=1)
    return dist, closest, feature


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = (ab * ab).sum(axis=-1)
    t = np.clip(((p - a) * ab).sum(axis=-1) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    return np.linalg.norm(a + t[..., None] * ab - p, axis=-1)


def _vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Angle-weighted vertex normals."""
    tri = mesh.triangles
    fn = mesh.face_normals
    acc = np.zeros_like(mesh.vertices)
    for corner in range(3):
        u = tri[:, (corner + 1) % 3] - tri[:, corner]
        v = tri[:, (corner + 2) % 3] - tri[:, corner]
        cosang = (u * v).sum(1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(acc, mesh.faces[:, corner], fn * ang[:, None])
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return acc / np.where(norm > 0, norm, 1.0)


def transfer_labels(mesh: TriMesh, points: np.ndarray, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth normals and sharp flags for points lying on ``mesh``.

    The normal is the nearest face's normal, smoothed to the adjacent-face
    average on non-sharp edges and to the angle-weighted vertex normal at
    vertices not touching a sharp edge. A point is sharp iff it lies within
    ``spacing`` of a sharp edge segment.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles
    fn = mesh.face_normals
    vn = _vertex_normals(mesh)
    edge_faces = mesh.edge_faces()
    sharp_set = {(int(min(a, b)), int(max(a, b))) for a, b in mesh.sharp_edges}
    sharp_vertices = {v for e in sharp_set for v in e}

    normals = np.empty_like(pts)
    for i, p in enumerate(pts):
        dist, _, feat = _closest_on_triangles(p, tri)
        f = int(np.argmin(dist))
        if dist[f] > 10.0 * spacing:
            raise LabelTransferError(
                f"point {i} lies {dist[f]:.4g} from the surface (> 10 x spacing {spacing})"
            )
        kind = int(feat[f])
        n = fn[f]
        face = mesh.faces[f]
        if 1 <= kind <= 3:
            u, v = int(face[kind - 1]), int(face[kind % 3])
            key = (min(u, v), max(u, v))
            fs = edge_faces.get(key, [f])
            if key not in sharp_set and len(fs) == 2:
                avg = fn[fs[0]] + fn[fs[1]]
                if np.linalg.norm(avg) > 1e-12:
                    n = avg / np.linalg.norm(avg)
        elif kind >= 4:
            vtx = int(face[kind - 4])
            if vtx not in sharp_vertices:
                n = vn[vtx]
        normals[i] = n

    if len(mesh.sharp_edges):
        segs = mesh.vertices[mesh.sharp_edges]
        d = _point_segment_distance(pts[:, None, :], segs[None, :, 0], segs[None, :, 1])
        sharp = (d.min(axis=1) <= spacing).astype(np.uint8)
    else:
        sharp = np.zeros(len(pts), dtype=np.uint8)
    return normals, sharp
