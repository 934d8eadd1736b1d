"""Procedural surface patches with exact normals and sharp-crease labels."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .patch import PointPatch, normalize_patch, random_rotation
from .sampling import AREA_PER_SAMPLE, CANDIDATE_FACTOR, SamplingError, poisson_select

KINDS = ("plane", "wedge", "cylinder", "sphere-cap")
MIN_CREASE_SAMPLES = 8
MAX_ATTEMPTS = 16
# region area relative to the area the patch needs
REGION_MARGIN = 1.8


class GenerationError(SamplingError):
    """The shape specification cannot produce the requested patch."""


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    dihedral: float = math.pi / 2  # wedge: angle between the two faces, radians
    radius: float = 0.5  # cylinder radius or sphere radius
    cap_angle: float = math.pi / 2  # sphere-cap: polar half-angle
    spacing: float = 0.05
    n_points: int = 512

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "wedge" and not 0.0 < self.dihedral <= math.pi:
            raise ValueError(f"wedge dihedral must lie in (0, pi], got {self.dihedral}")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.n_points < 16:
            raise ValueError("n_points must be at least 16")
        if self.kind in ("cylinder", "sphere-cap") and self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.kind == "sphere-cap" and not 0.0 < self.cap_angle <= math.pi:
            raise ValueError("cap_angle must lie in (0, pi]")

    @property
    def patch_radius(self) -> float:
        """Radius of a flat disk holding ``n_points`` samples at this spacing."""
        area = self.n_points * AREA_PER_SAMPLE * self.spacing**2
        return math.sqrt(area / math.pi)

    def to_dict(self) -> dict:
        return asdict(self)


def _wedge_frame(dihedral: float):
    beta = 0.5 * (math.pi - dihedral)
    u_a = np.array([0.0, math.cos(beta), math.sin(beta)])
    u_b = np.array([0.0, -math.cos(beta), math.sin(beta)])
    n_a = np.array([0.0, -math.sin(beta), math.cos(beta)])
    n_b = np.array([0.0, math.sin(beta), math.cos(beta)])
    return u_a, u_b, n_a, n_b


def _candidates(spec: ShapeSpec, region: float, offset: float, rng: np.random.Generator):
    """Random surface samples in canonical pose.

    Returns (points, normals, crease_distance or None, center, region_area).
    """
    per_area = CANDIDATE_FACTOR / (AREA_PER_SAMPLE * spec.spacing**2)
    kind = spec.kind
    if kind == "plane":
        center = np.zeros(3)
        dom = (2 * region) ** 2
        m = int(per_area * dom)
        uv = rng.uniform(-region, region, size=(m, 2))
        pts = np.c_[uv, np.zeros(m)]
        nrm = np.tile([0.0, 0.0, 1.0], (m, 1))
        dist = None
    elif kind == "wedge":
        u_a, u_b, n_a, n_b = _wedge_frame(spec.dihedral)
        center = offset * u_a if offset >= 0 else -offset * u_b
        reach = region + abs(offset)
        dom = 2 * (2 * region) * reach
        m = int(per_area * dom)
        x = rng.uniform(-region, region, size=m)
        s = rng.uniform(0.0, reach, size=m)
        on_a = rng.random(m) < 0.5
        dirs = np.where(on_a[:, None], u_a, u_b)
        pts = x[:, None] * np.array([1.0, 0.0, 0.0]) + s[:, None] * dirs
        nrm = np.where(on_a[:, None], n_a, n_b)
        dist = s
    elif kind == "cylinder":
        rho = spec.radius
        center = np.array([rho, 0.0, 0.0])
        half = math.pi if region >= 2 * rho else 2 * math.asin(region / (2 * rho))
        dom = (2 * half * rho) * (2 * region)
        m = int(per_area * dom)
        th = rng.uniform(-half, half, size=m)
        z = rng.uniform(-region, region, size=m)
        nrm = np.c_[np.cos(th), np.sin(th), np.zeros(m)]
        pts = np.c_[rho * nrm[:, :2], z]
        dist = None
    else:  # sphere-cap
        rho = spec.radius
        center = np.array([0.0, 0.0, rho])
        lo = math.cos(spec.cap_angle)
        if region < 2 * rho:
            lo = max(lo, 1.0 - region * region / (2 * rho * rho))
        dom = 2 * math.pi * rho * rho * (1.0 - lo)
        m = int(per_area * dom)
        cz = rng.uniform(lo, 1.0, size=m)
        az = rng.uniform(0.0, 2 * math.pi, size=m)
        sz = np.sqrt(np.clip(1.0 - cz * cz, 0.0, None))
        nrm = np.c_[sz * np.cos(az), sz * np.sin(az), cz]
        pts = rho * nrm
        dist = None
    inside = np.linalg.norm(pts - center, axis=1) <= region
    area = dom * inside.mean() if m else 0.0
    sel = np.flatnonzero(inside)
    return pts[sel], nrm[sel], None if dist is None else dist[sel], center, area


def _sample_once(spec: ShapeSpec, rng: np.random.Generator):
    r0 = spec.patch_radius
    offset = 0.0
    if spec.kind == "wedge":
        offset = float(rng.uniform(-0.5, 0.5)) * r0
    region = r0 * math.sqrt(REGION_MARGIN)
    for _ in range(4):
        pts, nrm, dist, center, area = _candidates(spec, region, offset, rng)
        target = max(1, int(round(area / (AREA_PER_SAMPLE * spec.spacing**2))))
        keep = poisson_select(pts, spec.spacing, target)
        if len(keep) >= spec.n_points:
            break
        if spec.kind == "sphere-cap" and region >= 2 * spec.radius:
            break
        region *= 1.25
    if len(keep) < spec.n_points:
        raise GenerationError(
            f"cannot fit {spec.n_points} points at spacing {spec.spacing} on {spec.kind}"
        )
    d_center = np.linalg.norm(pts[keep] - center, axis=1)
    crop = keep[np.argsort(d_center, kind="stable")[: spec.n_points]]
    crop = np.sort(crop)
    return pts[crop], nrm[crop], None if dist is None else dist[crop]


def generate_patch(spec: ShapeSpec, seed: int) -> PointPatch:
    """Sample a normalized, labeled patch of ``spec.n_points`` points.

    Deterministic in ``(spec, seed)``. The surface is posed by a random
    rotation, normals are exact, and points within one spacing of a wedge
    crease are flagged sharp. Wedges are re-sampled until the crease carries
    at least ``MIN_CREASE_SAMPLES`` points.
    """
    has_crease = spec.kind == "wedge" and spec.dihedral < math.pi
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), attempt]))
        pts, nrm, dist = _sample_once(spec, rng)
        if has_crease:
            sharp = (dist <= spec.spacing).astype(np.uint8)
        else:
            sharp = np.zeros(len(pts), dtype=np.uint8)
        if has_crease and sharp.sum() < MIN_CREASE_SAMPLES:
            continue
        break
    else:
        raise GenerationError(
            f"wedge crease never received {MIN_CREASE_SAMPLES} samples in {MAX_ATTEMPTS} attempts"
        )

    rot = random_rotation(rng)
    pts = pts @ rot.T
    nrm = nrm @ rot.T
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    normalized, centroid, scale = normalize_patch(pts)
    meta = {
        "kind": spec.kind,
        "seed": int(seed),
        "attempt": attempt,
        "spec": spec.to_dict(),
        "centroid": centroid.tolist(),
        "scale": scale,
    }
    if spec.kind == "wedge":
        meta["crease_point"] = [0.0, 0.0, 0.0]
        meta["crease_direction"] = (rot @ np.array([1.0, 0.0, 0.0])).tolist()
    return PointPatch(normalized, nrm, sharp, meta)


def default_spec(kind: str, rng: np.random.Generator, n_points: int = 512, spacing: float = 0.05) -> ShapeSpec:
    """Draw shape parameters for the default training mix."""
    base = ShapeSpec("plane", spacing=spacing, n_points=n_points).patch_radius
    if kind == "wedge":
        return ShapeSpec(kind, dihedral=float(rng.uniform(math.pi / 6, 2.8)), spacing=spacing, n_points=n_points)
    if kind == "cylinder":
        return ShapeSpec(kind, radius=float(rng.uniform(0.3, 1.4)) * base, spacing=spacing, n_points=n_points)
    if kind == "sphere-cap":
        return ShapeSpec(
            kind,
            radius=float(rng.uniform(0.9, 2.0)) * base,
            cap_angle=float(rng.uniform(2.0, math.pi)),
            spacing=spacing,
            n_points=n_points,
        )
    return ShapeSpec(kind, spacing=spacing, n_points=n_points)


def crease_distance(patch: PointPatch) -> np.ndarray:
    """Distance of every point to the wedge crease line, in original shape units."""
    centroid = np.asarray(patch.meta["centroid"])
    scale = float(patch.meta["scale"])
    pts = patch.points.astype(np.float64) * scale + centroid
    p0 = np.asarray(patch.meta["crease_point"])
    d = np.asarray(patch.meta["crease_direction"])
    rel = pts - p0
    return np.linalg.norm(rel - np.outer(rel @ d, d), axis=1)
