"""Poisson-disk surface sampling: dart throwing followed by sample elimination."""

from __future__ import annotations

import heapq
import math

import numpy as np
from scipy.spatial import cKDTree

# Minimum-distance ratio kept by dart throwing, relative to the target spacing.
ELIMINATION_RATIO = 0.75
# Surface area per sample in units of spacing**2; puts the mean
# nearest-neighbour distance after elimination close to the spacing.
AREA_PER_SAMPLE = 1.3
# uniform candidates drawn per expected sample before dart throwing
CANDIDATE_FACTOR = 16


class SamplingError(ValueError):
    """The requested sampling cannot be produced."""


def area_per_sample(spacing: float) -> float:
    return AREA_PER_SAMPLE * spacing * spacing


def dart_throw(candidates: np.ndarray, radius: float) -> np.ndarray:
    """Greedily accept candidates (in the given order) at least ``radius`` apart.

    Returns indices of accepted candidates, in acceptance order.
    """
    if radius <= 0:
        raise SamplingError("dart radius must be positive")
    cell = radius
    grid: dict[tuple[int, int, int], list[int]] = {}
    keys = np.floor(candidates / cell).astype(np.int64)
    r2 = radius * radius
    accepted: list[int] = []
    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]
    for i in range(len(candidates)):
        kx, ky, kz = (int(v) for v in keys[i])
        p = candidates[i]
        ok = True
        for dx, dy, dz in offsets:
            bucket = grid.get((kx + dx, ky + dy, kz + dz))
            if not bucket:
                continue
            for j in bucket:
                d = candidates[j] - p
                if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] < r2:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            grid.setdefault((kx, ky, kz), []).append(i)
            accepted.append(i)
    return np.asarray(accepted, dtype=np.intp)


def eliminate(points: np.ndarray, target: int) -> np.ndarray:
    """Remove points until ``target`` remain, always dropping from the closest pair.

    Of the closest pair, the point whose second-nearest neighbour is closer is
    removed (lower index on ties). Removal never decreases the minimum pairwise
    distance. Returns the sorted indices of survivors.
    """
    n = len(points)
    if target >= n:
        return np.arange(n)
    if target < 1:
        raise SamplingError("elimination target must be at least 1")
    tree = cKDTree(points)
    alive = np.ones(n, dtype=bool)
    k_query = min(n, 16)

    def nearest(i: int) -> tuple[float, int]:
        k = k_query
        while True:
            d, j = tree.query(points[i], k=k)
            d, j = np.atleast_1d(d), np.atleast_1d(j)
            for dist, idx in zip(d, j):
                if idx != i and idx < n and alive[idx]:
                    return float(dist), int(idx)
            if k >= n:
                return math.inf, -1
            k = min(n, 2 * k)

    nn_dist = np.empty(n)
    nn_idx = np.empty(n, dtype=np.intp)
    watchers: list[set[int]] = [set() for _ in range(n)]
    heap: list[tuple[float, int]] = []
    for i in range(n):
        nn_dist[i], nn_idx[i] = nearest(i)
        watchers[nn_idx[i]].add(i)
        heapq.heappush(heap, (nn_dist[i], i))

    remaining = n
    while remaining > target:
        d, i = heapq.heappop(heap)
        if not alive[i] or d != nn_dist[i]:
            continue
        j = int(nn_idx[i])
        # drop whichever of the pair sits in the denser spot
        victim = i
        if alive[j]:
            second_i = _second_nearest(tree, points, alive, i, j, n)
            second_j = _second_nearest(tree, points, alive, j, i, n)
            if second_j < second_i or (second_j == second_i and j < i):
                victim = j
        alive[victim] = False
        remaining -= 1
        for w in watchers[victim]:
            if alive[w] and nn_idx[w] == victim:
                nn_dist[w], nn_idx[w] = nearest(w)
                if nn_idx[w] >= 0:
                    watchers[nn_idx[w]].add(w)
                heapq.heappush(heap, (nn_dist[w], w))
        watchers[victim].clear()
    return np.flatnonzero(alive)


def _second_nearest(tree, points, alive, i, exclude, n) -> float:
    k = min(n, 16)
    while True:
        d, j = tree.query(points[i], k=k)
        for dist, idx in zip(np.atleast_1d(d), np.atleast_1d(j)):
            if idx != i and idx != exclude and idx < n and alive[idx]:
                return float(dist)
        if k >= n:
            return math.inf
        k = min(n, 2 * k)


def poisson_select(candidates: np.ndarray, spacing: float, target: int | None) -> np.ndarray:
    """Indices of a Poisson-disk subset of ``candidates``.

    Candidates must already be in random order. Dart throwing keeps samples at
    least ``ELIMINATION_RATIO * spacing`` apart; elimination then thins the set
    to ``target`` samples when more were accepted.
    """
    darts = dart_throw(candidates, ELIMINATION_RATIO * spacing)
    if target is None or len(darts) <= target:
        return darts
    keep = eliminate(candidates[darts], target)
    return darts[keep]


def sample_triangles(tri: np.ndarray, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform random points on triangles (t x 3 x 3); returns points and face ids."""
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    cdf = np.cumsum(area)
    face = np.searchsorted(cdf, rng.random(count) * cdf[-1], side="right")
    face = np.minimum(face, len(tri) - 1)
    uv = rng.random((count, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    pts = tri[face, 0] + uv[:, :1] * e1[face] + uv[:, 1:] * e2[face]
    return pts, face
