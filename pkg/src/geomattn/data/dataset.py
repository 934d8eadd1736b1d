"""Synthetic dataset directories: numbered GAPC files plus a split manifest."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .patch import split_dataset, write_patch
from .shapes import KINDS, default_spec, generate_patch

MANIFEST = "manifest.json"


def patch_name(index: int) -> str:
    return f"patch_{index:05d}.gapc"


def _make_one(job):
    index, kind, n_points, spacing, seed, out = job
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    spec = default_spec(kind, rng, n_points=n_points, spacing=spacing)
    patch_seed = int(rng.integers(2**31))
    patch = generate_patch(spec, patch_seed)
    patch.meta["index"] = index
    write_patch(Path(out) / patch_name(index), patch)
    return patch_name(index)


def generate_dataset(out_dir, shapes: Sequence[str], count: int, n_points: int = 512,
                     spacing: float = 0.05, seed: int = 0, workers: int = 1) -> dict:
    """Write ``count`` patches cycling through ``shapes`` and a 4:1:1 split manifest.

    Output is independent of ``workers``.
    """
    bad = [s for s in shapes if s not in KINDS]
    if bad or not shapes:
        raise ValueError(f"unknown shape kinds {bad}; choose from {KINDS}")
    if count < 6:
        raise ValueError("count must be at least 6 to fill a 4:1:1 split")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, shapes[i % len(shapes)], n_points, spacing, seed, str(out)) for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            names = list(pool.map(_make_one, jobs))
    else:
        names = [_make_one(job) for job in jobs]
    train, val, test = split_dataset(names, seed)
    manifest = {
        "shapes": list(shapes),
        "count": count,
        "points": n_points,
        "spacing": spacing,
        "seed": seed,
        "files": names,
        "splits": {"train": list(train), "val": list(val), "test": list(test)},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
