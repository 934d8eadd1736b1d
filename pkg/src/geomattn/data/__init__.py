"""Patch generation, labeling, normalization and serialization."""

from .dataset import MANIFEST, generate_dataset, patch_name
from .mesh import TriMesh, detect_sharp_edges, load_obj, poisson_sample_mesh, transfer_labels
from .patch import (
    FormatError,
    PointPatch,
    UnsupportedVersionError,
    augment_rotate,
    normalize_patch,
    random_rotation,
    read_patch,
    rotate_patch,
    split_dataset,
    write_patch,
)
from .sampling import SamplingError
from .shapes import KINDS, GenerationError, ShapeSpec, crease_distance, default_spec, generate_patch

__all__ = [
    "FormatError",
    "GenerationError",
    "MANIFEST",
    "KINDS",
    "PointPatch",
    "SamplingError",
    "ShapeSpec",
    "TriMesh",
    "UnsupportedVersionError",
    "augment_rotate",
    "crease_distance",
    "default_spec",
    "detect_sharp_edges",
    "generate_dataset",
    "generate_patch",
    "load_obj",
    "normalize_patch",
    "patch_name",
    "poisson_sample_mesh",
    "random_rotation",
    "read_patch",
    "rotate_patch",
    "split_dataset",
    "transfer_labels",
    "write_patch",
]
