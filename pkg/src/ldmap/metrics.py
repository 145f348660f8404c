"""Topological fidelity metrics between binary masks.

Used to score an inferred substrate map against the simulated ground
truth: Dice overlap, surface-based Hausdorff and average surface
distance, and centroid displacement from a target location.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .grids import VolumeGrid


def _as_mask(mask) -> np.ndarray:
    if isinstance(mask, VolumeGrid):
        mask = mask.data
    return np.asarray(mask).astype(bool)


def dice(a, b) -> float:
    """Overlap coefficient 2|a&b| / (|a|+|b|); two empty masks agree (1.0)."""
    a = _as_mask(a)
    b = _as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def surface_voxels(mask) -> np.ndarray:
    """Coordinates (k, ndim) of mask voxels with a face neighbor outside the mask.

    Voxels on the grid boundary count as surface: out-of-bounds is outside.
    """
    mask = _as_mask(mask)
    interior = np.ones_like(mask)
    for axis in range(mask.ndim):
        # missing neighbors (grid boundary) count as outside
        before = [slice(None)] * mask.ndim
        after = [slice(None)] * mask.ndim
        before[axis] = slice(1, None)
        after[axis] = slice(None, -1)
        lo = np.zeros_like(mask)
        hi = np.zeros_like(mask)
        lo[tuple(before)] = mask[tuple(after)]
        hi[tuple(after)] = mask[tuple(before)]
        interior &= lo & hi
    surface = mask & ~interior
    return np.argwhere(surface).astype(np.float64)


def surface_distances(a, b) -> tuple[float, float]:
    """(Hausdorff, average surface distance) between two non-empty masks.

    Surfaces use face connectivity; distances are Euclidean between voxel
    centers. Hausdorff is the max of the two directed maxima; ASD pools
    the nearest-surface distances from both directions into one mean.
    """
    a = _as_mask(a)
    b = _as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("surface distances require two non-empty masks")
    pa = surface_voxels(a)
    pb = surface_voxels(b)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    hausdorff = float(max(d_ab.max(), d_ba.max()))
    asd = float((d_ab.sum() + d_ba.sum()) / (len(d_ab) + len(d_ba)))
    return hausdorff, asd


def centroid(mask) -> np.ndarray:
    """Arithmetic mean of the voxel coordinates of a non-empty mask."""
    mask = _as_mask(mask)
    if not mask.any():
        raise ValueError("centroid of an empty mask is undefined")
    return np.argwhere(mask).mean(axis=0)


def centroid_displacement(predicted, target_voxel) -> np.ndarray:
    """Vector from ``target_voxel`` to the centroid of the predicted mask."""
    return centroid(predicted) - np.asarray(target_voxel, dtype=np.float64)


@dataclass
class EvalReport:
    """Fidelity of one inferred mask against a ground truth.

    Surface metrics and displacement are None when undefined (an empty
    mask on either side).
    """

    dice: float
    hausdorff: float | None
    asd: float | None
    displacement: tuple[float, ...] | None
    displacement_magnitude: float | None
    voxel_size: float = 1.0

    def to_dict(self) -> dict:
        return {
            "dice": self.dice,
            "hausdorff": self.hausdorff,
            "asd": self.asd,
            "displacement": list(self.displacement) if self.displacement is not None else None,
            "displacement_magnitude": self.displacement_magnitude,
            "voxel_size": self.voxel_size,
        }


def evaluate_masks(predicted, truth, target_voxel=None, voxel_size: float = 1.0) -> EvalReport:
    """Score ``predicted`` against ``truth``; distances scaled by ``voxel_size``.

    ``target_voxel`` defaults to the ground-truth centroid; displacement is
    measured from it to the predicted centroid.
    """
    predicted = _as_mask(predicted)
    truth = _as_mask(truth)
    d = dice(predicted, truth)
    if predicted.any() and truth.any():
        hausdorff, asd = surface_distances(predicted, truth)
        hausdorff *= voxel_size
        asd *= voxel_size
    else:
        hausdorff = asd = None
    if predicted.any():
        if target_voxel is None:
            target_voxel = centroid(truth) if truth.any() else np.zeros(predicted.ndim)
        vec = centroid_displacement(predicted, target_voxel) * voxel_size
        displacement = tuple(float(v) for v in vec)
        magnitude = float(np.linalg.norm(vec))
    else:
        displacement = None
        magnitude = None
    return EvalReport(
        dice=d,
        hausdorff=hausdorff,
        asd=asd,
        displacement=displacement,
        displacement_magnitude=magnitude,
        voxel_size=voxel_size,
    )
