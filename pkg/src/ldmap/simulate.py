"""Semi-synthetic lesion-deficit benchmark generator.

Builds the three ingredients of a benchmark scenario:

* lesion cohorts: random ellipses (2D) or ellipsoids (3D) voxelized
  onto the grid, with either uniform or spatially structured orientation;
* ground-truth substrates: thresholded Gaussian blobs combined by a
  small boolean formula grammar (names, ``&``, ``|``, parentheses);
* deficit labels: functions of the lesion-substrate overlap ratio, with
  optional label noise and optional two-substrate heterogeneity.

Everything is driven by explicit seeds so a dataset can be replayed
bit-for-bit from its specification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .grids import BINARY, REAL, VolumeGrid

MAX_RESAMPLE = 100


# ---------------------------------------------------------------------------
# lesions


@dataclass(frozen=True)
class LesionSpec:
    """Distribution of a lesion cohort on a fixed grid.

    ``radius_range`` bounds the semi-major axis (voxel units); the
    minor axes are ``aspect * major`` with aspect drawn uniformly from
    ``aspect_range``. ``orientation`` is "uniform" (isotropic random)
    or "structured" (deterministic function of the lesion center,
    by default pointing away from the grid midpoint).
    """

    dims: tuple
    count: int
    radius_range: tuple = (3.0, 8.0)
    aspect_range: tuple = (0.1, 0.4)
    orientation: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "radius_range", tuple(float(r) for r in self.radius_range))
        object.__setattr__(self, "aspect_range", tuple(float(a) for a in self.aspect_range))
        if len(self.dims) not in (2, 3):
            raise ValueError("lesion grids must have 2 or 3 axes")
        if self.count < 1:
            raise ValueError("count must be positive")
        lo, hi = self.radius_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad radius_range {self.radius_range}")
        alo, ahi = self.aspect_range
        if not (0 < alo <= ahi <= 1):
            raise ValueError(f"bad aspect_range {self.aspect_range}")
        if self.orientation not in ("uniform", "structured"):
            raise ValueError(f"unknown orientation mode {self.orientation!r}")


def _rotation_2d(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _rotation_3d_from_axis(u: np.ndarray) -> np.ndarray:
    """Orthonormal frame whose first column is the unit vector u."""
    u = u / np.linalg.norm(u)
    # complete a basis; pick the seed axis least aligned with u
    probe = np.eye(3)[np.argmin(np.abs(u))]
    v = probe - u * (u @ probe)
    v /= np.linalg.norm(v)
    w = np.cross(u, v)
    return np.stack([u, v, w], axis=1)


def _random_rotation(rng: np.random.Generator, ndim: int) -> np.ndarray:
    if ndim == 2:
        return _rotation_2d(rng.uniform(0.0, 2.0 * math.pi))
    # QR of a Gaussian matrix gives a Haar-distributed rotation
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _structured_rotation(center: np.ndarray, dims: tuple) -> np.ndarray:
    """Major axis points radially away from the grid midpoint."""
    mid = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    d = center - mid
    if not np.any(d):
        d = np.zeros(len(dims))
        d[0] = 1.0
    if len(dims) == 2:
        return _rotation_2d(math.atan2(d[1], d[0]))
    return _rotation_3d_from_axis(d)


def voxelize_ellipsoid(dims, center, axes, rotation) -> np.ndarray:
    """Binary mask of voxel centers inside the rotated ellipsoid.

    ``axes`` are the semi-axis lengths; ``rotation`` columns are the
    ellipsoid axes in grid coordinates. Parts outside the grid are
    clipped.
    """
    dims = tuple(dims)
    center = np.asarray(center, dtype=np.float64)
    axes = np.asarray(axes, dtype=np.float64)
    lo = np.maximum(np.floor(center - axes.max() - 1).astype(int), 0)
    hi = np.minimum(np.ceil(center + axes.max() + 1).astype(int) + 1, dims)
    mask = np.zeros(dims, dtype=bool)
    if np.any(lo >= hi):
        return mask
    grids_1d = [np.arange(l, h, dtype=np.float64) for l, h in zip(lo, hi)]
    coords = np.stack(np.meshgrid(*grids_1d, indexing="ij"), axis=-1)
    local = (coords - center) @ rotation  # project onto ellipsoid axes
    inside = ((local / axes) ** 2).sum(axis=-1) <= 1.0
    mask[tuple(slice(l, h) for l, h in zip(lo, hi))] = inside
    return mask


def generate_lesions(spec: LesionSpec) -> list:
    """Draw ``spec.count`` lesions; empty voxelizations are redrawn.

    Raises RuntimeError if a draw stays empty after repeated resampling
    (possible only with sub-voxel radii).
    """
    rng = np.random.default_rng(spec.seed)
    ndim = len(spec.dims)
    out = []
    for _ in range(spec.count):
        for _attempt in range(MAX_RESAMPLE):
            center = np.array([rng.uniform(0.0, d - 1.0) for d in spec.dims])
            major = rng.uniform(*spec.radius_range)
            aspect = rng.uniform(*spec.aspect_range)
            axes = np.full(ndim, aspect * major)
            axes[0] = major
            if spec.orientation == "uniform":
                rot = _random_rotation(rng, ndim)
            else:
                rot = _structured_rotation(center, spec.dims)
            mask = voxelize_ellipsoid(spec.dims, center, axes, rot)
            if mask.any():
                out.append(VolumeGrid.binary(mask.astype(np.uint8)))
                break
        else:
            raise RuntimeError(
                f"lesion stayed empty after {MAX_RESAMPLE} draws; radius_range "
                f"{spec.radius_range} is too small for the grid")
    return out


def stack_lesions(lesions) -> np.ndarray:
    """(n, *dims) uint8 array from a list of binary grids."""
    return np.stack([l.data for l in lesions]).astype(np.uint8)


# ---------------------------------------------------------------------------
# substrates


@dataclass(frozen=True)
class Blob:
    """One Gaussian bump: amplitude * exp(-0.5 * sum(((p-center)/scale)^2))."""

    name: str
    center: tuple
    scale: tuple
    amplitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "scale", tuple(float(s) for s in self.scale))
        if not self.name.isidentifier():
            raise ValueError(f"blob name {self.name!r} must be an identifier")
        if any(s <= 0 for s in self.scale):
            raise ValueError("blob scales must be positive")
        if self.amplitude <= 0:
            raise ValueError("blob amplitude must be positive")


@dataclass(frozen=True)
class SubstrateSpec:
    """Ground-truth substrate: thresholded blobs combined by a formula.

    The formula grammar is blob names, ``&``, ``|`` and parentheses,
    evaluated voxel-wise on the thresholded blob masks. ``&`` binds
    tighter than ``|``.
    """

    dims: tuple
    blobs: tuple
    formula: str
    threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "blobs", tuple(
            b if isinstance(b, Blob) else Blob(**b) for b in self.blobs))
        if len(self.dims) not in (2, 3):
            raise ValueError("substrate grids must have 2 or 3 axes")
        if not (0 < self.threshold < 1):
            raise ValueError("threshold must lie in (0, 1)")
        names = [b.name for b in self.blobs]
        if len(set(names)) != len(names):
            raise ValueError("duplicate blob names")


class FormulaError(ValueError):
    pass


def _tokenize_formula(formula: str) -> list:
    tokens = []
    i = 0
    while i < len(formula):
        ch = formula[i]
        if ch.isspace():
            i += 1
        elif ch in "&|()":
            tokens.append(ch)
            i += 1
        elif ch.isalpha() or ch == "_":
            j = i
            while j < len(formula) and (formula[j].isalnum() or formula[j] == "_"):
                j += 1
            tokens.append(formula[i:j])
            i = j
        else:
            raise FormulaError(f"unexpected character {ch!r} in formula")
    return tokens


def evaluate_formula(formula: str, masks: dict) -> np.ndarray:
    """Voxel-wise boolean combination of named masks.

    Recursive descent over: expr := term ('|' term)*;
    term := atom ('&' atom)*; atom := name | '(' expr ')'.
    """
    tokens = _tokenize_formula(formula)
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def take():
        nonlocal pos
        tok = peek()
        pos += 1
        return tok

    def atom():
        tok = take()
        if tok == "(":
            val = expr()
            if take() != ")":
                raise FormulaError("unbalanced parentheses")
            return val
        if tok is None or tok in "&|)":
            raise FormulaError(f"expected a name, got {tok!r}")
        if tok not in masks:
            raise FormulaError(f"unknown blob name {tok!r}")
        return masks[tok].astype(bool)

    def term():
        val = atom()
        while peek() == "&":
            take()
            val = val & atom()
        return val

    def expr():
        val = term()
        while peek() == "|":
            take()
            val = val | term()
        return val

    result = expr()
    if pos != len(tokens):
        raise FormulaError(f"trailing tokens after formula: {tokens[pos:]}")
    return result


def _blob_field(blob: Blob, dims: tuple) -> np.ndarray:
    grids_1d = [np.arange(d, dtype=np.float64) for d in dims]
    coords = np.stack(np.meshgrid(*grids_1d, indexing="ij"), axis=-1)
    z = (coords - np.asarray(blob.center)) / np.asarray(blob.scale)
    return blob.amplitude * np.exp(-0.5 * (z ** 2).sum(axis=-1))


def realize_substrate(spec: SubstrateSpec):
    """(blob masks by name, combined ground-truth grid).

    Raises ValueError if any blob thresholds to nothing, or if the
    formula yields an empty ground truth (usually disjoint blobs fed to
    a conjunction).
    """
    masks = {b.name: _blob_field(b, spec.dims) >= spec.threshold for b in spec.blobs}
    for name, mask in masks.items():
        if not mask.any():
            raise ValueError(f"blob {name!r} thresholds to an empty region")
    combined = evaluate_formula(spec.formula, masks)
    if not combined.any():
        raise ValueError(
            f"formula {spec.formula!r} selects no voxels; conjunctions need "
            "overlapping blobs")
    named = {k: VolumeGrid.binary(v.astype(np.uint8)) for k, v in masks.items()}
    return named, VolumeGrid.binary(combined.astype(np.uint8))


# ---------------------------------------------------------------------------
# deficits


def overlap_ratio(lesion, substrate) -> float:
    """Fraction of the substrate covered by the lesion."""
    x = lesion.data.astype(bool) if isinstance(lesion, VolumeGrid) else np.asarray(lesion, bool)
    m = substrate.data.astype(bool) if isinstance(substrate, VolumeGrid) else np.asarray(substrate, bool)
    total = int(m.sum())
    if total == 0:
        raise ValueError("substrate is empty")
    return int((x & m).sum()) / total


def deficit_linear(r: float) -> float:
    return float(r)

def deficit_binary(r: float, threshold: float = 0.01) -> float:
    return 1.0 if r > threshold else 0.0

def deficit_sigmoid(r: float) -> float:
    # steep logistic of the overlap ratio, half-deficit at r = 0.3
    return 1.0 / (1.0 + math.exp(20.0 * r - 6.0))


@dataclass(frozen=True)
class DeficitSpec:
    """Label model: deficit function, optional noise, optional binary cut.

    ``kind`` in {"linear", "binary", "sigmoid"}; ``noise`` in
    {"none", "flip", "convex"}. Flip noise applies to binary labels only
    (each label flipped with prob ``noise_level``); convex noise to real
    labels only (y <- (1-a) y + a u, u uniform on [0, 1]).
    """

    kind: str = "binary"
    binary_threshold: float = 0.01
    noise: str = "none"
    noise_level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "binary", "sigmoid"):
            raise ValueError(f"unknown deficit kind {self.kind!r}")
        if self.noise not in ("none", "flip", "convex"):
            raise ValueError(f"unknown noise kind {self.noise!r}")
        if not (0.0 <= self.noise_level <= 1.0):
            raise ValueError("noise_level must lie in [0, 1]")
        if self.noise == "flip" and self.kind != "binary":
            raise ValueError("flip noise applies to binary labels only")
        if self.noise == "convex" and self.kind == "binary":
            raise ValueError("convex noise applies to real labels only")

    @property
    def label_kind(self) -> str:
        return BINARY if self.kind == "binary" else REAL


def deficit_label(spec: DeficitSpec, r: float) -> float:
    if spec.kind == "linear":
        return deficit_linear(r)
    if spec.kind == "binary":
        return deficit_binary(r, spec.binary_threshold)
    return deficit_sigmoid(r)


def apply_noise(spec: DeficitSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64).copy()
    if spec.noise == "none" or spec.noise_level == 0.0:
        return labels
    if spec.noise == "flip":
        if not np.isin(labels, (0.0, 1.0)).all():
            raise ValueError("flip noise needs 0/1 labels")
        flips = rng.random(labels.shape) < spec.noise_level
        labels[flips] = 1.0 - labels[flips]
        return labels
    u = rng.random(labels.shape)
    return (1.0 - spec.noise_level) * labels + spec.noise_level * u


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Lesion cohort with labels, substrate tags and holdout splits.

    ``source_tag`` records which substrate generated each label in the
    heterogeneous case (all zeros otherwise); it is bookkeeping for
    scoring and is never an input to any model. ``splits`` maps
    "train"/"val"/"calib" to index arrays.
    """

    lesions: list
    labels: np.ndarray
    label_kind: str
    source_tag: np.ndarray
    splits: dict

    def __post_init__(self):
        n = len(self.lesions)
        if len(self.labels) != n or len(self.source_tag) != n:
            raise ValueError("labels / tags length mismatch")
        seen = np.concatenate([np.asarray(v) for v in self.splits.values()])
        if sorted(seen.tolist()) != list(range(n)):
            raise ValueError("splits must partition the dataset")

    @property
    def n(self) -> int:
        return len(self.lesions)

    @property
    def dims(self) -> tuple:
        return self.lesions[0].dims

    def lesion_stack(self) -> np.ndarray:
        return stack_lesions(self.lesions)

    def subset(self, indices, splits=None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.intp)
        if splits is None:
            splits = {"train": np.arange(len(indices))}
        return Dataset(
            lesions=[self.lesions[i] for i in indices],
            labels=self.labels[indices],
            label_kind=self.label_kind,
            source_tag=self.source_tag[indices],
            splits=splits,
        )


def make_splits(n: int, rng: np.random.Generator, holdout_frac: float = 0.10) -> dict:
    """Random train/val/calib split; ~holdout_frac held out, split evenly.

    An odd holdout count gives validation one more sample than
    calibration. n=100 at the default fraction gives 90/5/5.
    """
    if n < 3:
        raise ValueError("need at least 3 samples to split")
    k = int(round(holdout_frac * n))
    k = max(k, 2)
    n_val = (k + 1) // 2
    n_cal = k // 2
    perm = rng.permutation(n)
    return {
        "train": np.sort(perm[k:]),
        "val": np.sort(perm[:n_val]),
        "calib": np.sort(perm[n_val:k]),
    }


def simulate_dataset(lesions, substrates, deficit: DeficitSpec, split_rng=None) -> Dataset:
    """Labels for a lesion cohort from one substrate or a 50/50 pair.

    ``substrates`` is a single ground-truth grid or a sequence of two;
    with two, each sample is tagged to one substrate uniformly and its
    label computed from that substrate alone. Noise is applied after
    the deficit function. Splits come from the same seeded stream.
    """
    if isinstance(substrates, VolumeGrid):
        substrates = [substrates]
    substrates = list(substrates)
    if len(substrates) not in (1, 2):
        raise ValueError("one substrate, or two for the heterogeneous case")
    rng = np.random.default_rng(deficit.seed)
    n = len(lesions)
    if len(substrates) == 2:
        tags = rng.integers(0, 2, size=n)
    else:
        tags = np.zeros(n, dtype=np.int64)
    labels = np.array(
        [deficit_label(deficit, overlap_ratio(x, substrates[t])) for x, t in zip(lesions, tags)]
    )
    labels = apply_noise(deficit, labels, rng)
    if split_rng is None:
        split_rng = rng
    splits = make_splits(n, split_rng)
    return Dataset(
        lesions=list(lesions),
        labels=labels,
        label_kind=deficit.label_kind,
        source_tag=tags.astype(np.int64),
        splits=splits,
    )


# ---------------------------------------------------------------------------
# stratified sampling


class InfeasibleRatioError(ValueError):
    """No admissible class ratio fits the requested sample size."""


_FALLBACK_RATIOS = (0.4, 0.3, 0.2, 0.1)


def stratified_sample(dataset: Dataset, target_n: int, rng: np.random.Generator) -> Dataset:
    """Subsample binary-labeled data to ``target_n`` at a controlled ratio.

    Below 500 samples the classes are balanced 1:1. At or above 500 the
    positive/negative ratio relaxes through 40/60, 30/70, 20/80, 10/90,
    taking the first ratio both classes can supply. If none fits the
    draw is infeasible and the caller should record the cell as
    excluded.
    """
    if not np.isin(dataset.labels, (0.0, 1.0)).all():
        raise ValueError("stratified sampling needs binary labels")
    if target_n < 2:
        raise ValueError("target_n must be at least 2")
    pos = np.flatnonzero(dataset.labels == 1.0)
    neg = np.flatnonzero(dataset.labels == 0.0)
    if target_n < 500:
        n_pos = target_n // 2
        n_neg = target_n - n_pos
        if len(pos) < n_pos or len(neg) < n_neg:
            raise InfeasibleRatioError(
                f"cannot draw {n_pos}+{n_neg} from {len(pos)} positives / "
                f"{len(neg)} negatives")
    else:
        for ratio in _FALLBACK_RATIOS:
            n_pos = int(round(ratio * target_n))
            n_neg = target_n - n_pos
            if len(pos) >= n_pos and len(neg) >= n_neg:
                break
        else:
            raise InfeasibleRatioError(
                f"no admissible ratio for n={target_n} from {len(pos)} "
                f"positives / {len(neg)} negatives")
    chosen = np.concatenate([
        rng.permutation(pos)[:n_pos],
        rng.permutation(neg)[:n_neg],
    ])
    chosen = rng.permutation(chosen)
    splits = make_splits(len(chosen), rng)
    return dataset.subset(chosen, splits=splits)
