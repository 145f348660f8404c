"""Config-driven benchmark harness.

Runs method x sample-size x seed experiment matrices over semi-synthetic
datasets, scores inferred substrates against the ground truth, and
persists results as CSV. Also packages two fixed protocols: the
four-condition lesion/substrate complexity grid, and the single-voxel
spatial-bias scan.

Seeding: every cell derives its streams from (master_seed, n, seed)
alone, so any row can be reproduced out of matrix order. The data
stream ignores the method, so all methods in a cell see identical data.
"""

from __future__ import annotations

import io
import json
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import massuni
from .dlm import (BERNOULLI, DETERMINISTIC, GAUSSIAN, LABELS_ONLY, DlmConfig,
                  calibrate_threshold, train)
from .grids import BINARY, VolumeGrid
from .metrics import centroid, evaluate_masks
from .simulate import (Blob, Dataset, DeficitSpec, InfeasibleRatioError,
                       LesionSpec, SubstrateSpec, generate_lesions,
                       realize_substrate, simulate_dataset, stack_lesions,
                       stratified_sample)

METHODS = ("vlsm_fisher", "vlsm_bm", "dlm", "dlm_labels_only", "dlm_deterministic")

RESULTS_HEADER = ("scenario", "method", "n", "seed", "dice", "hausdorff",
                  "asd", "displacement", "threshold", "excluded", "reason",
                  "wall_secs")


@dataclass
class ExperimentSpec:
    """One experiment family: a scenario crossed over methods, n and seeds.

    ``lesions`` / ``substrates`` / ``deficit`` hold keyword fields for
    LesionSpec (minus dims/seed/count), SubstrateSpec (minus dims) and
    DeficitSpec (minus seed). Two substrate entries switch on the
    heterogeneous protocol: labels come from one substrate per subject,
    scoring targets their union. ``dlm`` holds DlmConfig overrides.
    With ``stratify`` a lesion pool of ``pool_size`` is drawn per cell
    and subsampled to n at a controlled class ratio.
    """

    scenario: str
    dims: tuple
    lesions: dict
    substrates: list
    deficit: dict
    methods: tuple
    sample_sizes: tuple
    seeds: tuple
    master_seed: int = 0
    stratify: bool = False
    pool_size: int = None
    n_perm: int = 1000
    fwer_percentile: float = 95.0
    min_hits: int = massuni.DEFAULT_MIN_HITS
    dlm: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.methods = tuple(self.methods)
        self.sample_sizes = tuple(int(n) for n in self.sample_sizes)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.substrates = list(self.substrates)
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        if len(self.substrates) not in (1, 2):
            raise ValueError("one or two substrates")
        if not self.sample_sizes or not self.seeds or not self.methods:
            raise ValueError("methods, sample_sizes and seeds must be non-empty")
        kind = DeficitSpec(**self.deficit).label_kind
        if "vlsm_fisher" in self.methods and kind != BINARY:
            raise ValueError("vlsm_fisher needs a binary deficit")
        if "vlsm_bm" in self.methods and kind == BINARY:
            raise ValueError("vlsm_bm needs a real-valued deficit")
        if self.stratify:
            if kind != BINARY:
                raise ValueError("stratified sampling needs a binary deficit")
            if self.pool_size is None or self.pool_size < max(self.sample_sizes):
                raise ValueError("stratify requires pool_size >= max sample size")

    def to_dict(self) -> dict:
        # canonical JSON types (tuples degrade to lists anyway)
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class ResultRow:
    scenario: str
    method: str
    n: int
    seed: int
    dice: float = math.nan
    hausdorff: float = math.nan
    asd: float = math.nan
    displacement: float = math.nan
    threshold: float = math.nan
    excluded: bool = False
    reason: str = ""
    wall_secs: float = 0.0

    def fields(self) -> list:
        def num(v):
            return repr(float(v))
        return [self.scenario, self.method, str(self.n), str(self.seed),
                num(self.dice), num(self.hausdorff), num(self.asd),
                num(self.displacement), num(self.threshold),
                "true" if self.excluded else "false", self.reason,
                num(self.wall_secs)]


def results_csv_text(rows) -> str:
    import csv
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for r in rows:
        w.writerow(r.fields())
    return buf.getvalue()


def write_results_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(results_csv_text(rows))


def strip_wall_column(csv_text: str) -> str:
    """Drop the wall_secs column for determinism comparisons."""
    import csv
    rows = list(csv.reader(io.StringIO(csv_text)))
    idx = rows[0].index("wall_secs")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow(r[:idx] + r[idx + 1:])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# matrix execution


def _cell_state(master_seed: int, n: int, seed: int, slot: int, k: int = 1):
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(n, seed, slot))
    return [int(s) for s in ss.generate_state(k, np.uint64)]


def _build_cell_dataset(spec: ExperimentSpec, n: int, seed: int):
    lesion_seed, deficit_seed, strat_seed = _cell_state(
        spec.master_seed, n, seed, slot=0, k=3)
    count = spec.pool_size if spec.stratify else n
    lspec = LesionSpec(dims=spec.dims, count=count, seed=lesion_seed,
                       **spec.lesions)
    lesions = generate_lesions(lspec)
    grids = []
    for sub in spec.substrates:
        _, gt = realize_substrate(SubstrateSpec(dims=spec.dims, **sub))
        grids.append(gt)
    dspec = DeficitSpec(seed=deficit_seed, **spec.deficit)
    ds = simulate_dataset(lesions, grids if len(grids) > 1 else grids[0], dspec)
    if spec.stratify:
        ds = stratified_sample(ds, n, np.random.default_rng(strat_seed))
    if len(grids) == 1:
        gt_union = grids[0]
    else:
        union = (grids[0].data.astype(bool) | grids[1].data.astype(bool))
        gt_union = VolumeGrid.binary(union.astype(np.uint8))
    return ds, gt_union


def _dlm_config_for(spec: ExperimentSpec, ds: Dataset, method: str, seed: int) -> DlmConfig:
    overrides = dict(spec.dlm)
    overrides.setdefault("label_kind",
                         BERNOULLI if ds.label_kind == BINARY else GAUSSIAN)
    if method == "dlm_labels_only":
        overrides["elbo_terms"] = LABELS_ONLY
    elif method == "dlm_deterministic":
        overrides["latent_mode"] = DETERMINISTIC
    overrides["seed"] = seed
    return DlmConfig(dims=ds.dims, **overrides)


def _run_vlsm(spec: ExperimentSpec, ds: Dataset, method: str, rng) -> tuple:
    test = "fisher" if method == "vlsm_fisher" else "brunner_munzel"
    stack = ds.lesion_stack()
    stats = massuni.voxelwise_statistics(stack, ds.labels, test, spec.min_hits)
    thr = massuni.fwer_threshold_permutation(
        stack, ds.labels, test, n_perm=spec.n_perm,
        percentile=spec.fwer_percentile, rng=rng, min_hits=spec.min_hits)
    return (stats > thr).astype(np.uint8), thr


def _run_dlm(spec: ExperimentSpec, ds: Dataset, method: str, seed: int) -> tuple:
    cfg = _dlm_config_for(spec, ds, method, seed)
    trained = train(ds, cfg)
    cal = np.asarray(ds.splits["calib"])
    inferred = calibrate_threshold(trained,
                                   [ds.lesions[i] for i in cal],
                                   ds.labels[cal])
    return inferred.mask.data, inferred.threshold


def run_cell(spec: ExperimentSpec, method: str, n: int, seed: int) -> ResultRow:
    """One ResultRow, reproducible out of matrix order."""
    t0 = time.perf_counter()
    try:
        ds, gt = _build_cell_dataset(spec, n, seed)
    except InfeasibleRatioError as e:
        return ResultRow(scenario=spec.scenario, method=method, n=n, seed=seed,
                         excluded=True, reason=str(e),
                         wall_secs=time.perf_counter() - t0)
    method_seed = _cell_state(spec.master_seed, n, seed,
                              slot=1 + METHODS.index(method))[0]
    if method.startswith("vlsm"):
        mask, threshold = _run_vlsm(spec, ds, method,
                                    np.random.default_rng(method_seed))
    else:
        mask, threshold = _run_dlm(spec, ds, method, method_seed)
    report = evaluate_masks(mask, gt)
    return ResultRow(
        scenario=spec.scenario, method=method, n=n, seed=seed,
        dice=report.dice,
        hausdorff=report.hausdorff if report.hausdorff is not None else math.nan,
        asd=report.asd if report.asd is not None else math.nan,
        displacement=(report.displacement_magnitude
                      if report.displacement_magnitude is not None else math.nan),
        threshold=threshold,
        wall_secs=time.perf_counter() - t0,
    )


def run_experiment(spec: ExperimentSpec) -> list:
    """All rows of the matrix, in (n, seed, method) order."""
    rows = []
    for n in spec.sample_sizes:
        for seed in spec.seeds:
            for method in spec.methods:
                rows.append(run_cell(spec, method, n, seed))
    return rows


# ---------------------------------------------------------------------------
# four-condition complexity grid (42x42)

FIG_DIMS = (42, 42)
FIG_N_LESIONS = 400
FIG_DEFICIT_THRESHOLD = 0.10
FIG_ALPHA = 0.05


def complexity_substrate(mode: str) -> SubstrateSpec:
    """"simple": disjunction of three separated blobs; "complex": an
    asymmetric conjunction A&(B|C) carved out of one large blob."""
    if mode == "simple":
        # tight triangle: the union is compact, so its centroid is easy to hit
        blobs = (Blob("A", (15.0, 15.0), (3.0, 3.0)),
                 Blob("B", (15.0, 25.0), (3.0, 3.0)),
                 Blob("C", (25.0, 20.0), (3.0, 3.0)))
        return SubstrateSpec(dims=FIG_DIMS, blobs=blobs, formula="A|B|C")
    if mode == "complex":
        # small lens carved off-axis from a large parent blob: significance
        # smears over the parent and drags the centroid
        blobs = (Blob("A", (24.0, 24.0), (10.0, 10.0)),
                 Blob("B", (17.0, 16.0), (4.0, 4.0)),
                 Blob("C", (33.0, 33.0), (3.0, 3.0)))
        return SubstrateSpec(dims=FIG_DIMS, blobs=blobs, formula="A&(B|C)")
    raise ValueError(f"unknown substrate mode {mode!r}")


def complexity_lesions(mode: str, seed: int, count: int = FIG_N_LESIONS) -> LesionSpec:
    """"simple": isotropic random orientation; "complex": orientation
    structured by position (radially aligned)."""
    if mode not in ("simple", "complex"):
        raise ValueError(f"unknown lesion mode {mode!r}")
    return LesionSpec(
        dims=FIG_DIMS, count=count, radius_range=(4.0, 10.0),
        aspect_range=(0.1, 0.4),
        orientation="uniform" if mode == "simple" else "structured",
        seed=seed)


@dataclass
class ComplexityPanel:
    lesion_mode: str
    substrate_mode: str
    stat_map: massuni.StatMap
    ground_truth: VolumeGrid
    displacement: float
    n_significant: int


def run_fig1_replication(lesion_mode: str, substrate_mode: str,
                         seed: int = 0) -> ComplexityPanel:
    """One panel of the four-condition grid.

    400 lesions, binary deficit at 10% substrate coverage, voxel-wise
    Fisher tests, Bonferroni 0.05 over the 1764 voxels. Displacement is
    the distance from the ground-truth centroid to the significant-mask
    centroid (NaN when nothing survives).
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(17,))
    lesion_seed, deficit_seed = (int(s) for s in ss.generate_state(2, np.uint64))
    lesions = generate_lesions(complexity_lesions(lesion_mode, lesion_seed))
    _, gt = realize_substrate(complexity_substrate(substrate_mode))
    ds = simulate_dataset(
        lesions, gt,
        DeficitSpec(kind="binary", binary_threshold=FIG_DEFICIT_THRESHOLD,
                    seed=deficit_seed))
    stat = massuni.voxelwise_map(ds.lesion_stack(), ds.labels, "fisher")
    thr = massuni.neg_log_threshold(FIG_ALPHA, int(np.prod(FIG_DIMS)))
    smap = massuni.StatMap.from_statistic(stat, thr)
    mask = smap.significant.data.astype(bool)
    if mask.any():
        disp = float(np.linalg.norm(centroid(mask) - centroid(gt.data)))
    else:
        disp = math.nan
    return ComplexityPanel(
        lesion_mode=lesion_mode, substrate_mode=substrate_mode,
        stat_map=smap, ground_truth=gt, displacement=disp,
        n_significant=int(mask.sum()))


# ---------------------------------------------------------------------------
# single-voxel spatial-bias scan

MIN_TARGET_HITS = 4


@dataclass
class SpatialBiasRow:
    target: tuple
    method: str
    displacement: float
    mask_voxels: int
    wall_secs: float


def eligible_targets(lesions, stride: int = 1) -> list:
    """Voxels lesioned in >= 4 subjects (and spared in >= 4), on a stride."""
    stack = stack_lesions(lesions)
    hits = stack.sum(axis=0)
    n = stack.shape[0]
    ok = (hits >= MIN_TARGET_HITS) & (n - hits >= MIN_TARGET_HITS)
    targets = [tuple(int(i) for i in idx) for idx in np.argwhere(ok)]
    if stride > 1:
        targets = [t for t in targets if all(c % stride == 0 for c in t)]
    return targets


def run_spatial_bias(lesions, targets, methods=("vlsm_fisher", "dlm"),
                     master_seed: int = 0, n_perm: int = 500,
                     dlm_overrides: dict = None) -> list:
    """Single-voxel deficit scan: how far does each method's inferred
    cluster sit from the voxel that truly generated the labels?

    Labels are exactly the lesion status of the target voxel. The lesion
    set is fixed across targets; per-target randomness covers only the
    permutations, splits and model training. Returns one SpatialBiasRow
    per (target, method); displacement is NaN when nothing is inferred.
    """
    stack = stack_lesions(lesions)
    n = stack.shape[0]
    dims = stack.shape[1:]
    hits = stack.reshape(n, -1).sum(axis=0).reshape(dims)
    rows = []
    for t_idx, target in enumerate(targets):
        if hits[tuple(target)] < MIN_TARGET_HITS:
            raise ValueError(f"target {target} lesioned fewer than "
                             f"{MIN_TARGET_HITS} times")
        y = stack[(slice(None),) + tuple(target)].astype(np.float64)
        ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(t_idx,))
        perm_seed, split_seed, dlm_seed = (int(s) for s in ss.generate_state(3, np.uint64))
        for method in methods:
            t0 = time.perf_counter()
            if method == "vlsm_fisher":
                stats = massuni.voxelwise_statistics(stack, y, "fisher")
                thr = massuni.fwer_threshold_permutation(
                    stack, y, "fisher", n_perm=n_perm,
                    rng=np.random.default_rng(perm_seed))
                mask = stats > thr
            elif method == "dlm":
                from .simulate import make_splits
                ds = Dataset(lesions=list(lesions), labels=y, label_kind=BINARY,
                             source_tag=np.zeros(n, dtype=np.int64),
                             splits=make_splits(n, np.random.default_rng(split_seed)))
                overrides = dict(dlm_overrides or {})
                overrides["label_kind"] = BERNOULLI
                overrides["seed"] = dlm_seed
                cfg = DlmConfig(dims=dims, **overrides)
                trained = train(ds, cfg)
                cal = np.asarray(ds.splits["calib"])
                inferred = calibrate_threshold(
                    trained, [ds.lesions[i] for i in cal], ds.labels[cal])
                mask = inferred.mask.data.astype(bool)
            else:
                raise ValueError(f"unknown spatial-bias method {method!r}")
            if mask.any():
                disp = float(np.linalg.norm(
                    centroid(mask) - np.asarray(target, dtype=np.float64)))
            else:
                disp = math.nan
            rows.append(SpatialBiasRow(
                target=tuple(target), method=method, displacement=disp,
                mask_voxels=int(mask.sum()),
                wall_secs=time.perf_counter() - t0))
    return rows


def summarize_spatial_bias(rows) -> dict:
    """Per-method mean and sd of the finite displacements."""
    out = {}
    for method in sorted({r.method for r in rows}):
        vals = np.array([r.displacement for r in rows
                         if r.method == method and math.isfinite(r.displacement)])
        n_empty = sum(1 for r in rows
                      if r.method == method and not math.isfinite(r.displacement))
        out[method] = {
            "mean": float(vals.mean()) if len(vals) else math.nan,
            "sd": float(vals.std(ddof=1)) if len(vals) > 1 else math.nan,
            "n": int(len(vals)),
            "n_empty": n_empty,
        }
    return out
