"""Mass-univariate lesion-deficit mapping.

Voxel-wise association tests between lesion status and deficit labels:
Fisher's exact test (binary labels) and the Brunner-Munzel rank test
(real labels), with familywise error control by max-statistic
permutation of the labels, plus a Bonferroni reference threshold.

Statistic maps hold -log(p) for Fisher and |W| for Brunner-Munzel, so
"bigger is more significant" in both cases and thresholds compare with
a strict >.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .grids import REAL, VolumeGrid
from .simulate import stack_lesions

# Log-space slack when collecting tables at most as probable as the
# observed one. Distinct probabilities within a margin family differ by
# far more than this for any feasible total, while exact ties agree to
# float rounding, so the inclusion set is unambiguous.
_TIE_EPS = 1e-9

DEFAULT_MIN_HITS = 4


class DegenerateDataError(ValueError):
    """The test is undefined on this data (e.g. zero rank variance)."""


# ---------------------------------------------------------------------------
# Fisher's exact test


@dataclass(frozen=True)
class ContingencyTable:
    """2x2 counts: rows lesioned/spared at a voxel, columns deficit yes/no.

    a: lesioned with deficit, b: lesioned without,
    c: spared with deficit,  d: spared without.
    """

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        for v in (self.a, self.b, self.c, self.d):
            if int(v) != v or v < 0:
                raise ValueError("table entries must be non-negative integers")
        if self.total == 0:
            raise ValueError("empty table")

    @property
    def total(self) -> int:
        return self.a + self.b + self.c + self.d


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def fisher_exact_two_sided(table: ContingencyTable) -> float:
    """Two-sided Fisher p: total mass of tables no more probable than observed.

    Margins fixed, null hypergeometric; a table enters the sum when its
    probability is <= the observed one (probability-mass two-siding).
    """
    r1 = table.a + table.b
    c1 = table.a + table.c
    n = table.total
    lo = max(0, r1 + c1 - n)
    hi = min(r1, c1)
    log_denom = _log_comb(n, c1)

    def log_p(a: int) -> float:
        return _log_comb(r1, a) + _log_comb(n - r1, c1 - a) - log_denom

    log_obs = log_p(table.a)
    total = 0.0
    for a in range(lo, hi + 1):
        lp = log_p(a)
        if lp <= log_obs + _TIE_EPS:
            total += math.exp(lp)
    return min(total, 1.0)


def _fisher_neglogp_lut(n_total: int, n_deficit: int, n_lesioned: int) -> np.ndarray:
    """-log p over every feasible deficit-and-lesioned count a.

    Entry index a runs over 0..min(n_lesioned, n_deficit); infeasible
    low counts (when margins force overlap) hold NaN.
    """
    hi = min(n_lesioned, n_deficit)
    lo = max(0, n_lesioned + n_deficit - n_total)
    out = np.full(hi + 1, np.nan)
    for a in range(lo, hi + 1):
        p = fisher_exact_two_sided(
            ContingencyTable(a, n_lesioned - a, n_deficit - a,
                             n_total - n_lesioned - n_deficit + a))
        out[a] = -math.log(p)
    return out


# ---------------------------------------------------------------------------
# Brunner-Munzel


def _midranks(values: np.ndarray) -> np.ndarray:
    return sps.rankdata(values, method="average")


def brunner_munzel(group0, group1) -> tuple:
    """(W, two-sided p) for the hypothesis P(X0 < X1) + P(X0 = X1)/2 = 1/2.

    Midranks handle ties; the statistic is studentized with per-group
    rank variances and referred to a t distribution with Satterthwaite
    degrees of freedom. Raises DegenerateDataError when both rank
    variances vanish (all pooled ranks constant within groups).
    """
    x0 = np.asarray(group0, dtype=np.float64)
    x1 = np.asarray(group1, dtype=np.float64)
    n0, n1 = len(x0), len(x1)
    if n0 < 2 or n1 < 2:
        raise DegenerateDataError("each group needs at least 2 observations")
    pooled = _midranks(np.concatenate([x0, x1]))
    r0, r1 = pooled[:n0], pooled[n0:]
    w0 = _midranks(x0)
    w1 = _midranks(x1)
    # placements: pooled rank minus within-group rank
    v0 = np.var(r0 - w0, ddof=1)
    v1 = np.var(r1 - w1, ddof=1)
    pooled_var = n0 * v0 + n1 * v1
    if pooled_var <= 0.0:
        raise DegenerateDataError("zero rank variance in both groups")
    stat = n0 * n1 * (r1.mean() - r0.mean()) / ((n0 + n1) * math.sqrt(pooled_var))
    df = pooled_var ** 2 / ((n0 * v0) ** 2 / (n0 - 1) + (n1 * v1) ** 2 / (n1 - 1))
    p = 2.0 * sps.t.sf(abs(stat), df)
    return float(stat), float(min(p, 1.0))


def relative_effect(group0, group1) -> float:
    """Estimate of P(X0 < X1) + P(X0 = X1)/2 from midranks."""
    x0 = np.asarray(group0, dtype=np.float64)
    x1 = np.asarray(group1, dtype=np.float64)
    pooled = _midranks(np.concatenate([x0, x1]))
    return float((pooled[len(x0):].mean() - (len(x1) + 1) / 2.0) / len(x0))


# ---------------------------------------------------------------------------
# statistic maps


def _coerce_stack(lesions) -> np.ndarray:
    if isinstance(lesions, np.ndarray):
        return lesions.astype(np.uint8)
    return stack_lesions(lesions)


def _fisher_stat_vector(X: np.ndarray, y: np.ndarray, min_hits: int) -> np.ndarray:
    n, n_vox = X.shape
    y = y.astype(np.int64)
    n_deficit = int(y.sum())
    hits = X.sum(axis=0)
    a_counts = y @ X
    stats = np.zeros(n_vox)
    luts = {}
    for v in range(n_vox):
        L = int(hits[v])
        if L < min_hits or n - L < min_hits:
            continue
        if L not in luts:
            luts[L] = _fisher_neglogp_lut(n, n_deficit, L)
        stats[v] = luts[L][int(a_counts[v])]
    return stats


def _bm_stat_vector(X: np.ndarray, y: np.ndarray, min_hits: int) -> np.ndarray:
    n, n_vox = X.shape
    stats = np.zeros(n_vox)
    for v in range(n_vox):
        mask = X[:, v].astype(bool)
        L = int(mask.sum())
        if L < min_hits or n - L < min_hits:
            continue
        try:
            w, _ = brunner_munzel(y[~mask], y[mask])
        except DegenerateDataError:
            continue
        stats[v] = abs(w)
    return stats


def voxelwise_statistics(lesions, labels, test: str,
                         min_hits: int = DEFAULT_MIN_HITS) -> np.ndarray:
    """Float64 statistic array shaped like the grid.

    -log p for fisher, |W| for brunner_munzel. Voxels lesioned in fewer
    than ``min_hits`` subjects (or spared in fewer than ``min_hits``)
    are untestable and score 0, as do voxels where the test degenerates.
    """
    stack = _coerce_stack(lesions)
    dims = stack.shape[1:]
    X = stack.reshape(stack.shape[0], -1)
    y = np.asarray(labels, dtype=np.float64)
    if len(y) != X.shape[0]:
        raise ValueError("labels length mismatch")
    if test == "fisher":
        if not np.isin(y, (0.0, 1.0)).all():
            raise ValueError("fisher needs 0/1 labels")
        stats = _fisher_stat_vector(X, y, min_hits)
    elif test == "brunner_munzel":
        stats = _bm_stat_vector(X, y, min_hits)
    else:
        raise ValueError(f"unknown test {test!r}")
    return stats.reshape(dims)


def voxelwise_map(lesions, labels, test: str, min_hits: int = DEFAULT_MIN_HITS) -> VolumeGrid:
    """Statistic map as a storable grid (float32)."""
    stats = voxelwise_statistics(lesions, labels, test, min_hits)
    return VolumeGrid.real(stats.astype(np.float32))


def permutation_max_statistics(lesions, labels, test: str, n_perm: int,
                               rng: np.random.Generator,
                               min_hits: int = DEFAULT_MIN_HITS) -> np.ndarray:
    """Max statistic over the grid for each of ``n_perm`` label shuffles.

    Lesion margins are fixed, so for Fisher every voxel's table is
    determined by its lesion count and the permuted deficit overlap;
    p-values come from one lookup table per distinct lesion count and
    the overlaps from a single matrix product per batch of shuffles.
    """
    stack = _coerce_stack(lesions)
    n = stack.shape[0]
    X = stack.reshape(n, -1)
    y = np.asarray(labels, dtype=np.float64)
    perms = np.stack([rng.permutation(n) for _ in range(n_perm)])
    if test == "fisher":
        if not np.isin(y, (0.0, 1.0)).all():
            raise ValueError("fisher needs 0/1 labels")
        hits = X.sum(axis=0)
        eligible = (hits >= min_hits) & (n - hits >= min_hits)
        if not eligible.any():
            return np.zeros(n_perm)
        Xe = X[:, eligible].astype(np.float64)
        n_deficit = int(y.sum())
        luts = {int(L): _fisher_neglogp_lut(n, n_deficit, int(L))
                for L in np.unique(hits[eligible])}
        Y = y[perms.T]                      # (n, n_perm)
        A = np.rint(Xe.T @ Y).astype(np.int64)   # (n_elig, n_perm)
        out = np.zeros(n_perm)
        counts = hits[eligible].astype(int)
        for L in np.unique(counts):
            rows = counts == L
            np.maximum(out, luts[int(L)][A[rows]].max(axis=0), out=out)
        return out
    if test == "brunner_munzel":
        out = np.empty(n_perm)
        for i, perm in enumerate(perms):
            out[i] = _bm_stat_vector(X, y[perm], min_hits).max(initial=0.0)
        return out
    raise ValueError(f"unknown test {test!r}")


def percentile_threshold(max_stats: np.ndarray, percentile: float = 95.0) -> float:
    """Upper percentile of the max-statistic draw, rounded conservatively."""
    if not (0.0 < percentile <= 100.0):
        raise ValueError("percentile must lie in (0, 100]")
    return float(np.percentile(max_stats, percentile, method="higher"))


def fwer_threshold_permutation(lesions, labels, test: str,
                               n_perm: int = 2000, percentile: float = 95.0,
                               rng=None, min_hits: int = DEFAULT_MIN_HITS) -> float:
    if rng is None:
        rng = np.random.default_rng(0)
    maxs = permutation_max_statistics(lesions, labels, test, n_perm, rng, min_hits)
    return percentile_threshold(maxs, percentile)


def bonferroni_threshold(alpha: float, n_tests: int) -> float:
    """Per-test alpha after Bonferroni correction."""
    if not (0.0 < alpha < 1.0) or n_tests < 1:
        raise ValueError("need 0 < alpha < 1 and n_tests >= 1")
    return alpha / n_tests


def neg_log_threshold(alpha: float, n_tests: int) -> float:
    """Bonferroni cut in -log p units, comparable to a fisher map."""
    return -math.log(bonferroni_threshold(alpha, n_tests))


@dataclass(frozen=True)
class StatMap:
    """A statistic map with its significance threshold and mask."""

    statistic: VolumeGrid
    threshold: float
    significant: VolumeGrid

    def __post_init__(self):
        if self.statistic.kind != REAL:
            raise ValueError("statistic map must be real-valued")
        if self.statistic.dims != self.significant.dims:
            raise ValueError("mask dims mismatch")

    @classmethod
    def from_statistic(cls, statistic: VolumeGrid, threshold: float) -> "StatMap":
        sig = (statistic.data > threshold).astype(np.uint8)
        return cls(statistic=statistic, threshold=float(threshold),
                   significant=VolumeGrid.binary(sig))
