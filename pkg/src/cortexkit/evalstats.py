"""Segmentation overlap metrics and the reliability / group statistics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, special, stats

from .errors import (
    DegenerateVariance,
    EmptySet,
    GridMismatch,
    RankDeficient,
    TooFewPairs,
)
from .io import LabelTable
from .voxelgrid import BinaryMask, LabelVolume

log = logging.getLogger(__name__)

ALPHA = 0.05


def _pair(g, p):
    if isinstance(g, BinaryMask) or isinstance(p, BinaryMask):
        if not (isinstance(g, BinaryMask) and isinstance(p, BinaryMask)) or g.header != p.header:
            raise GridMismatch("masks are on different grids")
        return g.bits, p.bits, np.asarray(g.header.voxel_size_mm)
    g = np.asarray(g, dtype=bool)
    p = np.asarray(p, dtype=bool)
    if g.shape != p.shape:
        raise GridMismatch(f"mask shapes {g.shape} and {p.shape} differ")
    return g, p, np.ones(g.ndim)


def dice(g, p) -> float:
    """``2 |G & P| / (|G| + |P|)``; 1.0 when both masks are empty."""
    g, p, _ = _pair(g, p)
    total = int(g.sum()) + int(p.sum())
    if total == 0:
        log.debug("dice of two empty masks defined as 1")
        return 1.0
    return 2.0 * int(np.count_nonzero(g & p)) / total


def avg_hausdorff(g, p, voxel_size=None, halve: bool = False) -> float:
    """Sum of the two directed mean nearest-voxel distances (mm).

    ``halve`` gives the averaged variant found elsewhere in the literature.
    """
    g, p, vs = _pair(g, p)
    if voxel_size is not None:
        vs = np.broadcast_to(np.asarray(voxel_size, dtype=float), (g.ndim,))
    if not g.any():
        raise EmptySet("ground-truth mask G is empty")
    if not p.any():
        raise EmptySet("prediction mask P is empty")
    to_p = ndimage.distance_transform_edt(~p, sampling=vs)
    to_g = ndimage.distance_transform_edt(~g, sampling=vs)
    value = math.fsum(to_p[g]) / g.sum() + math.fsum(to_g[p]) / p.sum()
    return 0.5 * value if halve else value


@dataclass
class LabelScores:
    dice: dict = field(default_factory=dict)
    avg_hd: dict = field(default_factory=dict)
    cortical_mean: float = float("nan")
    subcortical_mean: float = float("nan")

    def rows(self):
        for label in sorted(self.dice):
            yield label, self.dice[label], self.avg_hd.get(label, float("nan"))


def dice_per_label(gt: LabelVolume, pred: LabelVolume, table: LabelTable, with_hd: bool = True) -> LabelScores:
    """Per-label Dice (and average Hausdorff); labels absent from both volumes are NA."""
    if gt.header.dims != pred.header.dims or gt.header.voxel_size_mm != pred.header.voxel_size_mm:
        raise GridMismatch("label volumes are on different grids")
    vs = np.asarray(gt.header.voxel_size_mm)
    scores = LabelScores()
    for e in table:
        g = gt.labels == e.internal_id
        p = pred.labels == e.internal_id
        if not g.any() and not p.any():
            scores.dice[e.internal_id] = float("nan")
            continue
        scores.dice[e.internal_id] = dice(g, p)
        if with_hd and g.any() and p.any():
            scores.avg_hd[e.internal_id] = avg_hausdorff(g, p, voxel_size=vs)
    cort = [scores.dice[i] for i in table.cortical_ids() if not math.isnan(scores.dice[i])]
    sub = [scores.dice[i] for i in table.subcortical_ids() if not math.isnan(scores.dice[i])]
    scores.cortical_mean = float(np.mean(cort)) if cort else float("nan")
    scores.subcortical_mean = float(np.mean(sub)) if sub else float("nan")
    return scores


# ---------------------------------------------------------------------------
# distributions from the regularized incomplete beta


def f_cdf(x: float, d1: float, d2: float) -> float:
    if x <= 0:
        return 0.0
    return float(special.betainc(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2)))


def f_ppf(q: float, d1: float, d2: float) -> float:
    """F quantile by inverting the incomplete beta."""
    z = float(special.betaincinv(d1 / 2.0, d2 / 2.0, q))
    if z >= 1.0:
        return math.inf
    return d2 * z / (d1 * (1.0 - z))


def t_two_sided_p(t: float, df: float) -> float:
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


# ---------------------------------------------------------------------------
# reliability


@dataclass(frozen=True)
class IccResult:
    icc: float
    lower: float
    upper: float


@dataclass(frozen=True)
class AnovaTable:
    ms_rows: float
    ms_cols: float
    ms_err: float
    n: int
    k: int


def two_way_anova(y) -> AnovaTable:
    y = np.asarray(y, dtype=float)
    n, k = y.shape
    grand = y.mean()
    ss_rows = k * np.sum((y.mean(axis=1) - grand) ** 2)
    ss_cols = n * np.sum((y.mean(axis=0) - grand) ** 2)
    ss_err = np.sum((y - grand) ** 2) - ss_rows - ss_cols
    return AnovaTable(
        ms_rows=ss_rows / (n - 1),
        ms_cols=ss_cols / (k - 1),
        ms_err=max(ss_err, 0.0) / ((n - 1) * (k - 1)),
        n=n,
        k=k,
    )


def icc_absolute(measurements, alpha: float = ALPHA) -> IccResult:
    """Two-way random effects, absolute agreement, single measure ICC(A,1).

    ``measurements`` is ``n subjects x k repeats``. Confidence bounds follow
    McGraw & Wong (1996) with Satterthwaite degrees of freedom.
    """
    y = np.asarray(measurements, dtype=float)
    if y.ndim != 2 or y.shape[0] < 2 or y.shape[1] < 2:
        raise ValueError(f"need at least 2 subjects x 2 repeats, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("measurements must be finite")
    if np.all(y == y[:, :1]) and np.ptp(y[:, 0]) > 0:
        # identical repeats: exact agreement, which rounding in the sums of squares would blur
        return IccResult(1.0, 1.0, 1.0)
    a = two_way_anova(y)
    n, k = a.n, a.k
    msr, msc, mse = a.ms_rows, a.ms_cols, a.ms_err
    denom = msr + (k - 1) * mse + k / n * (msc - mse)
    if msr <= 0 or denom <= 0:
        raise DegenerateVariance("no between-subject variance; ICC undefined")
    icc = float((msr - mse) / denom)
    if (mse == 0 and msc == 0) or icc >= 1.0:
        return IccResult(icc, icc, icc)

    aa = k * icc / (n * (1 - icc))
    bb = 1 + k * icc * (n - 1) / (n * (1 - icc))
    v = (aa * msc + bb * mse) ** 2 / ((aa * msc) ** 2 / (k - 1) + (bb * mse) ** 2 / ((n - 1) * (k - 1)))
    f_lo = f_ppf(1 - alpha / 2, n - 1, v)
    f_hi = f_ppf(1 - alpha / 2, v, n - 1)
    lower = n * (msr - f_lo * mse) / (f_lo * (k * msc + (k * n - k - n) * mse) + n * msr)
    upper = n * (f_hi * msr - mse) / (k * msc + (k * n - k - n) * mse + n * f_hi * msr)
    return IccResult(icc, float(min(lower, icc)), float(max(upper, icc)))


# ---------------------------------------------------------------------------
# group analysis


@dataclass
class MeasureTable:
    """Subjects x ROIs values with per-subject covariates."""

    rois: list
    values: np.ndarray
    subject: list
    diagnosis: list | None = None
    age: np.ndarray | None = None
    sex: list | None = None
    head_size: np.ndarray | None = None
    repeat: list | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.subject), len(self.rois))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("measure table entries must be finite")

    def column(self, roi) -> np.ndarray:
        return self.values[:, self.rois.index(roi)]


@dataclass(frozen=True)
class GlmResult:
    beta_dx: float
    t: float
    p: float
    signed_p: float
    df: int


def _numeric(values, name, reference=None) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype.kind in "biuf":
        return arr.astype(float)
    levels = sorted(set(arr.tolist()))
    if reference is not None and reference in levels:
        return (arr != reference).astype(float)
    if len(levels) > 2:
        raise ValueError(f"{name} must be binary, found levels {levels}")
    return (arr == levels[-1]).astype(float)


def glm_design(table: MeasureTable, covariates=("age", "sex"), reference_dx: str = "CN") -> np.ndarray:
    if table.diagnosis is None:
        raise ValueError("measure table has no diagnosis column")
    cols = [np.ones(len(table.subject)), _numeric(table.diagnosis, "diagnosis", reference_dx)]
    for name in covariates:
        values = getattr(table, name)
        if values is None:
            raise ValueError(f"covariate {name} missing from measure table")
        cols.append(_numeric(values, name))
    return np.column_stack(cols)


def ols_diagnosis_effect(y, X) -> GlmResult:
    """OLS fit; column 1 of ``X`` is the diagnosis indicator."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n <= p or np.linalg.matrix_rank(X) < p:
        raise RankDeficient(f"design matrix of shape {X.shape} is rank deficient")
    q, r = np.linalg.qr(X)
    beta = np.linalg.solve(r, q.T @ y)
    resid = y - X @ beta
    df = n - p
    sigma2 = float(resid @ resid) / df
    r_inv = np.linalg.inv(r)
    se = math.sqrt(sigma2 * float(r_inv[1] @ r_inv[1]))
    if se == 0:
        t = math.copysign(math.inf, beta[1]) if beta[1] else 0.0
        pval = 0.0 if beta[1] else 1.0
    else:
        t = float(beta[1] / se)
        pval = t_two_sided_p(t, df)
    sign = 1.0 if beta[1] >= 0 else -1.0
    return GlmResult(float(beta[1]), t, pval, sign * pval, df)


def glm_group(table: MeasureTable, roi, covariates=("age", "sex"), reference_dx: str = "CN") -> GlmResult:
    """Diagnosis effect on one ROI controlling for the covariates."""
    return ols_diagnosis_effect(table.column(roi), glm_design(table, covariates, reference_dx))


def bonferroni(pvalues, n_tests=None) -> np.ndarray:
    p = np.asarray(pvalues, dtype=float)
    m = p.size if n_tests is None else n_tests
    return np.minimum(p * m, 1.0)


# ---------------------------------------------------------------------------
# paired comparison


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p: float
    n_effective: int
    z: float


def wilcoxon_signed_rank(x, y, min_pairs: int = 6) -> WilcoxonResult:
    """Two-sided signed-rank test by normal approximation.

    Zero differences are dropped, ties get average ranks, the variance is
    tie-corrected and a 0.5 continuity correction is applied. The statistic
    is ``min(W+, W-)``.
    """
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    d = d[d != 0]
    n = len(d)
    if n < min_pairs:
        raise TooFewPairs(f"{n} nonzero differences, need at least {min_pairs}")
    ranks = stats.rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts ** 3 - counts) / 48.0
    dev = abs(w_plus - mean)
    z = max(dev - 0.5, 0.0) / math.sqrt(var) if var > 0 else 0.0
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return WilcoxonResult(min(w_plus, w_minus), p, n, z)

