"""Evaluation protocol: stratified synthetic transforms, corner-displacement
errors, success counting, eCDF curves, and the supporting statistics
(Clopper-Pearson, Wilcoxon signed-rank, empirical bootstrap, Spearman),
plus timing capture.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as spstats

from .geometry import RigidTransform2D

STRATA = ("small", "medium", "large")


def image_corners(image_size: tuple[int, int]) -> np.ndarray:
    """The four pixel-coordinate corners of an (h, w) image, as (x, y) rows."""
    h, w = image_size
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def mean_corner_displacement(t: RigidTransform2D, image_size: tuple[int, int]) -> float:
    """Average Euclidean displacement of the image corners under ``t``."""
    c = image_corners(image_size)
    return float(np.linalg.norm(t.apply(c) - c, axis=1).mean())


def classify_stratum(displacement: float, bounds: tuple[float, float]) -> str:
    small, medium = bounds
    if displacement <= small:
        return "small"
    if displacement <= medium:
        return "medium"
    return "large"


@dataclass
class EvalTransform:
    transform: RigidTransform2D
    displacement: float
    stratum: str

    def __post_init__(self):
        if self.stratum not in STRATA:
            raise ValueError(f"unknown stratum {self.stratum!r}")


def generate_eval_transforms(
    strata_counts: dict[str, int],
    image_size: tuple[int, int],
    rng: np.random.Generator,
    rotation_deg: float = 30.0,
    translation_px: float = 100.0,
    strata_bounds: tuple[float, float] = (100.0, 200.0),
    max_attempts_per_transform: int = 2000,
) -> list[EvalTransform]:
    """Rejection-sample random rigid transforms until each stratum quota is met.

    Each candidate is a rotation up to +/-`rotation_deg` about the image
    center followed by translations up to +/-`translation_px` in x and y;
    its stratum is derived from the mean corner displacement.
    """
    quotas = {s: int(strata_counts.get(s, 0)) for s in STRATA}
    if any(v < 0 for v in quotas.values()):
        raise ValueError(f"negative quota in {strata_counts}")
    total = sum(quotas.values())
    if total == 0:
        return []
    h, w = image_size
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    remaining = dict(quotas)
    out: list[EvalTransform] = []
    attempts = 0
    budget = max_attempts_per_transform * total
    while sum(remaining.values()) > 0:
        if attempts >= budget:
            unmet = sorted(s for s, v in remaining.items() if v > 0)
            raise ValueError(
                f"strata {unmet} unreachable for image {w}x{h} with rotation +/-{rotation_deg} deg "
                f"and translation +/-{translation_px} px (bounds {strata_bounds})"
            )
        attempts += 1
        angle = math.radians(rng.uniform(-rotation_deg, rotation_deg))
        tx = rng.uniform(-translation_px, translation_px)
        ty = rng.uniform(-translation_px, translation_px)
        t = RigidTransform2D(angle=angle, translation=(tx, ty), center=center)
        disp = mean_corner_displacement(t, image_size)
        stratum = classify_stratum(disp, strata_bounds)
        if remaining[stratum] > 0:
            remaining[stratum] -= 1
            out.append(EvalTransform(transform=t, displacement=disp, stratum=stratum))
    return out


def registration_error(
    t_true: RigidTransform2D,
    t_est: RigidTransform2D | None,
    image_size: tuple[int, int],
) -> float:
    """Mean distance between the four corners mapped through the true and the
    estimated transform (both mapping reference to floating coordinates).
    A missing estimate (failed registration) scores +inf."""
    if t_est is None:
        return float("inf")
    c = image_corners(image_size)
    return float(np.linalg.norm(t_true.apply(c) - t_est.apply(c), axis=1).mean())


# ---------------------------------------------------------------------------
# eCDF and success counting


@dataclass
class ECDFCurve:
    errors: np.ndarray  # sorted, may end with +inf for failures
    fractions: np.ndarray  # cumulative fraction at each error
    failure_threshold: float
    relative_scale: float | None = None

    @property
    def n(self) -> int:
        return len(self.errors)

    def success_fraction(self, threshold: float | None = None) -> float:
        thr = self.failure_threshold if threshold is None else threshold
        return float(np.count_nonzero(self.errors < thr) / self.n)


def ecdf(errors, failure_threshold: float = 100.0, relative_scale: float | None = None) -> ECDFCurve:
    errs = np.asarray(errors, dtype=np.float64)
    if errs.size == 0:
        raise ValueError("empty error list")
    if np.any(np.isnan(errs)) or np.any(errs < 0):
        raise ValueError("errors must be non-negative (use +inf for failures)")
    order = np.sort(errs)
    fractions = np.arange(1, errs.size + 1, dtype=np.float64) / errs.size
    return ECDFCurve(errors=order, fractions=fractions, failure_threshold=failure_threshold, relative_scale=relative_scale)


def success_thresholds(side: float, relative=(0.01, 0.05), absolute: float = 100.0) -> dict[str, float]:
    """Materialized strict-< thresholds: rounded-up pixel bounds for the
    relative levels plus the absolute failure bound."""
    out = {}
    for frac in relative:
        out[f"lt_{frac:g}"] = float(math.ceil(frac * side))
    out["lt_abs"] = float(absolute)
    return out


def success_counts(errors, side: float, relative=(0.01, 0.05), absolute: float = 100.0) -> dict[str, int]:
    errs = np.asarray(errors, dtype=np.float64)
    return {
        name: int(np.count_nonzero(errs < bound))
        for name, bound in success_thresholds(side, relative, absolute).items()
    }


# ---------------------------------------------------------------------------
# Interval estimates


@dataclass
class IntervalEstimate:
    point: float
    lo: float
    hi: float
    method: str
    level: float
    count_lo: int | None = None
    count_hi: int | None = None


def clopper_pearson(k: int, n: int, level: float = 0.95) -> IntervalEstimate:
    """Exact binomial interval by Beta-quantile inversion.

    Count bounds scale the proportion bounds by n and round to the nearest
    integer, matching count-style reporting.
    """
    if not (0 <= k <= n) or n < 1:
        raise ValueError(f"invalid successes/trials: {k}/{n}")
    alpha = 1.0 - level
    lo = 0.0 if k == 0 else float(spstats.beta.ppf(alpha / 2.0, k, n - k + 1))
    hi = 1.0 if k == n else float(spstats.beta.ppf(1.0 - alpha / 2.0, k + 1, n - k))
    return IntervalEstimate(
        point=k / n,
        lo=lo,
        hi=hi,
        method="clopper_pearson",
        level=level,
        count_lo=int(np.rint(lo * n)),
        count_hi=int(np.rint(hi * n)),
    )


def bootstrap_ci(values, level: float = 0.95, resamples: int = 10000, seed: int = 0) -> IntervalEstimate:
    """Empirical (basic) bootstrap interval for the mean:
    2*mean - percentile envelope of resampled means."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size < 2:
        raise ValueError("need at least two values")
    if resamples < 1000:
        raise ValueError("need at least 1000 resamples")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, vals.size, size=(resamples, vals.size))
    boot_means = vals[idx].mean(axis=1)
    point = float(vals.mean())
    alpha = 1.0 - level
    q_lo, q_hi = np.quantile(boot_means, [alpha / 2.0, 1.0 - alpha / 2.0])
    return IntervalEstimate(
        point=point,
        lo=float(2.0 * point - q_hi),
        hi=float(2.0 * point - q_lo),
        method="bootstrap",
        level=level,
    )


# ---------------------------------------------------------------------------
# Rank statistics


def _signed_ranks(diffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average ranks of |diffs| and the tie group sizes."""
    mags = np.abs(diffs)
    order = np.argsort(mags, kind="stable")
    ranks = np.empty(len(mags), dtype=np.float64)
    sorted_mags = mags[order]
    i = 0
    ties = []
    while i < len(sorted_mags):
        j = i
        while j + 1 < len(sorted_mags) and sorted_mags[j + 1] == sorted_mags[i]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        ranks[order[i : j + 1]] = avg
        ties.append(j - i + 1)
        i = j + 1
    return ranks, np.asarray(ties, dtype=np.float64)


def wilcoxon_signed_rank(a, b, exact_max_n: int = 12) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped. Uses exhaustive sign enumeration for
    n <= ``exact_max_n`` and a tie-corrected normal approximation with
    continuity correction otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-D arrays of equal length")
    diffs = a - b
    diffs = diffs[diffs != 0.0]
    if diffs.size == 0:
        raise ValueError("all differences are zero; the test is undefined")
    n = diffs.size
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks, ties = _signed_ranks(diffs)
    w_plus = float(ranks[diffs > 0].sum())
    total = float(ranks.sum())
    w_small = min(w_plus, total - w_plus)
    if n <= exact_max_n:
        count = 0
        n_assign = 1 << n
        for mask in range(n_assign):
            w = 0.0
            for i in range(n):
                if mask >> i & 1:
                    w += ranks[i]
            if w <= w_small + 1e-12 or w >= total - w_small - 1e-12:
                count += 1
        return count / n_assign
    mu = total / 2.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((ties**3 - ties).sum()) / 48.0
    if var <= 0:
        raise ValueError("degenerate variance (all magnitudes tie)")
    z = (w_small - mu + 0.5) / math.sqrt(var)
    return float(min(1.0, 2.0 * spstats.norm.cdf(z)))


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("inputs must be equal-length 1-D arrays with >= 2 entries")
    ra = spstats.rankdata(a)
    rb = spstats.rankdata(b)
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    denom = math.sqrt(float((ra**2).sum() * (rb**2).sum()))
    if denom == 0:
        raise ValueError("constant input: rank correlation undefined")
    return float((ra * rb).sum() / denom)


# ---------------------------------------------------------------------------
# Timing capture


@dataclass
class TimingRecord:
    stage: str
    seconds: float
    items: int = 1


@dataclass
class TimingTable:
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["stage", "total_seconds", "items", "seconds_per_item"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def timing_report(records: list[TimingRecord]) -> TimingTable:
    """Aggregate per-stage wall-clock totals and per-item averages."""
    table = TimingTable()
    stages: dict[str, tuple[float, int]] = {}
    order: list[str] = []
    for rec in records:
        if rec.stage not in stages:
            stages[rec.stage] = (0.0, 0)
            order.append(rec.stage)
        tot, cnt = stages[rec.stage]
        stages[rec.stage] = (tot + rec.seconds, cnt + rec.items)
    for stage in order:
        tot, cnt = stages[stage]
        table.rows.append(
            {
                "stage": stage,
                "total_seconds": tot,
                "items": cnt,
                "seconds_per_item": tot / cnt if cnt else float("nan"),
            }
        )
    return table


def write_ecdf_csv(curve: ECDFCurve, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["error_px", "cumulative_fraction"])
        for e, fr in zip(curve.errors, curve.fractions):
            writer.writerow(["inf" if math.isinf(e) else repr(float(e)), repr(float(fr))])
