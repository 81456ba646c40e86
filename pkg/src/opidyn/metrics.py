"""Distribution distances, moment summaries and convergence-rate fits.

All Wasserstein-1 distances are exact for the discrete measures involved,
computed from the closed-form identity W1 = integral |F_a - F_b|; densities
on a grid enter as weighted atoms at cell centers (exact to O(dx)).
Moment sums rely on numpy's pairwise summation, so results are reproducible
bit for bit for a given input array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EmpiricalMeasure",
    "Moments",
    "RateFit",
    "DegenerateInput",
    "wasserstein1",
    "wasserstein1_vs_density",
    "wasserstein1_density",
    "moments",
    "fit_rate",
]


class DegenerateInput(ValueError):
    """Input outside the domain of the estimator (empty, nonpositive, ...)."""


@dataclass(eq=False)
class EmpiricalMeasure:
    """Uniformly weighted sample measure; samples are kept sorted."""

    samples: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1 or s.size == 0:
            raise DegenerateInput("need a nonempty 1-d sample array")
        if not np.isfinite(s).all():
            raise DegenerateInput("samples must be finite")
        self.samples = np.sort(s)

    @property
    def n(self) -> int:
        return self.samples.size


def _w1_discrete(xa: np.ndarray, wa: np.ndarray, xb: np.ndarray, wb: np.ndarray) -> float:
    """Exact W1 between weighted discrete measures via the merged CDF."""
    xs = np.concatenate([xa, xb])
    ws = np.concatenate([wa, -wb])
    order = np.argsort(xs, kind="stable")
    xs = xs[order]
    gap = np.diff(xs)
    cdf_diff = np.cumsum(ws[order])[:-1]
    return float(np.sum(np.abs(cdf_diff) * gap))


def wasserstein1(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    """Exact W1 between two sample measures.

    Equal sizes reduce to the mean absolute difference of sorted samples;
    unequal sizes integrate |F_a - F_b| over the merged breakpoints.
    """
    if a.n == b.n:
        return float(np.sum(np.abs(a.samples - b.samples)) / a.n)
    return _w1_discrete(
        a.samples,
        np.full(a.n, 1.0 / a.n),
        b.samples,
        np.full(b.n, 1.0 / b.n),
    )


def _density_atoms(density: np.ndarray, grid) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(density, dtype=float)
    centers = grid.centers()
    if p.shape != centers.shape:
        raise DegenerateInput("density must have one value per grid cell")
    if np.any(p < 0) or not np.isfinite(p).all():
        raise DegenerateInput("density must be finite and nonnegative")
    mass = float(np.sum(p) * grid.dx)
    if abs(mass - 1.0) > 1e-6:
        raise DegenerateInput(f"density mass {mass!r} is not 1 within 1e-6")
    return centers, p * grid.dx / mass


def wasserstein1_vs_density(a: EmpiricalMeasure, density: np.ndarray, grid) -> float:
    """W1 between a sample measure and a cell-averaged density.

    The density is treated as atoms at cell centers (weights p_i dx), which
    is exact to O(dx). It must be normalized within 1e-6.
    """
    xb, wb = _density_atoms(density, grid)
    return _w1_discrete(a.samples, np.full(a.n, 1.0 / a.n), xb, wb)


def wasserstein1_density(p: np.ndarray, q: np.ndarray, grid) -> float:
    """W1 between two cell-averaged densities on the same grid (O(dx) exact)."""
    xp, wp = _density_atoms(p, grid)
    xq, wq = _density_atoms(q, grid)
    return _w1_discrete(xp, wp, xq, wq)


@dataclass(frozen=True)
class Moments:
    mean: float
    second_moment: float
    variance: float


def moments(x: np.ndarray) -> Moments:
    """Population mean, raw second moment and variance of a sample."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise DegenerateInput("need a nonempty 1-d sample array")
    n = x.size
    mean = float(np.sum(x) / n)
    m2 = float(np.sum(x * x) / n)
    var = float(np.sum((x - mean) ** 2) / n)
    return Moments(mean=mean, second_moment=m2, variance=var)


@dataclass(frozen=True)
class RateFit:
    """Least-squares slope of log(err) against log(n)."""

    slope: float
    intercept: float
    r2: float


def fit_rate(ns, errs) -> RateFit:
    """Fit err ~ C * n^slope by least squares in log-log coordinates.

    Needs at least three points with positive n and err.
    """
    ns = np.asarray(ns, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if ns.shape != errs.shape or ns.ndim != 1:
        raise DegenerateInput("ns and errs must be 1-d arrays of equal length")
    if ns.size < 3:
        raise DegenerateInput("rate fit needs at least three points")
    if np.any(ns <= 0) or np.any(errs <= 0) or not np.isfinite(errs).all():
        raise DegenerateInput("rate fit needs positive finite n and err")
    lx = np.log(ns)
    ly = np.log(errs)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    # floor scaled to the data so constant errs (a perfect slope-0 fit up to
    # rounding) report r2 = 1 instead of 0/0 noise
    floor = 1e-20 * (1.0 + float(ly @ ly))
    if ss_tot <= floor:
        r2 = 1.0 if ss_res <= floor else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    if not math.isfinite(slope):
        raise DegenerateInput("rate fit is degenerate")
    return RateFit(slope=float(slope), intercept=float(intercept), r2=float(r2))
