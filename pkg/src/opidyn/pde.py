"""Mean-field density evolution and its closed-form long-time limits.

The population law solves a family of coupled Fokker-Planck equations, one
density row per initial-opinion atom b_k:

    dP_k/dt = -d/dx [ beta_k(x) P_k ] + (sigma^2/2) d2/dx2 P_k ,
    beta_k(x) = alpha*lam * integral h(y, x) Pbar(y) dy + omega (b_k - x),

where Pbar = sum_k w_k P_k is the aggregated density. Every row starts as a
point mass at its own b_k and feels the others only through Pbar.

The solver is a conservative finite-volume scheme: explicit upwind advection
plus centered diffusion with zero-flux walls, so each row's mass is conserved
to rounding and cell averages stay nonnegative under the step-size rule.
For the linear-difference kernel the interaction reduces to
alpha*lam*(m - x) with m the aggregate mean; for the neighbor-value kernel
to the constant alpha*lam*m; other kernels use midpoint quadrature against
a precomputed kernel table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    Atoms,
    InitialDistribution,
    InteractionKernel,
    LinearDifference,
    ModelParams,
    NeighborValue,
)

__all__ = [
    "Grid1D",
    "BFamilyDensity",
    "PdeConfig",
    "CflViolation",
    "DomainOverflow",
    "DegenerateParams",
    "drift_field",
    "fp_step",
    "evolve",
    "aggregate",
    "steady_state_mixture",
    "dirac_contraction_map",
    "slant_mean",
    "slant_fixed_point",
    "slant_fixed_point_alt",
    "steady_state_slant",
    "slant_contraction_atoms",
    "BOUNDARY_MASS_LIMIT",
]

BOUNDARY_MASS_LIMIT = 1e-6  # aggregated mass allowed in the two wall cells


class CflViolation(RuntimeError):
    """Step-size rule broke down (non-finite drift or empty step)."""


class DomainOverflow(RuntimeError):
    """Probability mass reached the domain walls."""


class DegenerateParams(ValueError):
    """Closed form undefined for these parameters."""


@dataclass(frozen=True)
class Grid1D:
    """Uniform cell-centered grid on [x_min, x_max] with nx >= 16 cells."""

    x_min: float
    x_max: float
    nx: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x_min) and math.isfinite(self.x_max)):
            raise ValueError("grid bounds must be finite")
        if not self.x_min < self.x_max:
            raise ValueError("need x_min < x_max")
        if self.nx < 16:
            raise ValueError("need nx >= 16")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    def centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.nx) + 0.5) * self.dx


def _nearest_cell(grid: Grid1D, b: float) -> int:
    # Ties (b exactly on a face) break away from zero so mirrored atoms land
    # on mirrored cells of a symmetric grid. The tie test needs slack: the
    # two face-adjacent distances agree only up to rounding of the centers.
    c = grid.centers()
    d = np.abs(c - b)
    i = int(np.argmin(d))
    ties = np.nonzero(d <= d[i] + 1e-9 * grid.dx)[0]
    if ties.size > 1:
        i = int(ties[np.argmax(np.abs(c[ties]))])
    return i


@dataclass
class BFamilyDensity:
    """Family of per-atom densities: row k is the law of particles anchored
    at b_k, each row normalized to unit mass; w holds the atom weights."""

    b: np.ndarray
    w: np.ndarray
    p: np.ndarray
    t: float = 0.0

    def __post_init__(self) -> None:
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        self.w = np.atleast_1d(np.asarray(self.w, dtype=float))
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float))
        if self.b.shape != self.w.shape or self.p.shape[0] != self.b.size:
            raise ValueError("need one weight and one density row per atom")

    @property
    def n_atoms(self) -> int:
        return self.b.size

    def copy(self) -> "BFamilyDensity":
        return BFamilyDensity(self.b.copy(), self.w.copy(), self.p.copy(), self.t)

    def row_masses(self, grid: Grid1D) -> np.ndarray:
        return np.sum(self.p, axis=1) * grid.dx

    @classmethod
    def initial_deltas(cls, dist: Atoms, grid: Grid1D) -> "BFamilyDensity":
        """Each atom starts as full unit mass in its nearest cell."""
        if not isinstance(dist, Atoms):
            raise TypeError("initial_deltas needs an atomic distribution")
        lo, hi = dist.support()
        if lo < grid.x_min or hi > grid.x_max:
            raise ValueError("atoms must lie inside the grid domain")
        p = np.zeros((dist.points.size, grid.nx))
        for k, bk in enumerate(dist.points):
            p[k, _nearest_cell(grid, float(bk))] = 1.0 / grid.dx
        return cls(dist.points.copy(), dist.weights.copy(), p, t=0.0)


@dataclass(frozen=True)
class PdeConfig:
    """Step-size policy for the explicit scheme.

    The effective step is cfl_safety / (max|beta|/dx + sigma^2/dx^2), capped
    by dt_max. The harmonic combination keeps the total outflow of any cell
    below 2*cfl_safety of its content, so cell averages stay nonnegative.
    ``check_positivity`` asserts that invariant every step (debug runs).
    """

    dt_max: float = 0.5
    cfl_safety: float = 0.4
    scheme: str = "explicit-upwind"
    check_positivity: bool = False

    def __post_init__(self) -> None:
        if not (math.isfinite(self.dt_max) and self.dt_max > 0):
            raise ValueError("dt_max must be positive and finite")
        if not (0 < self.cfl_safety < 0.5):
            raise ValueError("cfl_safety must lie in (0, 0.5)")
        if self.scheme != "explicit-upwind":
            raise ValueError(f"unknown scheme {self.scheme!r}")


def _kernel_table(kernel: InteractionKernel, grid: Grid1D) -> np.ndarray | None:
    """Quadrature table H[j, i] = h(c_j, c_i) for kernels with no fast path."""
    if isinstance(kernel, (LinearDifference, NeighborValue)):
        return None
    c = grid.centers()
    return kernel(c[:, None], c[None, :])


def _interaction_field(
    family: BFamilyDensity,
    params: ModelParams,
    kernel: InteractionKernel,
    grid: Grid1D,
    table: np.ndarray | None = None,
) -> np.ndarray:
    """alpha*lam * integral h(y, x) Pbar(y) dy on the grid; shared by all rows."""
    agg = aggregate(family)
    rate = params.interaction_rate
    c = grid.centers()
    if isinstance(kernel, LinearDifference):
        m = float(np.sum(agg * c) * grid.dx)
        return rate * (m - c)
    if isinstance(kernel, NeighborValue):
        m = float(np.sum(agg * c) * grid.dx)
        return np.full(grid.nx, rate * m)
    if table is None:
        table = _kernel_table(kernel, grid)
    return rate * (agg @ table) * grid.dx


def drift_field(
    family: BFamilyDensity,
    k: int,
    params: ModelParams,
    kernel: InteractionKernel,
    grid: Grid1D,
) -> np.ndarray:
    """Drift beta_k(x) of row k at the family's current state."""
    if not 0 <= k < family.n_atoms:
        raise IndexError(f"row {k} out of range")
    inter = _interaction_field(family, params, kernel, grid)
    return inter + params.omega * (family.b[k] - grid.centers())


def _stable_dt(vmax: float, sigma: float, dx: float, cfg: PdeConfig) -> float:
    load = vmax / dx + sigma * sigma / (dx * dx)
    if load <= 0.0:
        return cfg.dt_max
    return min(cfg.dt_max, cfg.cfl_safety / load)


def fp_step(
    family: BFamilyDensity,
    params: ModelParams,
    kernel: InteractionKernel,
    grid: Grid1D,
    cfg: PdeConfig,
    dt_cap: float | None = None,
    table: np.ndarray | None = None,
) -> BFamilyDensity:
    """One conservative finite-volume step of every row.

    The interaction field (hence the aggregate mean) is frozen at the start
    of the step and shared by all rows. Face fluxes are upwind in the face
    drift plus centered diffusion; wall fluxes are zero, so each row's mass
    is conserved to rounding.
    """
    dx = grid.dx
    c = grid.centers()
    inter = _interaction_field(family, params, kernel, grid, table)
    beta = inter[None, :] + params.omega * (family.b[:, None] - c[None, :])
    if not np.isfinite(beta).all():
        raise CflViolation("non-finite drift field")
    vmax = float(np.max(np.abs(beta))) if beta.size else 0.0
    dt = _stable_dt(vmax, params.sigma, dx, cfg)
    if dt_cap is not None:
        dt = min(dt, dt_cap)
    if not (dt > 0 and math.isfinite(dt)):
        raise CflViolation(f"empty step dt={dt!r}")

    p = family.p
    bf = 0.5 * (beta[:, :-1] + beta[:, 1:])
    adv = np.where(bf > 0, bf * p[:, :-1], bf * p[:, 1:])
    diff = -(0.5 * params.sigma**2) * (p[:, 1:] - p[:, :-1]) / dx
    flux = adv + diff
    p_new = p.copy()
    p_new[:, 0] -= (dt / dx) * flux[:, 0]
    p_new[:, 1:-1] -= (dt / dx) * (flux[:, 1:] - flux[:, :-1])
    p_new[:, -1] += (dt / dx) * flux[:, -1]
    if cfg.check_positivity and p_new.min() < 0:
        raise CflViolation(f"positivity lost at t={family.t:g} (min {p_new.min():.3e})")
    return BFamilyDensity(family.b, family.w, p_new, family.t + dt)


def evolve(
    family: BFamilyDensity,
    params: ModelParams,
    kernel: InteractionKernel,
    grid: Grid1D,
    cfg: PdeConfig,
    t_end: float,
    record_times=None,
) -> list[tuple[float, BFamilyDensity]]:
    """Advance the family to t_end, emitting copies at the requested times.

    Steps are capped so every record time (and t_end) is landed on exactly.
    At each emission the aggregated mass in the two wall cells is checked
    against BOUNDARY_MASS_LIMIT; beyond it the domain is too small and a
    DomainOverflow is raised.
    """
    if not (math.isfinite(t_end) and t_end >= family.t):
        raise ValueError("t_end must be finite and >= the family's current time")
    if record_times is None:
        record_times = [t_end]
    targets = sorted({float(rt) for rt in record_times})
    if targets and (targets[0] < family.t or targets[-1] > t_end):
        raise ValueError("record times must lie in [t, t_end]")

    table = _kernel_table(kernel, grid)
    fam = family.copy()
    out: list[tuple[float, BFamilyDensity]] = []
    next_i = 0

    def wall_mass() -> float:
        agg = aggregate(fam)
        return float((agg[0] + agg[-1]) * grid.dx)

    def emit_due() -> None:
        nonlocal next_i
        while next_i < len(targets) and fam.t >= targets[next_i] - 1e-9:
            if wall_mass() > BOUNDARY_MASS_LIMIT:
                raise DomainOverflow(
                    f"wall cells hold {wall_mass():.3e} mass at t={fam.t:g}; widen the domain"
                )
            out.append((targets[next_i], fam.copy()))
            next_i += 1

    emit_due()
    while fam.t < t_end - 1e-9:
        cap = (targets[next_i] if next_i < len(targets) else t_end) - fam.t
        fam = fp_step(fam, params, kernel, grid, cfg, dt_cap=min(cap, t_end - fam.t), table=table)
        emit_due()
    return out


def aggregate(family: BFamilyDensity) -> np.ndarray:
    """Aggregated density sum_k w_k P_k."""
    return family.w @ family.p


# ---------------------------------------------------------------------------
# closed-form long-time limits


def _gauss(x: np.ndarray, mean: float, var: float) -> np.ndarray:
    return np.exp(-((x - mean) ** 2) / (2.0 * var)) / math.sqrt(2.0 * math.pi * var)


def _require_atoms(dist: InitialDistribution) -> Atoms:
    if not isinstance(dist, Atoms):
        raise TypeError("closed forms need an atomic distribution; discretize first")
    return dist


def steady_state_mixture(
    params: ModelParams,
    dist: InitialDistribution,
    m: float,
    grid: Grid1D,
    variance_form: str = "rate_linear",
) -> np.ndarray:
    """Stationary density for the linear-difference kernel.

    A Gaussian mixture with one component per atom, centered at
    (alpha*lam*m + omega*b_k) / (alpha*lam + omega). Two closed-form
    candidates exist for the component variance and the solver output
    arbitrates between them (see the acceptance suite):

    * ``rate_linear`` (default): sigma^2 / (2 (alpha*lam + omega)), the
      variance that solves the stationary equation for this drift;
    * ``rate_squared``: sigma^2 / (2 (alpha*lam + omega)^2).
    """
    atoms = _require_atoms(dist)
    rate = params.interaction_rate
    r = rate + params.omega
    if r <= 0:
        raise DegenerateParams("need alpha*lam + omega > 0")
    if params.sigma <= 0:
        raise DegenerateParams("need sigma > 0 for a density; use dirac_contraction_map")
    if variance_form == "rate_linear":
        var = params.sigma**2 / (2.0 * r)
    elif variance_form == "rate_squared":
        var = params.sigma**2 / (2.0 * r * r)
    else:
        raise ValueError(f"unknown variance_form {variance_form!r}")
    c = grid.centers()
    out = np.zeros(grid.nx)
    for bk, wk in zip(atoms.points, atoms.weights):
        out += wk * _gauss(c, (rate * m + params.omega * bk) / r, var)
    return out


def dirac_contraction_map(params: ModelParams, dist: InitialDistribution, m: float) -> Atoms:
    """sigma -> 0 limit for the linear-difference kernel: each atom contracts
    toward the conserved mean, b_k -> (alpha*lam*m + omega*b_k) / (alpha*lam + omega),
    with weights unchanged."""
    atoms = _require_atoms(dist)
    rate = params.interaction_rate
    r = rate + params.omega
    if r <= 0:
        raise DegenerateParams("need alpha*lam + omega > 0")
    return Atoms((rate * m + params.omega * atoms.points) / r, atoms.weights.copy())


def slant_mean(t, params: ModelParams, m0: float):
    """Mean opinion under the neighbor-value kernel.

    Solves dm/dt = (alpha*lam - omega) m + omega m0 with m(0) = m0:
    m(t) = m0 [ e^{d t} + omega t expm1(d t)/(d t) ],  d = alpha*lam - omega,
    which degenerates smoothly to m0 (1 + omega t) at d = 0. Vectorized in t.
    """
    t = np.asarray(t, dtype=float)
    d = params.interaction_rate - params.omega
    dt_ = d * t
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(dt_ == 0.0, 1.0, np.expm1(dt_) / np.where(dt_ == 0.0, 1.0, dt_))
    out = m0 * (np.exp(dt_) + params.omega * t * ratio)
    return float(out) if out.ndim == 0 else out


def _slant_rates(params: ModelParams) -> tuple[float, float]:
    rate = params.interaction_rate
    if params.omega <= rate:
        raise DegenerateParams("long-time limit needs omega > alpha*lam")
    return rate, params.omega


def slant_fixed_point(params: ModelParams, m0: float) -> float:
    """Long-time mean under the neighbor-value kernel: the fixed point of the
    mean equation, omega * m0 / (omega - alpha*lam). Needs omega > alpha*lam."""
    rate, omega = _slant_rates(params)
    return omega * m0 / (omega - rate)


def slant_fixed_point_alt(params: ModelParams, m0: float) -> float:
    """Competing closed form for the long-time mean,
    alpha*lam * m0 / (omega - alpha*lam), retained for comparison in the
    slant-mean experiment report; the mean equation's fixed point is
    ``slant_fixed_point``."""
    rate, omega = _slant_rates(params)
    return rate * m0 / (omega - rate)


def steady_state_slant(
    params: ModelParams, dist: InitialDistribution, grid: Grid1D
) -> np.ndarray:
    """Stationary density for the neighbor-value kernel (omega > alpha*lam):
    a Gaussian mixture with component means
    (alpha*lam*m_inf + omega*b_k) / omega and variance sigma^2/(2 omega)."""
    atoms = _require_atoms(dist)
    rate, omega = _slant_rates(params)
    if params.sigma <= 0:
        raise DegenerateParams("need sigma > 0 for a density; use slant_contraction_atoms")
    m_inf = slant_fixed_point(params, atoms.mean())
    var = params.sigma**2 / (2.0 * omega)
    c = grid.centers()
    out = np.zeros(grid.nx)
    for bk, wk in zip(atoms.points, atoms.weights):
        out += wk * _gauss(c, (rate * m_inf + omega * bk) / omega, var)
    return out


def slant_contraction_atoms(params: ModelParams, dist: InitialDistribution) -> Atoms:
    """sigma -> 0 limit of the neighbor-value stationary law: atoms at
    (alpha*lam*m_inf + omega*b_k) / omega with weights unchanged."""
    atoms = _require_atoms(dist)
    rate, omega = _slant_rates(params)
    m_inf = slant_fixed_point(params, atoms.mean())
    return Atoms((rate * m_inf + omega * atoms.points) / omega, atoms.weights.copy())
