"""Particle-level simulation of the opinion dynamics.

Three process layers share one fixed-step Euler scheme with Poisson jump
counts per step:

* interacting -- the N-particle system. Each particle reverts toward its own
  initial opinion and, whenever neighbor j fires (Poisson, rate ``lam``),
  every other particle i is kicked by ``(alpha/N) h(x_j, x_i)`` evaluated at
  pre-step positions. The self term j = i is excluded.
* intermediate -- jumps replaced by their compensator: the same reversion and
  noise, plus the deterministic drift ``(alpha lam / N) sum_j h(x_j, x_i)``
  where the sum runs over all j including i.
* mckean_vlasov -- independent copies driven by an external mean-field drift
  (closed form or a frozen particle pool) instead of each other.

Randomness layout: from the run's ``SeededStream``, each step derives one
substream per role (Brownian increments, jump counts, initial sample) keyed
by ``(role, step)`` and draws a single vector; element j belongs to particle
j. Two runs sharing a stream therefore share Brownian paths particle by
particle (the intermediate process consumes no jump draws), and particle j's
noise does not depend on the population size.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .metrics import EmpiricalMeasure, wasserstein1
from .model import (
    InitialDistribution,
    InteractionKernel,
    LinearDifference,
    ModelParams,
    NeighborValue,
    SeededStream,
)
from .pde import slant_mean

__all__ = [
    "ProcessKind",
    "ParticleSystem",
    "SimConfig",
    "AnalyticLinear",
    "AnalyticSlant",
    "FrozenEmpirical",
    "TrajectoryRecord",
    "CouplingRow",
    "PicardResult",
    "NonFiniteState",
    "IncompatibleDrift",
    "NoConvergenceWarning",
    "step_interacting",
    "step_intermediate",
    "step_mckean_particles",
    "run_trajectory",
    "coupling_experiment",
    "picard_pool_iterate",
]

# Stream roles; see the module docstring for the (role, step) keying contract.
ROLE_BROWNIAN = 1
ROLE_JUMP = 2
ROLE_INIT = 3

MAX_EVENT_RATE_PER_STEP = 0.1  # bound on lam*dt for the per-step Poisson counts


class NonFiniteState(RuntimeError):
    """A particle state stopped being finite (divergence)."""

    def __init__(self, step: int, t: float):
        super().__init__(f"non-finite particle state at step {step} (t={t:g})")
        self.step = step
        self.t = t


class IncompatibleDrift(TypeError):
    """Mean-field drift closed form does not match the kernel in use."""


class NoConvergenceWarning(RuntimeWarning):
    """Fixed-point pool iteration stopped before reaching tolerance."""


class ProcessKind(Enum):
    INTERACTING = "interacting"
    INTERMEDIATE = "intermediate"
    MCKEAN_VLASOV = "mckean_vlasov"


@dataclass
class ParticleSystem:
    """State of one particle population: time, opinions x, anchors b.

    ``b`` holds each particle's initial opinion (its reversion target) and
    never changes. ``steps`` counts Euler steps taken and keys the per-step
    random substreams. A system is advanced by a single owner; step functions
    return new instances.
    """

    t: float
    x: np.ndarray
    b: np.ndarray
    kind: ProcessKind
    steps: int = 0

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.x.ndim != 1 or self.x.shape != self.b.shape or self.x.size == 0:
            raise ValueError("x and b must be equal-length nonempty 1-d arrays")

    @property
    def n(self) -> int:
        return self.x.size

    @classmethod
    def from_initial(
        cls,
        dist: InitialDistribution,
        n: int,
        stream: SeededStream,
        kind: ProcessKind = ProcessKind.INTERACTING,
    ) -> "ParticleSystem":
        """Sample n initial opinions; x and the anchors b start equal."""
        if n < 1:
            raise ValueError("need at least one particle")
        b = dist.sample(n, stream.substream(ROLE_INIT))
        return cls(t=0.0, x=b.copy(), b=b, kind=kind)


@dataclass(frozen=True)
class SimConfig:
    """Fixed-step simulation settings.

    ``dt`` is the Euler step, ``t_end`` the horizon, and every
    ``record_stride``-th step is recorded (step 0 always is). The scheme
    label is fixed; it names the only integrator implemented.
    """

    dt: float
    t_end: float
    record_stride: int = 1
    scheme: str = "euler-maruyama-poisson"

    def __post_init__(self) -> None:
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValueError("dt must be positive and finite")
        if not (math.isfinite(self.t_end) and self.t_end >= 0):
            raise ValueError("t_end must be nonnegative and finite")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")
        if self.scheme != "euler-maruyama-poisson":
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


def _check_rates(params: ModelParams, cfg: SimConfig) -> None:
    if params.lam * cfg.dt > MAX_EVENT_RATE_PER_STEP * (1 + 1e-12):
        raise ValueError(
            f"lam*dt = {params.lam * cfg.dt:g} exceeds {MAX_EVENT_RATE_PER_STEP}; "
            "reduce dt so per-step event counts stay rare"
        )


# ---------------------------------------------------------------------------
# mean-field drifts for the independent-copy layer


@dataclass(frozen=True)
class AnalyticLinear:
    """Closed-form mean field for the linear-difference kernel.

    The population mean is conserved, so the mean-field term is
    ``alpha*lam*(m0 - x)`` with m0 the initial mean.
    """

    m0: float


@dataclass(frozen=True)
class AnalyticSlant:
    """Closed-form mean field for the neighbor-value kernel.

    The mean m(t) solves dm/dt = (alpha*lam - omega) m + omega m0; the
    mean-field term is ``alpha*lam*m(t)``.
    """

    m0: float


@dataclass(frozen=True, eq=False)
class FrozenEmpirical:
    """Mean field from a frozen pool of opinions: ``alpha*lam*mean_p h(pool_p, x)``.

    The pool never reacts to the particles being stepped; callers running a
    fixed-point iteration swap in a new pool only between iterations.
    """

    pool: np.ndarray

    def __post_init__(self) -> None:
        pool = np.asarray(self.pool, dtype=float)
        if pool.ndim != 1 or pool.size == 0:
            raise ValueError("pool must be a nonempty 1-d array")
        object.__setattr__(self, "pool", pool)


MeanFieldDrift = AnalyticLinear | AnalyticSlant | FrozenEmpirical


# ---------------------------------------------------------------------------
# kernel sums


def _jump_interaction(kernel: InteractionKernel, x: np.ndarray, dn: np.ndarray) -> np.ndarray:
    """sum_{j != i} h(x_j, x_i) * dn_j for each i, at pre-step positions."""
    if isinstance(kernel, LinearDifference):
        # sum_j (x_j - x_i) dn_j; the j = i term vanishes on its own.
        return float(np.sum(x * dn)) - x * float(np.sum(dn))
    if isinstance(kernel, NeighborValue):
        return float(np.sum(x * dn)) - x * dn
    total = np.zeros_like(x)
    for j in np.nonzero(dn)[0]:
        total += dn[j] * kernel(x[j], x)
    # remove whatever self-influence the loop added
    total -= dn * kernel(x, x)
    return total


def _mean_interaction(kernel: InteractionKernel, pool: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(1/|pool|) sum_p h(pool_p, x_i) for each i."""
    if isinstance(kernel, LinearDifference):
        return np.mean(pool) - x
    if isinstance(kernel, NeighborValue):
        return np.full_like(x, np.mean(pool))
    out = np.zeros_like(x)
    block = max(1, (1 << 22) // x.size)
    for k in range(0, pool.size, block):
        seg = pool[k : k + block]
        out += kernel(seg[:, None], x[None, :]).sum(axis=0)
    return out / pool.size


def _draw(stream: SeededStream, role: int, step: int):
    return stream.substream(role, step).generator()


# ---------------------------------------------------------------------------
# one-step transitions


def step_interacting(
    sys: ParticleSystem,
    params: ModelParams,
    kernel: InteractionKernel,
    cfg: SimConfig,
    stream: SeededStream,
) -> ParticleSystem:
    """One Euler step of the N-particle jump system.

    Jump counts are Poisson(lam*dt) per particle; a count of k applies the
    kick k times with pre-step positions. Kick, reversion and diffusion all
    use the state at the start of the step.
    """
    if sys.kind is not ProcessKind.INTERACTING:
        raise ValueError(f"expected an interacting system, got {sys.kind}")
    _check_rates(params, cfg)
    x, b, n = sys.x, sys.b, sys.n
    dn = _draw(stream, ROLE_JUMP, sys.steps).poisson(params.lam * cfg.dt, n)
    xi = _draw(stream, ROLE_BROWNIAN, sys.steps).standard_normal(n)
    kick = (params.alpha / n) * _jump_interaction(kernel, x, dn.astype(float))
    x_new = x + params.omega * (b - x) * cfg.dt + kick + params.sigma * math.sqrt(cfg.dt) * xi
    return ParticleSystem(sys.t + cfg.dt, x_new, b, sys.kind, sys.steps + 1)


def step_intermediate(
    sys: ParticleSystem,
    params: ModelParams,
    kernel: InteractionKernel,
    dist: InitialDistribution,
    cfg: SimConfig,
    stream: SeededStream,
) -> ParticleSystem:
    """One Euler step of the compensated (jump-free) system.

    The interaction enters as the deterministic drift
    ``(alpha lam / N) sum_j h(x_j, x_i)`` over all j, including j = i; the
    anchors b are the particles' own initial opinions, drawn from ``dist``.
    No jump randomness is consumed, so a run sharing a stream with an
    interacting run sees the identical Brownian increments.
    """
    if sys.kind is not ProcessKind.INTERMEDIATE:
        raise ValueError(f"expected an intermediate system, got {sys.kind}")
    if not isinstance(dist, InitialDistribution):
        raise TypeError("dist must be an InitialDistribution")
    _check_rates(params, cfg)
    x, b, n = sys.x, sys.b, sys.n
    xi = _draw(stream, ROLE_BROWNIAN, sys.steps).standard_normal(n)
    drift = params.omega * (b - x) + params.interaction_rate * _mean_interaction(kernel, x, x)
    x_new = x + drift * cfg.dt + params.sigma * math.sqrt(cfg.dt) * xi
    return ParticleSystem(sys.t + cfg.dt, x_new, b, sys.kind, sys.steps + 1)


def step_mckean_particles(
    sys: ParticleSystem,
    params: ModelParams,
    kernel: InteractionKernel,
    drift: MeanFieldDrift,
    cfg: SimConfig,
    stream: SeededStream,
) -> ParticleSystem:
    """One Euler step of independent copies under an external mean field."""
    if sys.kind is not ProcessKind.MCKEAN_VLASOV:
        raise ValueError(f"expected a mean-field system, got {sys.kind}")
    _check_rates(params, cfg)
    x, b, n = sys.x, sys.b, sys.n
    rate = params.interaction_rate
    if isinstance(drift, AnalyticLinear):
        if not isinstance(kernel, LinearDifference):
            raise IncompatibleDrift("AnalyticLinear requires the linear-difference kernel")
        field = rate * (drift.m0 - x)
    elif isinstance(drift, AnalyticSlant):
        if not isinstance(kernel, NeighborValue):
            raise IncompatibleDrift("AnalyticSlant requires the neighbor-value kernel")
        field = np.full_like(x, rate * slant_mean(sys.t, params, drift.m0))
    elif isinstance(drift, FrozenEmpirical):
        field = rate * _mean_interaction(kernel, drift.pool, x)
    else:
        raise IncompatibleDrift(f"unknown drift {drift!r}")
    xi = _draw(stream, ROLE_BROWNIAN, sys.steps).standard_normal(n)
    x_new = x + (field + params.omega * (b - x)) * cfg.dt + params.sigma * math.sqrt(cfg.dt) * xi
    return ParticleSystem(sys.t + cfg.dt, x_new, b, sys.kind, sys.steps + 1)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryRecord:
    """Recorded summaries of one run: per-record time, mean, second moment,
    min and max, optional full snapshots, and the final state."""

    times: np.ndarray
    means: np.ndarray
    second_moments: np.ndarray
    mins: np.ndarray
    maxs: np.ndarray
    snapshots: list[np.ndarray] | None
    final: ParticleSystem


def run_trajectory(
    initial: ParticleSystem,
    params: ModelParams,
    kernel: InteractionKernel,
    cfg: SimConfig,
    stream: SeededStream,
    *,
    dist: InitialDistribution | None = None,
    drift: MeanFieldDrift | None = None,
    keep_snapshots: bool = False,
) -> TrajectoryRecord:
    """Run one system from t=0 to t_end, recording every record_stride steps.

    The stepper is chosen by ``initial.kind``; intermediate runs need
    ``dist`` and mean-field runs need ``drift``. Finiteness is checked at
    every recorded step and a NonFiniteState names the failing step.
    """
    kind = initial.kind
    if kind is ProcessKind.INTERACTING:
        def advance(s):
            return step_interacting(s, params, kernel, cfg, stream)
    elif kind is ProcessKind.INTERMEDIATE:
        if dist is None:
            raise ValueError("intermediate runs require dist")
        def advance(s):
            return step_intermediate(s, params, kernel, dist, cfg, stream)
    elif kind is ProcessKind.MCKEAN_VLASOV:
        if drift is None:
            raise ValueError("mean-field runs require drift")
        def advance(s):
            return step_mckean_particles(s, params, kernel, drift, cfg, stream)
    else:  # pragma: no cover
        raise ValueError(f"unknown process kind {kind}")

    _check_rates(params, cfg)
    times, means, m2s, mins, maxs = [], [], [], [], []
    snaps: list[np.ndarray] | None = [] if keep_snapshots else None

    def record(step: int, s: ParticleSystem) -> None:
        x = s.x
        if not np.isfinite(x).all():
            raise NonFiniteState(step, step * cfg.dt)
        times.append(step * cfg.dt)
        means.append(np.sum(x) / s.n)
        m2s.append(np.sum(x * x) / s.n)
        mins.append(x.min())
        maxs.append(x.max())
        if snaps is not None:
            snaps.append(x.copy())

    sys = initial
    record(0, sys)
    for i in range(1, cfg.n_steps + 1):
        sys = advance(sys)
        if i % cfg.record_stride == 0:
            record(i, sys)
    return TrajectoryRecord(
        times=np.array(times),
        means=np.array(means),
        second_moments=np.array(m2s),
        mins=np.array(mins),
        maxs=np.array(maxs),
        snapshots=snaps,
        final=sys,
    )


# ---------------------------------------------------------------------------
# coupled X/Y error experiment


@dataclass(frozen=True)
class CouplingRow:
    """Coupling error for one population size: per-seed values of
    mean_i sup_t |X_i(t) - Y_i(t)| and their average."""

    n: int
    sup_errors: tuple[float, ...]
    mean_sup_error: float


def coupling_experiment(
    params: ModelParams,
    kernel: InteractionKernel,
    dist: InitialDistribution,
    cfg: SimConfig,
    n_list: list[int],
    seeds: list[int],
) -> list[CouplingRow]:
    """Pathwise distance between the jump system and its compensated twin.

    For each (n, seed) the two systems start from the same sample and share
    Brownian increments particle by particle; only the jump randomness
    differs. The sup over all steps of |X_i - Y_i| is tracked per particle
    and averaged. Returns one row per n, ordered as given.
    """
    if not n_list or not seeds:
        raise ValueError("n_list and seeds must be nonempty")
    rows = []
    for n in n_list:
        errs = []
        for seed in seeds:
            stream = SeededStream(seed)
            sx = ParticleSystem.from_initial(dist, n, stream, ProcessKind.INTERACTING)
            sy = ParticleSystem(0.0, sx.b.copy(), sx.b, ProcessKind.INTERMEDIATE)
            gap = np.zeros(n)
            for i in range(cfg.n_steps):
                sx = step_interacting(sx, params, kernel, cfg, stream)
                sy = step_intermediate(sy, params, kernel, dist, cfg, stream)
                np.maximum(gap, np.abs(sx.x - sy.x), out=gap)
            if not np.isfinite(gap).all():
                raise NonFiniteState(cfg.n_steps, cfg.t_end)
            errs.append(float(np.sum(gap) / n))
        rows.append(CouplingRow(n=n, sup_errors=tuple(errs), mean_sup_error=float(np.mean(errs))))
    return rows


# ---------------------------------------------------------------------------
# fixed-point iteration on a frozen pool


@dataclass
class PicardResult:
    """Terminal pool of the fixed-point iteration, the W1 distance between
    successive terminal pools per round, and whether tolerance was met."""

    pool: np.ndarray
    w1_history: tuple[float, ...]
    converged: bool


def picard_pool_iterate(
    params: ModelParams,
    kernel: InteractionKernel,
    dist: InitialDistribution,
    cfg: SimConfig,
    pool_size: int,
    iterations: int,
    stream: SeededStream,
    tol_w1: float | None = None,
) -> PicardResult:
    """Iterate the mean-field map on a frozen empirical pool.

    Round r simulates ``pool_size`` independent copies whose mean-field term
    at each step is read from round r-1's pool at the matching time (round 0
    is the initial sample held fixed in time). Pools only change between
    rounds. Iteration stops once the W1 distance between successive terminal
    pools drops below ``tol_w1`` (default: 1e-3 times the width of the
    initial support); if it never does, the last pool is returned with
    ``converged=False`` and a NoConvergenceWarning.
    """
    if pool_size < 1 or iterations < 1:
        raise ValueError("pool_size and iterations must be >= 1")
    if tol_w1 is None:
        lo, hi = dist.support()
        tol_w1 = 1e-3 * (hi - lo) if hi > lo else 1e-3
    n_steps = cfg.n_steps
    x0 = dist.sample(pool_size, stream.substream(ROLE_INIT))
    prev = np.broadcast_to(x0, (n_steps + 1, pool_size)).copy()
    history: list[float] = []
    converged = False
    for _ in range(iterations):
        sys = ParticleSystem(0.0, x0.copy(), x0.copy(), ProcessKind.MCKEAN_VLASOV)
        pools = np.empty_like(prev)
        pools[0] = x0
        for s in range(1, n_steps + 1):
            drift = FrozenEmpirical(prev[s - 1])
            sys = step_mckean_particles(sys, params, kernel, drift, cfg, stream)
            pools[s] = sys.x
        if not np.isfinite(pools[-1]).all():
            raise NonFiniteState(n_steps, cfg.t_end)
        history.append(wasserstein1(EmpiricalMeasure(pools[-1]), EmpiricalMeasure(prev[-1])))
        prev = pools
        if history[-1] < tol_w1:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"pool iteration stopped at W1 {history[-1]:.3g} >= tolerance {tol_w1:.3g}",
            NoConvergenceWarning,
        )
    return PicardResult(pool=prev[-1].copy(), w1_history=tuple(history), converged=converged)
