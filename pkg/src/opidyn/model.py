"""Core model components for self-exciting opinion dynamics.

This module holds the pieces shared by every layer of the toolkit: the
dynamical parameters, the pairwise interaction kernels, the initial opinion
distributions, and the seeded random streams that make every simulation
bit-reproducible.

The dynamics move N scalar opinions. Each particle reverts toward its own
initial opinion at rate ``omega``, diffuses with volatility ``sigma``, and
receives kicks of size ``(alpha/N) h(y, x)`` whenever a neighbor at opinion
``y`` fires; firing times are Poisson with rate ``lam``. Kernels follow the
convention ``h(y, x)`` = influence of a neighbor at ``y`` on a particle at
``x``.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SeededStream",
    "ModelParams",
    "InteractionKernel",
    "LinearDifference",
    "BoundedConfidence",
    "NeighborValue",
    "InitialDistribution",
    "Atoms",
    "Uniform",
]

_MASK64 = (1 << 64) - 1


def _mix64(a: int, b: int) -> int:
    """Combine two 64-bit words into one, splitmix64-style."""
    z = (a + 0x9E3779B97F4A7C15 * (b + 0x632BE59BD9B4E019)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class SeededStream:
    """Counter-based random stream identified by ``(seed, stream_id)``.

    Streams are cheap value objects; the only way to branch randomness is
    ``substream``, which mixes extra indices into the stream id. Identical
    ``(seed, stream_id)`` pairs always reproduce the same draw sequence, and
    distinct stream ids are statistically independent (distinct Philox keys).

    Drivers that need one value per particle per step derive a substream per
    (role, step) and draw a single vector; element ``j`` of that vector is
    particle ``j``'s draw. Because the first N draws of a keyed stream do not
    depend on N, particle ``j``'s noise is identical across runs that differ
    only in population size, which is what the coupling experiments rely on.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.seed <= _MASK64):
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if not (0 <= self.stream_id <= _MASK64):
            raise ValueError("stream_id must fit in an unsigned 64-bit integer")

    def substream(self, *indices: int) -> "SeededStream":
        """Derive an independent stream by mixing indices into the id."""
        sid = self.stream_id
        for ix in indices:
            sid = _mix64(sid, ix & _MASK64)
        return SeededStream(self.seed, sid)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the origin of this stream."""
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class ModelParams:
    """Dynamical rates: reversion ``omega``, kick size ``alpha``, diffusion
    ``sigma``, and neighbor firing rate ``lam``.

    The effective interaction rate is always the product ``alpha * lam``;
    the two are kept separate so event counts and kick sizes can be varied
    independently.
    """

    omega: float
    alpha: float
    sigma: float
    lam: float = 1.0

    def __post_init__(self) -> None:
        for name in ("omega", "alpha", "sigma", "lam"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v!r}")
        if self.omega < 0 or self.alpha < 0 or self.sigma < 0:
            raise ValueError("omega, alpha and sigma must be nonnegative")
        if self.lam <= 0:
            raise ValueError("lam must be positive")

    @property
    def interaction_rate(self) -> float:
        """alpha * lam, the mean interaction drift per unit time."""
        return self.alpha * self.lam


class InteractionKernel(ABC):
    """Pairwise influence ``h(y, x)`` of a neighbor at ``y`` on opinion ``x``.

    Implementations are vectorized over numpy arrays with broadcasting and
    expose Lipschitz constants ``lipschitz_y`` (in the neighbor argument) and
    ``lipschitz_x`` (in the own-opinion argument), so that
    ``|h(y1,x1) - h(y2,x2)| <= lipschitz_y |y1-y2| + lipschitz_x |x1-x2|``.
    """

    @abstractmethod
    def __call__(self, y, x):
        """Evaluate h(y, x) with numpy broadcasting."""

    @property
    @abstractmethod
    def lipschitz_y(self) -> float: ...

    @property
    @abstractmethod
    def lipschitz_x(self) -> float: ...


@dataclass(frozen=True)
class LinearDifference(InteractionKernel):
    """h(y, x) = y - x: attraction toward the firing neighbor."""

    def __call__(self, y, x):
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        return y - x

    @property
    def lipschitz_y(self) -> float:
        return 1.0

    @property
    def lipschitz_x(self) -> float:
        return 1.0


@dataclass(frozen=True)
class BoundedConfidence(InteractionKernel):
    """h(y, x) = (y - x) k(|y - x|) with a piecewise-linear cutoff ramp.

    The ramp k is 1 for separations below ``delta1``, 0 above ``delta2`` and
    linear in between, so only opinions within the confidence window exert
    influence. Requires ``0 < delta1 < delta2``.
    """

    delta1: float
    delta2: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.delta1) and math.isfinite(self.delta2)):
            raise ValueError("delta1 and delta2 must be finite")
        if not (0.0 < self.delta1 < self.delta2):
            raise ValueError("need 0 < delta1 < delta2")

    def __call__(self, y, x):
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        d = y - x
        ramp = (self.delta2 - np.abs(d)) / (self.delta2 - self.delta1)
        return d * np.clip(ramp, 0.0, 1.0)

    @property
    def lipschitz_y(self) -> float:
        # |d/du (u k(|u|))| peaks at u = delta2 on the ramp segment.
        return max(1.0, self.delta2 / (self.delta2 - self.delta1))

    @property
    def lipschitz_x(self) -> float:
        return self.lipschitz_y


@dataclass(frozen=True)
class NeighborValue(InteractionKernel):
    """h(y, x) = y: the receiver adopts a copy of the firing neighbor's
    opinion as a kick, independent of its own state."""

    def __call__(self, y, x):
        y, x = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(x, dtype=float))
        return y.copy()

    @property
    def lipschitz_y(self) -> float:
        return 1.0

    @property
    def lipschitz_x(self) -> float:
        return 0.0


class InitialDistribution(ABC):
    """Distribution of initial opinions; bounded support by construction."""

    @abstractmethod
    def mean(self) -> float: ...

    @abstractmethod
    def second_moment(self) -> float: ...

    @abstractmethod
    def support(self) -> tuple[float, float]:
        """(lo, hi) bounds of the support."""

    @abstractmethod
    def sample(self, n: int, stream: SeededStream) -> np.ndarray:
        """Draw n values; draw j is a deterministic function of uniform j."""

    @abstractmethod
    def discretize(self, k: int) -> "Atoms":
        """Weighted-atom approximation with at most k atoms, exact mean."""


@dataclass(frozen=True, eq=False)
class Atoms(InitialDistribution):
    """Finite weighted mixture of point masses ``sum_k w_k delta(b_k)``.

    Weights must be positive and sum to 1 within 1e-12.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        pts = np.atleast_1d(np.asarray(self.points, dtype=float))
        wts = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if pts.ndim != 1 or wts.shape != pts.shape or pts.size == 0:
            raise ValueError("points and weights must be equal-length 1-d sequences")
        if not np.all(np.isfinite(pts)):
            raise ValueError("atom locations must be finite")
        if np.any(wts <= 0):
            raise ValueError("atom weights must be positive")
        if abs(wts.sum() - 1.0) > 1e-12:
            raise ValueError("atom weights must sum to 1 within 1e-12")
        pts.flags.writeable = False
        wts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)

    @classmethod
    def from_pairs(cls, pairs) -> "Atoms":
        pairs = list(pairs)
        return cls(np.array([p for p, _ in pairs]), np.array([w for _, w in pairs]))

    def mean(self) -> float:
        return float(np.sum(self.weights * self.points))

    def second_moment(self) -> float:
        return float(np.sum(self.weights * self.points**2))

    def support(self) -> tuple[float, float]:
        return float(self.points.min()), float(self.points.max())

    def sample(self, n: int, stream: SeededStream) -> np.ndarray:
        u = stream.generator().random(n)
        cum = np.cumsum(self.weights)
        idx = np.searchsorted(cum, u, side="right")
        return self.points[np.minimum(idx, self.points.size - 1)]

    def discretize(self, k: int) -> "Atoms":
        # Already atomic: pass through unchanged.
        return self


@dataclass(frozen=True)
class Uniform(InitialDistribution):
    """Uniform distribution on [lo, hi]."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError("lo and hi must be finite")
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")

    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def second_moment(self) -> float:
        m = self.mean()
        return m * m + (self.hi - self.lo) ** 2 / 12.0

    def support(self) -> tuple[float, float]:
        return self.lo, self.hi

    def sample(self, n: int, stream: SeededStream) -> np.ndarray:
        u = stream.generator().random(n)
        return self.lo + (self.hi - self.lo) * u

    def discretize(self, k: int) -> Atoms:
        if k < 1:
            raise ValueError("need at least one atom")
        # Mid-quantile atoms with equal weights; mean is preserved exactly.
        q = (np.arange(k) + 0.5) / k
        return Atoms(self.lo + (self.hi - self.lo) * q, np.full(k, 1.0 / k))
