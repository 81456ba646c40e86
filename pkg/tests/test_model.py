"""Kernels, initial distributions, parameters and the seeded stream layout."""

import numpy as np
import pytest

from opidyn import (
    Atoms,
    BoundedConfidence,
    LinearDifference,
    ModelParams,
    NeighborValue,
    SeededStream,
    Uniform,
)


# ---------------------------------------------------------------------------
# kernels


def test_kernel_hand_values():
    ld = LinearDifference()
    assert ld(3.0, 1.0) == 2.0
    assert ld(1.0, 3.0) == -2.0

    bc = BoundedConfidence(1.0, 2.0)
    assert bc(5.0, 0.0) == 0.0          # beyond delta2: no influence
    assert bc(0.5, 0.0) == 0.5          # inside delta1: full difference
    assert bc(1.5, 0.0) == 0.75         # ramp: 1.5 * (2-1.5)/(2-1)
    assert bc(-1.5, 0.0) == -0.75

    nv = NeighborValue()
    assert nv(-4.0, 7.0) == -4.0
    assert nv(7.0, -4.0) == 7.0


def test_linear_difference_is_odd():
    rng = np.random.default_rng(7)
    y, x = rng.uniform(-20, 20, (2, 100))
    np.testing.assert_allclose(LinearDifference()(y, x), -LinearDifference()(x, y))


@pytest.mark.parametrize(
    "kernel",
    [LinearDifference(), BoundedConfidence(1.0, 2.0), BoundedConfidence(0.5, 4.0), NeighborValue()],
)
def test_kernel_lipschitz_bounds(kernel):
    rng = np.random.default_rng(42)
    y1, y2, x1, x2 = rng.uniform(-20, 20, (4, 500))
    ly, lx = kernel.lipschitz_y, kernel.lipschitz_x
    assert np.all(np.abs(kernel(y1, x1) - kernel(y2, x1)) <= ly * np.abs(y1 - y2) + 1e-12)
    assert np.all(np.abs(kernel(y1, x1) - kernel(y1, x2)) <= lx * np.abs(x1 - x2) + 1e-12)


def test_bounded_confidence_lipschitz_value():
    # max(1, delta2/(delta2-delta1)) for the ramp
    assert BoundedConfidence(1.0, 2.0).lipschitz_y == 2.0
    assert BoundedConfidence(0.5, 4.0).lipschitz_y == max(1.0, 4.0 / 3.5)


def test_bounded_confidence_validation():
    with pytest.raises(ValueError):
        BoundedConfidence(2.0, 1.0)
    with pytest.raises(ValueError):
        BoundedConfidence(-1.0, 1.0)


def test_kernel_broadcasting():
    y = np.array([[1.0], [2.0]])
    x = np.array([0.0, 10.0])
    assert LinearDifference()(y, x).shape == (2, 2)
    out = NeighborValue()(y, x)
    np.testing.assert_allclose(out, [[1.0, 1.0], [2.0, 2.0]])


# ---------------------------------------------------------------------------
# initial distributions


def test_atoms_validation():
    with pytest.raises(ValueError):
        Atoms([0.0, 1.0], [0.7, 0.7])  # weights must sum to one
    with pytest.raises(ValueError):
        Atoms([0.0, 1.0], [-0.5, 1.5])
    with pytest.raises(ValueError):
        Atoms([], [])
    with pytest.raises(ValueError):
        Atoms([0.0, np.inf], [0.5, 0.5])


def test_atoms_moments_and_support():
    atoms = Atoms.from_pairs([[-10.0, 0.5], [10.0, 0.5]])
    assert atoms.mean() == 0.0
    assert atoms.second_moment() == 100.0
    assert atoms.support() == (-10.0, 10.0)
    skew = Atoms.from_pairs([[-2.0, 0.25], [2.0, 0.75]])
    assert skew.mean() == 1.0
    assert skew.second_moment() == 4.0


def test_atoms_sampling_hits_points_exactly():
    atoms = Atoms.from_pairs([[-10.0, 0.5], [10.0, 0.5]])
    x = atoms.sample(5000, SeededStream(3))
    assert set(np.unique(x)) == {-10.0, 10.0}
    # law of large numbers on the weight
    assert abs(np.mean(x == 10.0) - 0.5) < 0.025


def test_atoms_sampling_weighted():
    atoms = Atoms.from_pairs([[-2.0, 0.25], [2.0, 0.75]])
    x = atoms.sample(200_000, SeededStream(11))
    assert abs(np.mean(x) - 1.0) < 0.01
    assert abs(np.mean(x == 2.0) - 0.75) < 0.005


def test_atoms_discretize_is_identity():
    atoms = Atoms.from_pairs([[-1.0, 0.3], [4.0, 0.7]])
    again = atoms.discretize(100)
    np.testing.assert_array_equal(again.points, atoms.points)
    np.testing.assert_array_equal(again.weights, atoms.weights)


def test_uniform_moments_and_discretize():
    u = Uniform(0.0, 1.0)
    assert u.mean() == 0.5
    np.testing.assert_allclose(u.second_moment(), 1.0 / 3.0)
    two = u.discretize(2)
    np.testing.assert_allclose(two.points, [0.25, 0.75])
    np.testing.assert_allclose(two.weights, [0.5, 0.5])
    # discretized moments converge to the continuous ones
    fine = u.discretize(4000)
    np.testing.assert_allclose(fine.mean(), 0.5, atol=1e-12)
    np.testing.assert_allclose(fine.second_moment(), 1.0 / 3.0, atol=1e-6)


def test_uniform_sampling():
    u = Uniform(-3.0, 5.0)
    x = u.sample(100_000, SeededStream(9))
    assert x.min() >= -3.0 and x.max() < 5.0
    assert abs(np.mean(x) - 1.0) < 0.05
    with pytest.raises(ValueError):
        Uniform(2.0, 2.0)


# ---------------------------------------------------------------------------
# parameters


def test_params_validation():
    p = ModelParams(omega=0.01, alpha=0.02, sigma=0.02, lam=2.0)
    assert p.interaction_rate == 0.04
    with pytest.raises(ValueError):
        ModelParams(omega=-0.1, alpha=0.02, sigma=0.02)
    with pytest.raises(ValueError):
        ModelParams(omega=0.1, alpha=0.02, sigma=0.02, lam=0.0)
    with pytest.raises(ValueError):
        ModelParams(omega=np.nan, alpha=0.02, sigma=0.02)


# ---------------------------------------------------------------------------
# seeded streams


def test_stream_reproducible_and_distinct():
    a = SeededStream(123).substream(1, 5).generator().standard_normal(64)
    b = SeededStream(123).substream(1, 5).generator().standard_normal(64)
    np.testing.assert_array_equal(a, b)
    c = SeededStream(123).substream(1, 6).generator().standard_normal(64)
    d = SeededStream(124).substream(1, 5).generator().standard_normal(64)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_substream_chaining_matches_variadic():
    s = SeededStream(77)
    assert s.substream(2, 9) == s.substream(2).substream(9)


def test_stream_prefix_property():
    # the first n draws of a stream do not depend on how many are taken
    s = SeededStream(5).substream(1, 0)
    long = s.generator().standard_normal(4000)
    short = s.generator().standard_normal(100)
    np.testing.assert_array_equal(long[:100], short)
    pl = s.generator().poisson(0.05, 4000)
    ps = s.generator().poisson(0.05, 100)
    np.testing.assert_array_equal(pl[:100], ps)


def test_stream_validation():
    with pytest.raises(ValueError):
        SeededStream(-1)
    with pytest.raises(ValueError):
        SeededStream(1, 1 << 64)
