import math
import random

import pytest

from stagesim.dists import Distribution, DistributionError


def test_constant():
    d = Distribution.constant(0.3)
    assert d.sample(0.5) == 0.3
    assert d.sample_int(0.99) == 0
    assert d.mean() == 0.3


def test_uniform_float_bounds():
    d = Distribution.uniform(0.1, 0.4)
    rng = random.Random(0)
    for _ in range(200):
        x = d.sample(rng.uniform(1e-12, 1.0))
        assert 0.1 <= x <= 0.4
    assert d.mean() == pytest.approx(0.25)


def test_uniform_degenerate():
    d = Distribution.uniform(0.1, 0.1)
    assert d.sample(0.7) == pytest.approx(0.1)


def test_uniform_int_covers_inclusive_range():
    d = Distribution.uniform(3, 5)
    rng = random.Random(1)
    seen = {d.sample_int(rng.uniform(1e-12, 1.0)) for _ in range(500)}
    seen.add(d.sample_int(1.0))
    assert seen == {3, 4, 5}
    assert d.mean() == 4.0


def test_geometric_inversion_boundaries():
    d = Distribution.geometric(0.5, cap=10)
    # u = 1 is the most likely corner: first trial succeeds
    assert d.sample_int(1.0) == 1
    # tiny u lands deep in the tail, clipped by the cap
    assert d.sample_int(1e-12) == 10
    assert Distribution.geometric(1.0, cap=5).sample_int(0.2) == 1


def test_geometric_mean_matches_enumeration():
    p, cap = 0.3, 6
    d = Distribution.geometric(p, cap)
    # oracle: E[min(G, cap)] from the geometric pmf directly
    expected = sum(k * (1 - p) ** (k - 1) * p for k in range(1, cap)) + cap * (1 - p) ** (cap - 1)
    assert d.mean() == pytest.approx(expected, abs=1e-12)


def test_geometric_sampling_frequency():
    p, cap = 0.5, 8
    d = Distribution.geometric(p, cap)
    rng = random.Random(2)
    n = 20000
    ones = sum(1 for _ in range(n) if d.sample_int(rng.uniform(1e-12, 1.0)) == 1)
    assert ones / n == pytest.approx(p, abs=0.02)


def test_empirical():
    d = Distribution.empirical([1.0, 2.0, 4.0])
    assert d.mean() == pytest.approx(7.0 / 3.0)
    rng = random.Random(3)
    seen = {d.sample(rng.uniform(1e-12, 1.0)) for _ in range(200)}
    assert seen == {1.0, 2.0, 4.0}
    assert d.sample(1.0) == 4.0  # top of the unit interval maps to the last value


def test_from_spec_round_trip():
    for d in (
        Distribution.constant(2.5),
        Distribution.uniform(1, 9),
        Distribution.geometric(0.4, 7),
        Distribution.empirical([1, 2]),
    ):
        assert Distribution.from_spec(d.to_spec()) == d


@pytest.mark.parametrize(
    "spec",
    [
        {"kind": "nope"},
        {"kind": "uniform", "low": 1},
        {"kind": "uniform", "low": 1, "high": 2, "p": 0.5},
        {"low": 1, "high": 2},
        "uniform",
    ],
)
def test_from_spec_rejects_malformed(spec):
    with pytest.raises(DistributionError):
        Distribution.from_spec(spec)


@pytest.mark.parametrize(
    "build",
    [
        lambda: Distribution.uniform(2, 1),
        lambda: Distribution.geometric(0.0, 5),
        lambda: Distribution.geometric(0.5, 0),
        lambda: Distribution.empirical([]),
        lambda: Distribution("weird"),
    ],
)
def test_invalid_parameters(build):
    with pytest.raises(DistributionError):
        build()


def test_single_draw_discipline():
    # every kind consumes exactly the one uniform it is given
    for d in (
        Distribution.constant(1.0),
        Distribution.uniform(0, 10),
        Distribution.geometric(0.5, 4),
        Distribution.empirical([5.0, 6.0]),
    ):
        assert d.sample(0.37) == d.sample(0.37)
        assert d.sample_int(0.37) == d.sample_int(0.37)


def test_geometric_log_inversion_math():
    # P(k <= K) for the inversion: u >= (1-p)^K
    p = 0.25
    d = Distribution.geometric(p, cap=50)
    for k in (1, 2, 5):
        u_edge = (1 - p) ** k
        assert d.sample_int(u_edge + 1e-12) == k
        assert d.sample_int(u_edge - 1e-12) == k + 1
    assert math.isclose(d.mean(), (1 - (1 - p) ** 50) / p)
