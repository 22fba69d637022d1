import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.errors import ParameterDomainError, SpecError
from src.models.family import make_tabulated
from src.models.space import SampleSpace
from src.services.expectation import (
    MC_CHUNK_SIZE,
    ExpectationMethod,
    draw,
    expect,
    expect_pair,
    weighted_sample,
)

EXACT = ExpectationMethod.exact()


def first(x):
    return x[:, 0]


def test_exact_mass_is_one(canonical_families):
    for family in canonical_families.values():
        assert weighted_sample(family, family.center(), EXACT).total_mass == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("name", ["gaussian_mean", "gaussian_both", "poisson"])
def test_constants_integrate_exactly(canonical_families, name):
    family = canonical_families[name]
    assert expect(lambda x: np.full(x.shape[0], 5.0), family, family.center(), EXACT) == 5.0


@pytest.mark.parametrize("mu", [-1.0, 0.0, 2.0])
def test_gaussian_mean(gaussian_mean, mu):
    assert expect(first, gaussian_mean, [mu], EXACT) == pytest.approx(mu, abs=1e-9)


def test_bernoulli_mean(bernoulli):
    assert expect(first, bernoulli, [0.3], EXACT) == pytest.approx(0.3, rel=1e-15)


def test_expect_pair_shares_points(poisson):
    mean_x, mean_sq, mean_cube = expect_pair(first, lambda x: x[:, 0] ** 2, poisson, [4.0], EXACT)
    assert mean_x == pytest.approx(4.0, rel=1e-10)
    assert mean_sq == pytest.approx(4.0 + 16.0, rel=1e-10)
    # third raw moment: lambda^3 + 3 lambda^2 + lambda
    assert mean_cube == pytest.approx(64.0 + 48.0 + 4.0, rel=1e-10)


def test_zero_density_points_never_reach_g():
    space = SampleSpace.discrete([0.0, 1.0, 2.0])
    family = make_tabulated(space, {"p": [0.0, 1.0]}, np.array([[0.5, 0.5, 0.0], [0.2, 0.8, 0.0]]))

    def g(x):
        assert np.all(x[:, 0] != 2.0)
        return np.ones(x.shape[0])

    assert expect(g, family, [0.5], EXACT) == pytest.approx(1.0)


def test_exact_on_oversized_space_is_rejected(two_channel, monkeypatch):
    from src.config import get_settings

    monkeypatch.setattr(get_settings(), "max_exact_points", 1000)
    with pytest.raises(ParameterDomainError, match="use Monte Carlo"):
        weighted_sample(two_channel, [0.0], EXACT)


def test_monte_carlo_is_a_function_of_seed_and_size(gaussian_mean):
    method = ExpectationMethod.monte_carlo(3 * MC_CHUNK_SIZE + 17, seed=11)
    a = draw(gaussian_mean, [0.5], method)
    b = draw(gaussian_mean, [0.5], method)
    assert a.shape == (3 * MC_CHUNK_SIZE + 17, 1)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, draw(gaussian_mean, [0.5], method.with_seed(12)))


@pytest.mark.parametrize("workers", [2, 3, 8])
def test_monte_carlo_does_not_depend_on_workers(two_channel, workers):
    single = ExpectationMethod.monte_carlo(100_000, seed=5, workers=1)
    parallel = ExpectationMethod.monte_carlo(100_000, seed=5, workers=workers)
    assert np.array_equal(draw(two_channel, [0.3], single), draw(two_channel, [0.3], parallel))
    assert expect(first, two_channel, [0.3], single) == expect(first, two_channel, [0.3], parallel)


@pytest.mark.parametrize(
    "name,p,g",
    [
        ("poisson", [4.0], first),
        ("gaussian_both", [0.5, 1.5], lambda x: x[:, 0] ** 2),
        ("categorical3", [0.2, 0.3], first),
    ],
)
def test_monte_carlo_agrees_with_exact_across_seeds(canonical_families, name, p, g):
    family = canonical_families[name]
    n = 100_000
    exact = expect(g, family, p, EXACT)
    sd = np.sqrt(expect(lambda x: (g(x) - exact) ** 2, family, p, EXACT))
    hits = sum(
        abs(expect(g, family, p, ExpectationMethod.monte_carlo(n, seed=seed)) - exact) <= 5 * sd / np.sqrt(n)
        for seed in range(50)
    )
    assert hits >= 0.99 * 50


def test_monte_carlo_masses_are_uniform(categorical3):
    sample = weighted_sample(categorical3, [0.2, 0.3], ExpectationMethod.monte_carlo(1000, seed=0))
    assert sample.size == 1000
    assert np.all(sample.masses == 1.0 / 1000)
    assert set(np.unique(sample.points)) <= {1.0, 2.0, 3.0}


@pytest.mark.parametrize("kwargs", [{"mc_samples": 0}, {"seed": -1}, {"seed": 2**64}])
def test_method_validation(kwargs):
    with pytest.raises(SpecError):
        ExpectationMethod(**kwargs)


@settings(max_examples=50, deadline=None)
@given(
    a=st.floats(-10, 10, allow_nan=False),
    b=st.floats(-10, 10, allow_nan=False),
    rate=st.floats(0.5, 9.5),
)
def test_expectation_is_linear(poisson, a, b, rate):
    def g(x):
        return np.sqrt(x[:, 0])

    def h(x):
        return np.cos(x[:, 0])

    combined = expect(lambda x: a * g(x) + b * h(x), poisson, [rate], EXACT)
    separate = a * expect(g, poisson, [rate], EXACT) + b * expect(h, poisson, [rate], EXACT)
    assert combined == pytest.approx(separate, abs=1e-9)
