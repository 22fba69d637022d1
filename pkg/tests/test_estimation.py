import numpy as np
import pytest

from src.errors import SpecError
from src.schemas.report import BoundReport
from src.services.estimation import (
    Estimator,
    bias,
    dtheta_via_estimator,
    mc_verify,
    probe_grid,
    proof_chain_check,
    variance,
    verify_bound,
)
from src.services.expectation import ExpectationMethod
from src.services.geometry import ParameterFunction
from src.services.score import TangentVector

EXACT = ExpectationMethod.exact()
THIRD = 1.0 / 3.0


def expression(source, family):
    return Estimator.from_expression(source, family.space.coordinate_names)


def theta_of(source, family):
    return ParameterFunction.from_expression(source, family.coordinate_names)


@pytest.fixture(scope="module")
def efficient_cases(gaussian_mean, bernoulli, poisson, categorical3, two_channel):
    """(family, estimator, theta, p) tuples whose estimator attains the bound."""
    return [
        (gaussian_mean, expression("x", gaussian_mean), theta_of("mu", gaussian_mean), [0.4]),
        (bernoulli, expression("x", bernoulli), theta_of("p", bernoulli), [0.3]),
        (poisson, expression("x", poisson), theta_of("lambda", poisson), [4.0]),
        (categorical3, Estimator.indicator(1.0), theta_of("p1", categorical3), [THIRD, THIRD]),
        (two_channel, expression("0.8*x1 + 0.2*x2", two_channel), theta_of("mu", two_channel), [0.0]),
    ]


@pytest.mark.parametrize("mu", [-1.0, 0.0, 2.0])
def test_sample_mean_is_unbiased(gaussian_mean, mu):
    assert abs(bias(expression("x", gaussian_mean), theta_of("mu", gaussian_mean), gaussian_mean, [mu])) <= 1e-9


def test_squared_observation_is_unbiased_for_squared_mean(gaussian_mean):
    estimator, theta = expression("x^2 - 1", gaussian_mean), theta_of("mu^2", gaussian_mean)
    for p in probe_grid(gaussian_mean):
        assert abs(bias(estimator, theta, gaussian_mean, p)) <= 1e-8


def test_shifted_estimator_has_constant_bias(bernoulli):
    assert bias(expression("x + 0.1", bernoulli), theta_of("p", bernoulli), bernoulli, [0.3]) == pytest.approx(0.1, abs=1e-15)


def test_variance_closed_forms(gaussian_mean):
    assert variance(Estimator.constant(2.0), gaussian_mean, [0.5]).variance == 0.0
    assert variance(expression("x", gaussian_mean), gaussian_mean, [0.5]).variance == pytest.approx(1.0, abs=1e-8)
    result = variance(expression("x^2 - 1", gaussian_mean), gaussian_mean, [1.5])
    assert result.variance == pytest.approx(11.0, abs=1e-6)
    assert result.std_error is None


def test_monte_carlo_variance_reports_standard_error(gaussian_mean):
    result = variance(expression("x", gaussian_mean), gaussian_mean, [0.5], ExpectationMethod.monte_carlo(100_000, 1))
    # Var of the sample variance for a unit normal is 2 / n
    assert result.std_error == pytest.approx(np.sqrt(2.0 / 100_000), rel=0.1)
    assert result.variance == pytest.approx(1.0, abs=5 * result.std_error)


def test_variance_needs_enough_samples(gaussian_mean):
    with pytest.raises(SpecError, match="at least 1000"):
        variance(expression("x", gaussian_mean), gaussian_mean, [0.0], ExpectationMethod.monte_carlo(10, 0))


def test_indicator_needs_discrete_space(gaussian_mean):
    with pytest.raises(SpecError, match="discrete"):
        variance(Estimator.indicator(1.0), gaussian_mean, [0.0])


def test_sample_mean_attains_gaussian_bound(gaussian_mean):
    report = verify_bound(expression("x", gaussian_mean), theta_of("mu", gaussian_mean), gaussian_mean, [0.0])
    assert isinstance(report, BoundReport)
    assert report.variance == pytest.approx(1.0, abs=1e-8)
    assert report.bound == pytest.approx(1.0, abs=1e-8)
    assert report.efficiency == pytest.approx(1.0, abs=1e-7)
    assert report.passed and not report.biased
    assert report.method.kind == "exact"
    assert report.family == gaussian_mean.name
    assert report.coordinates == ["mu"]


def test_squared_mean_report(gaussian_mean):
    report = verify_bound(expression("x^2 - 1", gaussian_mean), theta_of("mu^2", gaussian_mean), gaussian_mean, [1.5])
    assert report.variance == pytest.approx(11.0, abs=1e-6)
    assert report.bound == pytest.approx(9.0, abs=1e-6)
    assert report.theta_value == 2.25
    assert report.passed


def test_two_channel_average_is_inefficient(two_channel):
    report = verify_bound(expression("(x1 + x2) / 2", two_channel), theta_of("mu", two_channel), two_channel, [0.0])
    assert report.variance == pytest.approx(1.25, abs=1e-6)
    assert report.bound == pytest.approx(0.8, abs=1e-6)
    assert report.slack == pytest.approx(0.45, abs=1e-6)
    assert report.passed


def test_efficient_estimators_saturate_the_bound(efficient_cases):
    for family, estimator, theta, p in efficient_cases:
        report = verify_bound(estimator, theta, family, p)
        assert report.slack >= -1e-7
        assert abs(report.slack) <= 1e-6, family.name
        assert report.efficiency == pytest.approx(1.0, abs=1e-6)


def test_biased_estimator_suppresses_the_bound(gaussian_mean):
    report = verify_bound(expression("x + 0.1", gaussian_mean), theta_of("mu", gaussian_mean), gaussian_mean, [0.0])
    assert report.biased
    assert not report.bound_applicable
    assert not report.passed
    assert report.bias == pytest.approx(0.1, abs=1e-9)
    assert report.max_probe_bias == pytest.approx(0.1, abs=1e-9)


@pytest.mark.parametrize("source,p", [("x", [0.0]), ("x^2 - 1", [1.5]), ("3", [0.7])])
def test_dtheta_via_estimator_gaussian(gaussian_mean, source, p):
    lhs, rhs = dtheta_via_estimator(expression(source, gaussian_mean), gaussian_mean, p, TangentVector(p, [1.0]))
    assert lhs == pytest.approx(rhs, abs=1e-6)


def test_dtheta_via_estimator_matrix(efficient_cases):
    for family, estimator, _, p in efficient_cases:
        for i in range(family.k):
            lhs, rhs = dtheta_via_estimator(estimator, family, p, TangentVector.basis(p, i))
            assert lhs == pytest.approx(rhs, abs=1e-6)
    bernoulli_case = efficient_cases[1]
    lhs, rhs = dtheta_via_estimator(bernoulli_case[1], bernoulli_case[0], [0.3], TangentVector([0.3], [1.0]))
    assert lhs == pytest.approx(1.0, abs=1e-6)
    assert rhs == pytest.approx(1.0, abs=1e-6)


def test_constant_estimator_has_no_derivative(poisson):
    lhs, rhs = dtheta_via_estimator(Estimator.constant(5.0), poisson, [4.0], TangentVector([4.0], [1.0]))
    assert lhs == 0.0
    assert abs(rhs) <= 1e-9


def test_proof_chain_is_tight_when_efficient(efficient_cases):
    for family, estimator, theta, p in efficient_cases:
        ledger = proof_chain_check(estimator, theta, family, p)
        assert ledger.holds, ledger.violations
        assert ledger.b == pytest.approx(ledger.a, abs=1e-6)
        assert ledger.c == pytest.approx(ledger.a, abs=1e-6)
        assert ledger.d == pytest.approx(ledger.a, abs=1e-6)


def test_proof_chain_for_two_channel_average(two_channel):
    ledger = proof_chain_check(expression("(x1 + x2) / 2", two_channel), theta_of("mu", two_channel), two_channel, [0.0])
    assert ledger.holds
    assert ledger.a == pytest.approx(0.8, abs=1e-6)
    assert ledger.b == pytest.approx(0.8, abs=1e-6)
    assert ledger.c == pytest.approx(np.sqrt(1.25) * np.sqrt(0.8), abs=1e-6)
    assert ledger.d == pytest.approx(ledger.c, abs=1e-9)


def test_proof_chain_for_constants(bernoulli):
    ledger = proof_chain_check(Estimator.constant(0.5), ParameterFunction.constant(0.5), bernoulli, [0.3])
    assert ledger.holds
    assert (ledger.a, ledger.b, ledger.c, ledger.d) == (0.0, 0.0, 0.0, 0.0)


def test_mc_verify_gaussian(gaussian_mean):
    summary = mc_verify(
        expression("x", gaussian_mean), theta_of("mu", gaussian_mean), gaussian_mean, [0.0], range(20), 100_000
    )
    assert len(summary.outcomes) == 20
    assert [o.seed for o in summary.outcomes] == list(range(20))
    assert summary.pass_rate >= 0.95
    assert summary.bound == pytest.approx(1.0, abs=1e-8)


def test_mc_verify_two_channel_average(two_channel):
    summary = mc_verify(
        expression("(x1 + x2) / 2", two_channel), theta_of("mu", two_channel), two_channel, [0.0], range(20), 100_000
    )
    assert summary.pass_rate == 1.0
    assert summary.min_slack > 0.3


def test_mc_verify_constant(bernoulli):
    summary = mc_verify(Estimator.constant(1.0), ParameterFunction.constant(1.0), bernoulli, [0.3], [1, 2], 10_000)
    assert summary.pass_rate == 1.0
    assert abs(summary.min_slack) <= 1e-12


def test_mc_verify_is_independent_of_workers(poisson):
    args = (expression("x", poisson), theta_of("lambda", poisson), poisson, [4.0], [3, 4, 5], 20_000)
    assert mc_verify(*args, workers=1) == mc_verify(*args, workers=3)


def test_mc_verify_needs_enough_samples(poisson):
    with pytest.raises(SpecError):
        mc_verify(expression("x", poisson), theta_of("lambda", poisson), poisson, [4.0], [0], 5_000)


def test_probe_grid_stays_inside_domain(categorical3, gaussian_both):
    probes = probe_grid(categorical3)
    assert probes and all(categorical3.contains(p) for p in probes)
    assert len(probe_grid(gaussian_both)) == 25


def test_estimator_builtins(two_channel):
    points = np.array([[1.0, 3.0], [2.0, 4.0]])
    assert Estimator.identity(1)(points).tolist() == [3.0, 4.0]
    assert Estimator.linear([0.5, 0.5], offset=1.0)(points).tolist() == [3.0, 4.0]
    assert Estimator.constant(7.0)(points).tolist() == [7.0, 7.0]
    assert expression("(x1 + x2) / 2", two_channel)(points).tolist() == [2.0, 3.0]
