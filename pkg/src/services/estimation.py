import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from src.config import get_settings
from src.errors import SpecError
from src.models.family import ParametricFamily
from src.parsers import expr as expr_lang
from src.schemas.report import BoundReport, McVerifySummary, MethodInfo, ProofChainLedger, SeedOutcome
from src.services.expectation import ExpectationMethod, WeightedSample, weighted_sample
from src.services.geometry import ParameterFunction, fisher_matrix, gradient
from src.services.score import FDScheme, TangentVector, directional_scores

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Estimator:
    """theta-hat: a function on sample points, vectorized over rows of shape (n, d)."""

    evaluate: Callable[[np.ndarray], np.ndarray]
    label: str = "estimator"
    discrete_only: bool = False

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.evaluate(points), dtype=float), (points.shape[0],))

    def check_admissible(self, family: ParametricFamily):
        if self.discrete_only and not family.is_discrete:
            raise SpecError(f"estimator '{self.label}' is only admissible on discrete sample spaces")

    @classmethod
    def identity(cls, coordinate: int = 0) -> "Estimator":
        return cls(lambda x: x[:, coordinate], f"x{coordinate + 1}" if coordinate else "x")

    @classmethod
    def constant(cls, c: float) -> "Estimator":
        return cls(lambda x: np.full(x.shape[0], float(c)), repr(float(c)))

    @classmethod
    def linear(cls, weights: Sequence[float], offset: float = 0.0) -> "Estimator":
        w = np.asarray(weights, dtype=float)
        label = " + ".join(f"{c:g}*x{i + 1}" for i, c in enumerate(w))
        return cls(lambda x: x @ w + offset, label if not offset else f"{label} + {offset:g}")

    @classmethod
    def indicator(cls, value: float, coordinate: int = 0) -> "Estimator":
        """1 when the observation equals ``value``; admissible on discrete spaces only."""
        return cls(
            lambda x: (x[:, coordinate] == value).astype(float),
            f"[x{coordinate + 1} == {value:g}]",
            discrete_only=True,
        )

    @classmethod
    def from_expression(cls, source: str, sample_names: Sequence[str]) -> "Estimator":
        tree = expr_lang.parse(source, sample_names)
        names = tuple(sample_names)

        def evaluate(x):
            return expr_lang.evaluate(tree, {n: x[:, i] for i, n in enumerate(names)})

        return cls(evaluate, source)


@dataclass(frozen=True)
class VarianceResult:
    mean: float
    variance: float
    std_error: Optional[float] = None  # standard error of the variance, Monte Carlo only


def method_info(method: ExpectationMethod) -> MethodInfo:
    if method.is_exact:
        return MethodInfo(kind="exact")
    return MethodInfo(kind="mc", mc_samples=method.mc_samples, seed=method.seed)


def _mean_and_variance(values: np.ndarray, sample: WeightedSample) -> VarianceResult:
    """Two-pass (mean-subtracted) variance; Monte Carlo adds the fourth-moment standard error."""
    mean = sample.mean(values)
    centred = values - mean
    m2 = sample.mean(centred**2)
    if sample.method.is_exact:
        return VarianceResult(mean, m2)
    n = sample.size
    m4 = sample.mean(centred**4)
    var = m2 * n / (n - 1) if n > 1 else 0.0
    std_error = float(np.sqrt(max(m4 - m2**2 * (n - 3) / (n - 1), 0.0) / n)) if n > 3 else float("inf")
    return VarianceResult(mean, var, std_error)


def bias(
    estimator: Estimator,
    theta: ParameterFunction,
    family: ParametricFamily,
    p,
    method: Optional[ExpectationMethod] = None,
) -> float:
    """E(theta-hat | p) - theta(p)."""
    method = method or ExpectationMethod.exact()
    estimator.check_admissible(family)
    p = family.require(p)
    sample = weighted_sample(family, p, method)
    return sample.mean(estimator(sample.points)) - theta.evaluate(p)


def variance(
    estimator: Estimator,
    family: ParametricFamily,
    p,
    method: Optional[ExpectationMethod] = None,
) -> VarianceResult:
    method = method or ExpectationMethod.exact()
    method.require_samples(get_settings().mc_min_samples, "variance")
    estimator.check_admissible(family)
    sample = weighted_sample(family, p, method)
    return _mean_and_variance(estimator(sample.points), sample)


def probe_grid(family: ParametricFamily, points_per_dim: Optional[int] = None) -> List[np.ndarray]:
    """Interior points of the domain box standing in for 'every p' in the unbiasedness check."""
    n = points_per_dim or get_settings().probe_points
    axes = []
    for lo, hi in zip(family.lower, family.upper):
        lo, hi = _finite_span(lo, hi)
        axes.append(lo + (hi - lo) * np.arange(1, n + 1) / (n + 1))
    return [np.array(p) for p in itertools.product(*axes) if family.contains(np.array(p))]


def _finite_span(lo: float, hi: float) -> Tuple[float, float]:
    if np.isfinite(lo) and np.isfinite(hi):
        return lo, hi
    if np.isfinite(lo):
        return lo, lo + 10.0
    if np.isfinite(hi):
        return hi - 10.0, hi
    return -5.0, 5.0


def probe_unbiasedness(
    estimator: Estimator,
    theta: ParameterFunction,
    family: ParametricFamily,
    method: ExpectationMethod,
) -> Tuple[float, bool]:
    """(largest |bias| on the probe grid, whether every probe passes).

    Exact expectation is used whenever the space admits it; otherwise each
    probe passes when its bias is within mc_margin_sigmas standard errors.
    """
    settings = get_settings()
    if family.space.admits_exact():
        worst = max(abs(bias(estimator, theta, family, p)) for p in probe_grid(family))
        return worst, worst <= settings.bias_tol
    worst, unbiased = 0.0, True
    for p in probe_grid(family):
        sample = weighted_sample(family, p, method)
        stats = _mean_and_variance(estimator(sample.points), sample)
        deviation = abs(stats.mean - theta.evaluate(p))
        worst = max(worst, deviation)
        if deviation > settings.mc_margin_sigmas * np.sqrt(stats.variance / sample.size):
            unbiased = False
    return worst, unbiased


def verify_bound(
    estimator: Estimator,
    theta: ParameterFunction,
    family: ParametricFamily,
    p,
    method: Optional[ExpectationMethod] = None,
    fd: Optional[FDScheme] = None,
) -> BoundReport:
    settings = get_settings()
    method = method or ExpectationMethod.exact()
    p = family.require(p)
    stats = variance(estimator, family, p, method)
    theta_value = theta.evaluate(p)
    bound = gradient(theta, fisher_matrix(family, p, method, fd)).squared_norm

    worst_bias, unbiased = probe_unbiasedness(estimator, theta, family, method)
    point_bias = stats.mean - theta_value
    if method.is_exact and abs(point_bias) > settings.bias_tol:
        unbiased = False
    if not unbiased:
        logger.warning(
            "Estimator '%s' is biased for '%s' (largest probe bias %.3e); bound claim suppressed",
            estimator.label,
            theta.label,
            worst_bias,
        )

    slack = stats.variance - bound
    if method.is_exact:
        holds = slack >= -settings.slack_tol
    else:
        holds = stats.variance >= bound - settings.mc_margin_sigmas * (stats.std_error or 0.0)
    return BoundReport(
        family=family.name,
        coordinates=list(family.coordinate_names),
        at=p.tolist(),
        theta=theta.label,
        estimator=estimator.label,
        theta_value=theta_value,
        estimator_mean=stats.mean,
        bias=point_bias,
        variance=max(stats.variance, 0.0),
        bound=bound,
        slack=slack,
        efficiency=bound / stats.variance if stats.variance > 0 else None,
        method=method_info(method),
        mc_std_error=stats.std_error,
        max_probe_bias=worst_bias,
        biased=not unbiased,
        bound_applicable=unbiased,
        passed=unbiased and holds,
    )


def dtheta_via_estimator(
    estimator: Estimator,
    family: ParametricFamily,
    p,
    v: TangentVector,
    method: Optional[ExpectationMethod] = None,
    fd: Optional[FDScheme] = None,
) -> Tuple[float, float]:
    """(d/dt E(theta-hat | p + t v), E[theta-hat * lambda_x(v)]) at t = 0.

    theta is reconstructed as p -> E(theta-hat | p) with the same engine, so
    the two numbers agree for every estimator.
    """
    method = method or ExpectationMethod.exact()
    fd = fd or FDScheme()
    p, components = v.at(family)
    if not np.allclose(p, family.require(p)):
        raise SpecError("tangent vector is not based at the evaluation point")
    estimator.check_admissible(family)
    sample = weighted_sample(family, p, method)
    rhs = sample.mean(estimator(sample.points) * directional_scores(family, p, components, sample.points, fd))
    if not np.any(components):
        return 0.0, rhs
    h = fd.step(family, p, components)

    def mean_at(q):
        shifted = weighted_sample(family, q, method)
        return shifted.mean(estimator(shifted.points))

    lhs = (mean_at(p + h * components) - mean_at(p - h * components)) / (2.0 * h)
    return lhs, rhs


def proof_chain_check(
    estimator: Estimator,
    theta: ParameterFunction,
    family: ParametricFamily,
    p,
    method: Optional[ExpectationMethod] = None,
    fd: Optional[FDScheme] = None,
) -> ProofChainLedger:
    """Replays |grad|^2 = int (t-hat - theta) lambda(grad) <= sqrt(V) sqrt(I(grad, grad)) = sqrt(V) |grad|."""
    settings = get_settings()
    method = method or ExpectationMethod.exact()
    p = family.require(p)
    estimator.check_admissible(family)
    grad = gradient(theta, fisher_matrix(family, p, method, fd))
    sample = weighted_sample(family, p, method)
    values = estimator(sample.points)
    scores = directional_scores(family, p, grad.components, sample.points, fd)
    var = max(_mean_and_variance(values, sample).variance, 0.0)

    a = grad.squared_norm
    b = sample.mean((values - theta.evaluate(p)) * scores)
    c = float(np.sqrt(var) * np.sqrt(sample.mean(scores * scores)))
    d = float(np.sqrt(var) * np.sqrt(a))

    violations = []
    if abs(a - b) > settings.slack_tol * max(1.0, abs(a)):
        violations.append(f"|grad|^2 = {a:.17g} differs from the centred integral {b:.17g}")
    if b > c + 1e-9 * max(1.0, abs(c)):
        violations.append(f"Cauchy-Schwarz step fails: {b:.17g} > {c:.17g}")
    if abs(c - d) > 1e-9 * max(1.0, abs(d)):
        violations.append(f"I(grad, grad) disagrees with |grad|^2: {c:.17g} vs {d:.17g}")
    return ProofChainLedger(a=a, b=b, c=c, d=d, violations=violations)


def mc_verify(
    estimator: Estimator,
    theta: ParameterFunction,
    family: ParametricFamily,
    p,
    seeds: Sequence[int],
    mc_samples: int,
    fd: Optional[FDScheme] = None,
    workers: Optional[int] = None,
) -> McVerifySummary:
    """Per seed: pass when the empirical variance is at least bound - 3 standard errors."""
    settings = get_settings()
    if mc_samples < settings.mc_verify_min_samples:
        raise SpecError(f"mc_verify needs at least {settings.mc_verify_min_samples} samples, got {mc_samples}")
    if not seeds:
        raise SpecError("mc_verify needs at least one seed")
    p = family.require(p)
    if family.space.admits_exact():
        bound_method = ExpectationMethod.exact()
    else:
        bound_method = ExpectationMethod.monte_carlo(mc_samples, seeds[0])
    bound = gradient(theta, fisher_matrix(family, p, bound_method, fd)).squared_norm

    def run(seed: int) -> SeedOutcome:
        result = variance(estimator, family, p, ExpectationMethod.monte_carlo(mc_samples, seed, workers=1))
        se = result.std_error or 0.0
        return SeedOutcome(
            seed=seed,
            variance=result.variance,
            std_error=se,
            slack=result.variance - bound,
            passed=result.variance >= bound - settings.mc_margin_sigmas * se,
        )

    workers = workers or settings.mc_workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, seeds))
    else:
        outcomes = [run(s) for s in seeds]
    return McVerifySummary(
        bound=bound,
        mc_samples=mc_samples,
        outcomes=outcomes,
        pass_rate=sum(o.passed for o in outcomes) / len(outcomes),
        min_slack=min(o.slack for o in outcomes),
    )
