import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from src.config import get_settings
from src.errors import ParameterDomainError, SingularInformation, SpecError
from src.models.builtins import (
    DEFAULT_MU_RANGE,
    DEFAULT_RATE_RANGE,
    DEFAULT_SIGMA_RANGE,
    make_bernoulli,
    make_categorical,
    make_gaussian,
    make_poisson,
)
from src.models.family import ParametricFamily, make_product, make_tabulated, restrict
from src.models.space import SampleSpace
from src.schemas.model_spec import FamilySpec, GridSpec, ModelSpec, TableSpec
from src.schemas.report import (
    BoundReport,
    CheckLedger,
    CheckResult,
    CrbReport,
    FisherReport,
    SweepRow,
)
from src.services.estimation import (
    Estimator,
    dtheta_via_estimator,
    mc_verify,
    method_info,
    proof_chain_check,
    variance,
    verify_bound,
)
from src.services.expectation import ExpectationMethod, MethodKind, chunk_generator
from src.services.geometry import (
    ParameterFunction,
    builtin_charts,
    fisher_matrix,
    gradient,
    metric_pair,
    reparameterize,
)
from src.services.score import (
    FDScheme,
    TangentVector,
    check_reference_measure_invariance,
    quotient_score,
    score_directional,
    score_mean,
)

logger = logging.getLogger(__name__)

Bounds = Callable[[str], Optional[Tuple[Optional[float], Optional[float]]]]

MC_VERIFY_PASS_RATE = 0.95
CHECK_OBSERVATIONS = 5


def reference_weight(x: np.ndarray) -> np.ndarray:
    """Positive reweighting used by the reference-measure check."""
    return np.exp(0.01 * np.sum(np.asarray(x, dtype=float) ** 2, axis=1))


def load_spec(path: Path) -> ModelSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SpecError(f"cannot read model spec {path}: {exc.strerror}") from None
    try:
        return ModelSpec.model_validate_json(text)
    except ValidationError as exc:
        raise SpecError(f"invalid model spec {path}: {_first_error(exc)}") from None


def load_table(path: Path) -> TableSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SpecError(f"cannot read density table {path}: {exc.strerror}") from None
    try:
        return TableSpec.model_validate_json(text)
    except ValidationError as exc:
        raise SpecError(f"invalid density table {path}: {_first_error(exc)}") from None


def _first_error(exc: ValidationError) -> str:
    error = exc.errors()[0]
    location = ".".join(str(part) for part in error["loc"])
    return f"{location}: {error['msg']}" if location else error["msg"]


def _range(bounds: Bounds, name: str, default: Tuple[float, float]) -> Tuple[float, float]:
    lo, hi = bounds(name) or (None, None)
    return (default[0] if lo is None else lo, default[1] if hi is None else hi)


def build_family(spec: FamilySpec, bounds: Bounds, grid: GridSpec, base_dir: Path) -> ParametricFamily:
    """Construct the family a spec describes, with coordinate domains from ``bounds``."""
    if spec.kind == "gaussian":
        return make_gaussian(
            mu_known=spec.mu is not None,
            sigma_known=spec.sigma is not None,
            mu=0.0 if spec.mu is None else spec.mu,
            sigma=1.0 if spec.sigma is None else spec.sigma,
            mu_range=_range(bounds, "mu", DEFAULT_MU_RANGE),
            sigma_range=_range(bounds, "sigma", DEFAULT_SIGMA_RANGE),
            nodes=grid.nodes,
            span_sigmas=grid.span_sigmas,
        )
    if spec.kind == "poisson":
        return make_poisson(grid.tail_mass, _range(bounds, "lambda", DEFAULT_RATE_RANGE))
    if spec.kind == "product":
        factors, maps = [], []
        for factor in spec.factors:
            mapping = dict(factor.params)
            factors.append(build_family(factor.family, lambda c, m=mapping: bounds(m.get(c, c)), grid, base_dir))
            maps.append(mapping)
        return make_product(factors, maps)

    if spec.kind == "bernoulli":
        family = make_bernoulli()
    elif spec.kind == "categorical":
        family = make_categorical(spec.m)
    else:
        family = _tabulated(spec.table, spec.name, grid, base_dir)
    overrides = {n: bounds(n) for n in family.coordinate_names if bounds(n) is not None}
    return restrict(family, overrides)


def _tabulated(table_path: str, name: Optional[str], grid: GridSpec, base_dir: Path) -> ParametricFamily:
    path = Path(table_path)
    if not path.is_absolute():
        path = base_dir / path
    table = load_table(path)
    if table.support is not None:
        space = SampleSpace.discrete(table.support, table.weights)
    else:
        a, b = table.interval
        space = SampleSpace.grid(a, b, table.nodes or grid.nodes)
    try:
        densities = np.asarray(table.densities, dtype=float)
    except ValueError:
        raise SpecError(f"density table {path} is not a rectangular array of numbers") from None
    return make_tabulated(space, table.parameters, densities, name=name or path.stem)


def parse_assignments(text: str) -> Dict[str, float]:
    """'name=value,name=value' -> {name: value}."""
    values: Dict[str, float] = {}
    for item in filter(None, (part.strip() for part in text.split(","))):
        name, sep, raw = item.partition("=")
        if not sep or not name.strip():
            raise SpecError(f"malformed assignment '{item}', expected name=value")
        try:
            values[name.strip()] = float(raw)
        except ValueError:
            raise SpecError(f"malformed number '{raw.strip()}' for '{name.strip()}'") from None
    return values


def parse_range(text: str) -> Tuple[str, float, float, int]:
    """'name=lo:hi:steps' -> (name, lo, hi, steps)."""
    name, sep, rest = text.partition("=")
    parts = rest.split(":")
    if not sep or not name.strip() or len(parts) != 3:
        raise SpecError(f"malformed range '{text}', expected name=lo:hi:steps")
    try:
        lo, hi, steps = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise SpecError(f"malformed range '{text}', expected name=lo:hi:steps") from None
    if steps < 1 or not np.isfinite(lo) or not np.isfinite(hi) or hi < lo:
        raise SpecError(f"malformed range '{text}': need lo <= hi and steps >= 1")
    return name.strip(), lo, hi, steps


class CramerRaoService:
    def __init__(
        self,
        spec: ModelSpec,
        base_dir: Path = Path("."),
        seed: Optional[int] = None,
        workers: Optional[int] = None,
    ):
        self.spec = spec
        coordinates = {c.name: (c.lower, c.upper) for c in spec.coordinates}
        self.family = build_family(spec.family, coordinates.get, spec.grid, Path(base_dir))
        unknown = sorted(set(coordinates) - set(self.family.coordinate_names))
        if unknown:
            raise SpecError(f"unknown coordinate(s) {unknown} for {self.family.name}")

        self.fd = FDScheme() if spec.fd.relative_step is None else FDScheme(relative_step=spec.fd.relative_step)
        self.method = ExpectationMethod(
            kind=MethodKind(spec.method.kind),
            mc_samples=spec.method.samples,
            seed=spec.method.seed if seed is None else seed,
            workers=workers,
        )
        logger.info("Loaded %s with coordinates %s", self.family.name, ", ".join(self.family.coordinate_names))

    @classmethod
    def from_file(cls, path, seed: Optional[int] = None, workers: Optional[int] = None) -> "CramerRaoService":
        path = Path(path)
        return cls(load_spec(path), path.parent, seed=seed, workers=workers)

    # inputs

    def point(self, at: Optional[str] = None) -> np.ndarray:
        """Evaluation point from the spec's ``at`` and the ``--at`` text; unset coordinates take the centre."""
        values = dict(self.spec.at or {})
        if at:
            values.update(parse_assignments(at))
        unknown = sorted(set(values) - set(self.family.coordinate_names))
        if unknown:
            raise SpecError(f"unknown coordinate(s) {unknown} in evaluation point")
        if len(values) == self.family.k:
            p = np.array([values[n] for n in self.family.coordinate_names])
        else:
            p = self.family.center()
            for name, value in values.items():
                p[self.family.coordinate_index(name)] = value
        return self.family.require(p)

    def theta(self, source: Optional[str] = None) -> ParameterFunction:
        source = source or self.spec.theta
        if source is None:
            return ParameterFunction.coordinate(0, self.family.coordinate_names[0])
        names = self.family.coordinate_names
        return ParameterFunction.from_expression(source, names, self.fd, family=self.family)

    def estimator(self, source: Optional[str] = None) -> Estimator:
        source = source or self.spec.estimator
        if source is None:
            raise SpecError("this command needs an estimator in the model spec")
        return Estimator.from_expression(source, self.family.space.coordinate_names)

    def _header(self, p: np.ndarray) -> dict:
        return {"family": self.family.name, "coordinates": list(self.family.coordinate_names), "at": p.tolist()}

    # commands

    def fisher(self, p: np.ndarray) -> FisherReport:
        fisher = fisher_matrix(self.family, p, self.method, self.fd)
        return FisherReport(
            **self._header(p),
            matrix=fisher.entries.tolist(),
            inverse=fisher.inverse.tolist(),
            condition_estimate=fisher.condition_estimate,
            method=method_info(self.method),
        )

    def crb(self, p: np.ndarray, theta: ParameterFunction) -> CrbReport:
        grad = gradient(theta, fisher_matrix(self.family, p, self.method, self.fd))
        return CrbReport(
            **self._header(p),
            theta=theta.label,
            theta_value=theta.evaluate(p),
            differential=grad.differential.tolist(),
            gradient=grad.components.tolist(),
            bound=grad.squared_norm,
            method=method_info(self.method),
        )

    def verify(self, p: np.ndarray, theta: ParameterFunction, mc_seeds: Optional[int] = None) -> BoundReport:
        estimator = self.estimator()
        report = verify_bound(estimator, theta, self.family, p, self.method, self.fd)
        if not mc_seeds:
            return report
        seeds = [self.method.seed + i for i in range(mc_seeds)]
        summary = mc_verify(
            estimator, theta, self.family, p, seeds, self.method.mc_samples, self.fd, self.method.workers
        )
        logger.info("Monte Carlo verification: pass rate %.3f over %d seeds", summary.pass_rate, len(seeds))
        passed = report.bound_applicable and summary.pass_rate >= MC_VERIFY_PASS_RATE
        if self.method.is_exact:
            passed = passed and report.passed
        return report.model_copy(update={"mc_verify": summary, "passed": passed})

    def check(self, p: np.ndarray, theta: ParameterFunction) -> CheckLedger:
        checks: List[CheckResult] = []
        checks += self._score_checks(p)
        checks += self._estimator_checks(p, theta)
        checks += self._chart_checks(p, theta)
        for result in checks:
            if not result.passed:
                logger.warning("Check %s failed: residual %.3e > %.1e", result.name, result.residual, result.tolerance)
        return CheckLedger(**self._header(p), checks=checks, passed=all(c.passed for c in checks))

    def sweep(self, p: np.ndarray, theta: ParameterFunction, text: str) -> List[SweepRow]:
        name, lo, hi, steps = parse_range(text)
        i = self.family.coordinate_index(name)
        points = []
        for value in np.linspace(lo, hi, steps):
            q = p.copy()
            q[i] = value
            if not self.family.contains(q):
                raise ParameterDomainError(f"sweep range for '{name}' leaves the parameter domain at {value:.17g}")
            points.append(q)
        estimator = self.estimator() if self.spec.estimator else None

        rows = []
        for q in points:
            theta_value = theta.evaluate(q)
            try:
                bound = gradient(theta, fisher_matrix(self.family, q, self.method, self.fd)).squared_norm
            except SingularInformation as exc:
                rows.append(SweepRow(point=q[i], theta=theta_value, error=str(exc)))
                continue
            row = SweepRow(point=q[i], theta=theta_value, bound=bound)
            if estimator is not None:
                var = variance(estimator, self.family, q, self.method).variance
                row = row.model_copy(
                    update={"variance": var, "slack": var - bound, "efficiency": bound / var if var > 0 else None}
                )
            rows.append(row)
        return rows

    # check helpers

    def _directions(self) -> List[np.ndarray]:
        k = self.family.k
        return [np.eye(k)[i] for i in range(k)] + ([np.ones(k)] if k > 1 else [])

    def _check_method(self) -> ExpectationMethod:
        return ExpectationMethod.exact() if self.family.space.admits_exact() else self.method

    def _observations(self, p: np.ndarray) -> np.ndarray:
        return self.family.sample(p, chunk_generator(self.method.seed, 0), CHECK_OBSERVATIONS)

    def _score_checks(self, p: np.ndarray) -> List[CheckResult]:
        settings = get_settings()
        method = self._check_method()
        analytic = self.fd.prefer_analytic and self.family.has_analytic_score
        results = []
        for v in self._directions():
            tangent = TangentVector(p, v)
            mean = score_mean(self.family, p, tangent, method, self.fd)
            if method.is_exact:
                tol = 1e-8 if analytic else 1e-6
            else:
                spread = metric_pair(self.family, p, tangent, tangent, method, self.fd)
                tol = settings.mc_margin_sigmas * float(np.sqrt(spread / method.mc_samples))
            results.append(_result(f"score_mean v={_fmt(v)}", abs(mean), tol))

        observations = self._observations(p)
        worst_quotient, worst_reweight = 0.0, 0.0
        for x in observations:
            for v in self._directions():
                tangent = TangentVector(p, v)
                score = score_directional(self.family, p, tangent, x, self.fd)
                oracle = quotient_score(self.family, p, v, x, self.fd)
                worst_quotient = max(worst_quotient, abs(score - oracle) / max(1.0, abs(oracle)))
                if self.family.space.admits_exact():
                    original, reweighted = check_reference_measure_invariance(
                        self.family, reference_weight, p, tangent, x, self.fd
                    )
                    worst_reweight = max(worst_reweight, abs(original - reweighted))
        results.append(_result("dL_x = lambda_x", worst_quotient, 1e-6))
        if self.family.space.admits_exact():
            results.append(_result("reference measure invariance", worst_reweight, 1e-10 if analytic else 1e-7))
        else:
            results.append(_skipped("reference measure invariance", "sample space too large to reweight"))
        return results

    def _estimator_checks(self, p: np.ndarray, theta: ParameterFunction) -> List[CheckResult]:
        method = self._check_method()
        grad = gradient(theta, fisher_matrix(self.family, p, method, self.fd))
        results = [
            _result("gradient identity", abs(grad.identity_residual), 1e-8 * max(1.0, grad.squared_norm)),
        ]
        if self.spec.estimator is None:
            return results
        estimator = self.estimator()
        if not method.is_exact:
            results.append(_skipped("dtheta via estimator", "needs exact expectation"))
            results.append(_skipped("proof chain", "needs exact expectation"))
            return results
        worst = 0.0
        for v in self._directions():
            lhs, rhs = dtheta_via_estimator(estimator, self.family, p, TangentVector(p, v), method, self.fd)
            worst = max(worst, abs(lhs - rhs) / max(1.0, abs(rhs)))
        results.append(_result("dtheta via estimator", worst, 1e-6))

        ledger = proof_chain_check(estimator, theta, self.family, p, method, self.fd)
        results.append(
            CheckResult(
                name="proof chain",
                residual=abs(ledger.a - ledger.b),
                tolerance=get_settings().slack_tol * max(1.0, abs(ledger.a)),
                passed=ledger.holds,
                detail="; ".join(ledger.violations)
                or f"a={ledger.a:.17g} b={ledger.b:.17g} c={ledger.c:.17g} d={ledger.d:.17g}",
            )
        )
        return results

    def _chart_checks(self, p: np.ndarray, theta: ParameterFunction) -> List[CheckResult]:
        method = self._check_method()
        base = fisher_matrix(self.family, p, method, self.fd)
        bound = gradient(theta, base).squared_norm
        results = []
        for chart in builtin_charts(self.family):
            family = reparameterize(self.family, chart)
            psi = np.asarray(chart.forward(p), dtype=float)
            fisher = fisher_matrix(family, psi, method, self.fd)
            jac = chart.inverse_jacobian(psi, self.family)
            expected = jac.T @ base.entries @ jac
            scale = max(1.0, float(np.max(np.abs(expected))))
            drift = float(np.max(np.abs(fisher.entries - expected))) / scale
            results.append(_result(f"tensor law {chart.name}", drift, 1e-6))

            pulled = gradient(theta.pullback(chart, self.family), fisher).squared_norm
            mismatch = abs(pulled - bound) / bound if bound > 0 else abs(pulled)
            results.append(_result(f"crb invariance {chart.name}", mismatch, 1e-6))
        return results


def _fmt(v: np.ndarray) -> str:
    return "(" + ",".join(f"{c:g}" for c in v) + ")"


def _result(name: str, residual: float, tolerance: float, detail: Optional[str] = None) -> CheckResult:
    return CheckResult(
        name=name,
        residual=float(residual),
        tolerance=float(tolerance),
        passed=bool(residual <= tolerance),
        detail=detail,
    )


def _skipped(name: str, reason: str) -> CheckResult:
    return CheckResult(name=name, residual=0.0, tolerance=0.0, passed=True, detail=f"skipped: {reason}")
