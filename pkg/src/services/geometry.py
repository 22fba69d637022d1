"""Fisher-Rao metric, Fisher information, metric gradients and the Cramér-Rao bound.

In coordinates phi_1..phi_k the metric is the Fisher information matrix
I_ij = E[dL/dphi_i * dL/dphi_j]. The gradient of a parameter function theta
has components sum_i I^{ij} dtheta/dphi_i and its squared length
sum_{i,m} I^{mi} dtheta/dphi_i dtheta/dphi_m is the variance bound.
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, special

from src.config import get_settings
from src.errors import ParameterDomainError, SingularInformation, SpecError
from src.models.family import ParametricFamily
from src.parsers import expr as expr_lang
from src.services.expectation import ExpectationMethod, weighted_sample
from src.services.score import FDScheme, TangentVector, coordinate_scores, directional_scores

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FisherMatrix:
    at: np.ndarray
    entries: np.ndarray
    inverse: np.ndarray
    condition_estimate: float
    method: ExpectationMethod
    coordinate_names: Tuple[str, ...] = ()

    @property
    def k(self) -> int:
        return int(self.entries.shape[0])

    @classmethod
    def from_entries(
        cls,
        at,
        entries: np.ndarray,
        method: ExpectationMethod,
        coordinate_names: Sequence[str] = (),
    ) -> "FisherMatrix":
        """Symmetrize, check positive definiteness and invert by Cholesky factorization."""
        settings = get_settings()
        at = np.asarray(at, dtype=float)
        entries = np.asarray(entries, dtype=float)
        entries = 0.5 * (entries + entries.T)
        if not np.all(np.isfinite(entries)):
            raise SingularInformation("Fisher information has non-finite entries", at)
        largest_diagonal = float(np.max(np.diag(entries)))
        eigenvalues = np.linalg.eigvalsh(entries)
        threshold = settings.pd_relative_threshold * largest_diagonal
        if largest_diagonal <= 0 or eigenvalues[0] <= threshold:
            raise SingularInformation(
                f"Fisher information is singular or indefinite (smallest eigenvalue {eigenvalues[0]:.3e}, "
                f"threshold {threshold:.3e})",
                at,
            )
        try:
            factor = linalg.cho_factor(entries, lower=True)
        except linalg.LinAlgError:
            raise SingularInformation("Cholesky factorization of the Fisher information failed", at) from None
        inverse = linalg.cho_solve(factor, np.eye(entries.shape[0]))
        inverse = 0.5 * (inverse + inverse.T)
        residual = float(np.max(np.abs(entries @ inverse - np.eye(entries.shape[0]))))
        if residual > settings.inverse_check_tol:
            raise SingularInformation(f"Fisher information inverse is inaccurate (residual {residual:.3e})", at)
        condition = float(eigenvalues[-1] / eigenvalues[0])
        if condition > settings.condition_warning:
            logger.warning("Ill-conditioned Fisher information (condition %.3e) at %s", condition, at)
        return cls(at, entries, inverse, condition, method, tuple(coordinate_names))


@dataclass(frozen=True, eq=False)
class ParameterFunction:
    """A scalar theta on parameter space with its coordinate partials."""

    evaluate: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    label: str = "theta"

    def partials(self, p, i: int) -> float:
        return float(self.gradient(np.asarray(p, dtype=float))[i])

    @classmethod
    def coordinate(cls, j: int, name: Optional[str] = None) -> "ParameterFunction":
        def gradient(p):
            e = np.zeros(np.shape(p))
            e[j] = 1.0
            return e

        return cls(lambda p: float(p[j]), gradient, name or f"phi_{j + 1}")

    @classmethod
    def constant(cls, c: float) -> "ParameterFunction":
        return cls(lambda p: float(c), lambda p: np.zeros(np.shape(p)), repr(float(c)))

    @classmethod
    def from_callable(
        cls,
        f: Callable[[np.ndarray], float],
        gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        label: str = "theta",
        fd: Optional[FDScheme] = None,
        family: Optional[ParametricFamily] = None,
    ) -> "ParameterFunction":
        """Wrap ``f``; missing partials come from central differences kept inside ``family``."""
        if gradient is None:
            gradient = _fd_gradient(f, fd or FDScheme(), family)
        return cls(lambda p: float(f(p)), lambda p: np.asarray(gradient(p), dtype=float), label)

    @classmethod
    def from_expression(
        cls,
        source: str,
        coordinate_names: Sequence[str],
        fd: Optional[FDScheme] = None,
        family: Optional[ParametricFamily] = None,
    ) -> "ParameterFunction":
        tree = expr_lang.parse(source, coordinate_names)
        names = tuple(coordinate_names)

        def f(p):
            return expr_lang.evaluate(tree, dict(zip(names, map(float, p))))

        return cls.from_callable(f, None, label=source, fd=fd, family=family)

    def pullback(self, chart: "Chart", family: Optional[ParametricFamily] = None) -> "ParameterFunction":
        """The same scalar expressed in the chart's coordinates; ``family`` is the uncharted one."""

        def evaluate(psi):
            return self.evaluate(chart.inverse(np.asarray(psi, dtype=float)))

        def gradient(psi):
            psi = np.asarray(psi, dtype=float)
            return chart.inverse_jacobian(psi, family).T @ self.gradient(chart.inverse(psi))

        return ParameterFunction(evaluate, gradient, f"{self.label} in {chart.name}")


def _fd_gradient(
    f: Callable[[np.ndarray], float],
    fd: FDScheme,
    family: Optional[ParametricFamily] = None,
) -> Callable[[np.ndarray], np.ndarray]:
    def gradient(p):
        p = np.asarray(p, dtype=float)
        out = np.empty(p.shape)
        for i in range(p.size):
            e = np.zeros(p.shape)
            e[i] = 1.0
            h = fd.relative_step * max(1.0, abs(p[i])) if family is None else fd.step(family, p, e)
            out[i] = (f(p + h * e) - f(p - h * e)) / (2.0 * h)
        return out

    return gradient


@dataclass(frozen=True, eq=False)
class GradientVector:
    base_point: np.ndarray
    components: np.ndarray
    differential: np.ndarray
    squared_norm: float
    # components^T I components, recomputed through the metric itself
    metric_norm_squared: float

    @property
    def identity_residual(self) -> float:
        """|grad|^2 - dtheta(grad), which vanishes by definition of the gradient."""
        return self.squared_norm - float(np.dot(self.differential, self.components))


def gradient(theta: ParameterFunction, fisher: FisherMatrix) -> GradientVector:
    differential = np.asarray(theta.gradient(fisher.at), dtype=float)
    components = fisher.inverse @ differential
    squared_norm = float(differential @ fisher.inverse @ differential)
    return GradientVector(
        fisher.at,
        components,
        differential,
        squared_norm,
        float(components @ fisher.entries @ components),
    )


def fisher_matrix(
    family: ParametricFamily,
    p,
    method: Optional[ExpectationMethod] = None,
    fd: Optional[FDScheme] = None,
) -> FisherMatrix:
    method = method or ExpectationMethod.exact()
    p = family.require(p)
    sample = weighted_sample(family, p, method)
    scores = coordinate_scores(family, p, sample.points, fd)
    k = family.k
    entries = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            entries[i, j] = entries[j, i] = sample.mean(scores[:, i] * scores[:, j])
    return FisherMatrix.from_entries(p, entries, method, family.coordinate_names)


def metric_pair(
    family: ParametricFamily,
    p,
    u: TangentVector,
    v: TangentVector,
    method: Optional[ExpectationMethod] = None,
    fd: Optional[FDScheme] = None,
) -> float:
    """I(u, v) = E[lambda_x(u) lambda_x(v)]."""
    method = method or ExpectationMethod.exact()
    sample = weighted_sample(family, p, method)
    lu = directional_scores(family, p, u.components, sample.points, fd)
    lv = directional_scores(family, p, v.components, sample.points, fd)
    return sample.mean(lu * lv)


def crb(
    theta: ParameterFunction,
    family: ParametricFamily,
    p,
    method: Optional[ExpectationMethod] = None,
    fd: Optional[FDScheme] = None,
) -> float:
    """Lower bound |grad theta(p)|^2 on the variance of unbiased estimators of theta."""
    return gradient(theta, fisher_matrix(family, p, method, fd)).squared_norm


# charts


@dataclass(frozen=True, eq=False)
class Chart:
    """A change of coordinates psi = forward(phi) with inverse phi = inverse(psi).

    ``jacobian(psi)`` is d phi / d psi; when omitted it is taken by central
    differences of ``inverse``, with stencils kept inside the chart's image of
    ``family`` when one is passed.
    """

    name: str
    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    prefix: str = ""
    fd: Optional[FDScheme] = None

    def inverse_jacobian(self, psi: np.ndarray, family: Optional[ParametricFamily] = None) -> np.ndarray:
        psi = np.asarray(psi, dtype=float)
        if self.jacobian is not None:
            return np.asarray(self.jacobian(psi), dtype=float)
        fd = self.fd or FDScheme()
        columns = []
        for j in range(psi.size):
            e = np.zeros(psi.shape)
            e[j] = 1.0
            if family is None:
                h = fd.relative_step * max(1.0, abs(psi[j]))
            else:
                h = fd.admissible_step(
                    lambda q: family.contains(self.inverse(q)), psi, e, self.coordinate_names(family)
                )
            columns.append((self.inverse(psi + h * e) - self.inverse(psi - h * e)) / (2.0 * h))
        return np.column_stack(columns)

    def coordinate_names(self, family: ParametricFamily) -> Tuple[str, ...]:
        prefix = self.prefix or self.name
        return tuple(n if prefix == "identity" else f"{prefix}_{n}" for n in family.coordinate_names)

    @classmethod
    def identity(cls) -> "Chart":
        return cls("identity", lambda phi: np.array(phi, dtype=float), lambda psi: np.array(psi, dtype=float),
                   lambda psi: np.eye(np.size(psi)))

    @classmethod
    def affine(cls, scale, shift=0.0) -> "Chart":
        """psi = scale * phi + shift, coordinatewise."""
        scale = np.asarray(scale, dtype=float)
        shift = np.asarray(shift, dtype=float)
        if np.any(scale == 0):
            raise SpecError("affine chart needs nonzero scale")
        return cls(
            "affine",
            lambda phi: scale * phi + shift,
            lambda psi: (psi - shift) / scale,
            lambda psi: np.diag(np.broadcast_to(1.0 / scale, np.shape(psi)).astype(float)),
            prefix="affine",
        )

    @classmethod
    def log(cls, indices: Optional[Sequence[int]] = None) -> "Chart":
        return cls._elementwise("log", np.log, np.exp, np.exp, indices)

    @classmethod
    def logit(cls, indices: Optional[Sequence[int]] = None) -> "Chart":
        return cls._elementwise(
            "logit", special.logit, special.expit, lambda s: special.expit(s) * (1.0 - special.expit(s)), indices
        )

    @classmethod
    def _elementwise(cls, name, fwd, inv, dinv, indices) -> "Chart":
        def mask(x):
            m = np.zeros(np.shape(x), dtype=bool)
            m[list(range(np.size(x))) if indices is None else list(indices)] = True
            return m

        def forward(phi):
            phi = np.asarray(phi, dtype=float)
            with np.errstate(all="ignore"):
                return np.where(mask(phi), fwd(phi), phi)

        def inverse(psi):
            psi = np.asarray(psi, dtype=float)
            with np.errstate(all="ignore"):
                return np.where(mask(psi), inv(psi), psi)

        def jacobian(psi):
            psi = np.asarray(psi, dtype=float)
            with np.errstate(all="ignore"):
                return np.diag(np.where(mask(psi), dinv(psi), 1.0))

        return cls(name, forward, inverse, jacobian, prefix=name)


def reparameterize(
    family: ParametricFamily,
    chart: Chart,
    lower: Optional[Sequence[float]] = None,
    upper: Optional[Sequence[float]] = None,
) -> ParametricFamily:
    """The same measures expressed in the chart's coordinates.

    For coordinatewise monotone charts the new box is the image of the old
    one; other charts must pass ``lower``/``upper`` explicitly. Membership also
    requires the mapped-back point to lie in the original domain.
    """
    if lower is None or upper is None:
        with np.errstate(divide="ignore", over="ignore"):
            a = np.asarray(chart.forward(family.lower), dtype=float)
            b = np.asarray(chart.forward(family.upper), dtype=float)
        lower, upper = np.minimum(a, b), np.maximum(a, b)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)

    message = f"chart '{chart.name}' is not invertible on the parameter box of {family.name}"
    images = [(phi, np.asarray(chart.forward(phi), dtype=float)) for phi in family.domain_probes()]
    for phi, psi in images:
        if not np.allclose(np.asarray(chart.inverse(psi), dtype=float), phi, rtol=1e-9, atol=1e-12):
            raise SpecError(message)
    for _, psi in images:
        try:
            jac = chart.inverse_jacobian(psi, family)
        except ParameterDomainError:
            raise SpecError(message) from None
        if not abs(np.linalg.det(jac)) >= 1e-300:
            raise SpecError(message)

    base_density = family.density_fn

    def density_fn(psi, x):
        return base_density(chart.inverse(psi), x)

    score_fn = None
    if family.score_fn is not None:
        base_score = family.score_fn

        def score_fn(psi, x):
            return base_score(chart.inverse(psi), x) @ chart.inverse_jacobian(psi, family)

    sampler_fn = None
    if family.sampler_fn is not None:
        base_sampler = family.sampler_fn

        def sampler_fn(psi, rng, size):
            return base_sampler(chart.inverse(psi), rng, size)

    return replace(
        family,
        name=f"{family.name} [{chart.name}]",
        coordinate_names=chart.coordinate_names(family),
        lower=lower,
        upper=upper,
        density_fn=density_fn,
        score_fn=score_fn,
        sampler_fn=sampler_fn,
        constraint=lambda psi: family.contains(chart.inverse(psi)),
        constraint_label=family.constraint_label,
    )


def builtin_charts(family: ParametricFamily) -> List[Chart]:
    """Charts used by the invariance checks: identity, affine, and log/logit where they fit."""
    charts = [Chart.identity(), Chart.affine(2.0, 1.0)]
    if family.constraint is None:
        unit = [i for i in range(family.k) if family.lower[i] >= 0.0 and family.upper[i] <= 1.0]
        positive = [i for i in range(family.k) if family.lower[i] >= 0.0 and i not in unit]
        if unit:
            charts.append(Chart.logit(unit))
        if positive:
            charts.append(Chart.log(positive))
    return charts
