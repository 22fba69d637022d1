"""Log-likelihoods and score one-forms.

The score of an observation x in direction v is the derivative of the
log-likelihood t -> log f_{p + t v}(x) at t = 0. Families with a closed-form
log-density gradient use it; the others use central differences.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from src.config import get_settings
from src.errors import DensityError, ParameterDomainError, SpecError
from src.models.family import ParametricFamily, as_points, format_point, reweight
from src.services.expectation import ExpectationMethod, weighted_sample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FDScheme:
    """Central differences with step relative_step * max(1, |p_i|) per coordinate."""

    relative_step: float = field(default_factory=lambda: get_settings().fd_relative_step)
    max_shrinks: int = field(default_factory=lambda: get_settings().fd_max_shrinks)
    prefer_analytic: bool = True

    def __post_init__(self):
        if not self.relative_step > 0:
            raise SpecError(f"relative_step must be positive, got {self.relative_step}")

    def numeric(self) -> "FDScheme":
        """Same steps, but never use closed-form scores."""
        return FDScheme(self.relative_step, self.max_shrinks, prefer_analytic=False)

    def step(self, family: ParametricFamily, p: np.ndarray, v: np.ndarray) -> float:
        """Largest admissible t-step for the stencil p +- t v."""
        return self.admissible_step(family.contains, p, v, family.coordinate_names)

    def admissible_step(
        self,
        contains: Callable[[np.ndarray], bool],
        p: np.ndarray,
        v: np.ndarray,
        names: Sequence[str],
    ) -> float:
        """``step`` for a domain given only by its membership test."""
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        active = np.abs(v) > 0
        h = float(np.min(self.relative_step * np.maximum(1.0, np.abs(p[active])) / np.abs(v[active])))
        for attempt in range(self.max_shrinks + 1):
            if contains(p + h * v) and contains(p - h * v):
                if attempt:
                    logger.warning("Finite-difference step shrunk %d time(s) near the domain boundary", attempt)
                return h
            h *= 0.5
        raise ParameterDomainError(f"finite-difference stencil leaves the domain at {format_point(names, p)}")


@dataclass(frozen=True)
class TangentVector:
    base_point: np.ndarray
    components: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "base_point", np.asarray(self.base_point, dtype=float).reshape(-1))
        object.__setattr__(self, "components", np.asarray(self.components, dtype=float).reshape(-1))
        if self.components.shape != self.base_point.shape:
            raise SpecError("Tangent vector components must match the parameter dimension")
        if not np.all(np.isfinite(self.components)):
            raise SpecError("Tangent vector components must be finite")

    @classmethod
    def basis(cls, p: Sequence[float], i: int) -> "TangentVector":
        p = np.asarray(p, dtype=float)
        e = np.zeros(p.shape)
        e[i] = 1.0
        return cls(p, e)

    def at(self, family: ParametricFamily) -> Tuple[np.ndarray, np.ndarray]:
        return family.require(self.base_point), self.components


def log_likelihood(family: ParametricFamily, p, x) -> float:
    return float(family.log_density(p, x)[0])


def _log_density_all(family: ParametricFamily, p: np.ndarray, points: np.ndarray) -> np.ndarray:
    values = family.density_fn(p, points)
    floor = get_settings().density_floor
    if np.any(values < floor):
        raise DensityError(
            f"{family.name}: density below {floor:g} on the finite-difference stencil at "
            f"{format_point(family.coordinate_names, p)}"
        )
    return np.log(values)


def directional_scores(
    family: ParametricFamily,
    p,
    v,
    points: np.ndarray,
    fd: Optional[FDScheme] = None,
) -> np.ndarray:
    """lambda_x(v) for every row x of ``points``."""
    fd = fd or FDScheme()
    p = family.require(p)
    v = np.asarray(v, dtype=float).reshape(-1)
    points = as_points(points, family.space.dimension)
    if not np.any(v):
        return np.zeros(points.shape[0])
    if fd.prefer_analytic and family.has_analytic_score:
        return family.score_fn(p, points) @ v
    h = fd.step(family, p, v)
    upper = _log_density_all(family, p + h * v, points)
    lower = _log_density_all(family, p - h * v, points)
    return (upper - lower) / (2.0 * h)


def coordinate_scores(family: ParametricFamily, p, points: np.ndarray, fd: Optional[FDScheme] = None) -> np.ndarray:
    """dL_x / dphi_i for every row x, shape (n, k)."""
    fd = fd or FDScheme()
    p = family.require(p)
    if fd.prefer_analytic and family.has_analytic_score:
        return family.score_fn(p, as_points(points, family.space.dimension))
    return np.column_stack([directional_scores(family, p, np.eye(family.k)[i], points, fd) for i in range(family.k)])


def score_directional(family: ParametricFamily, p, v: TangentVector, x, fd: Optional[FDScheme] = None) -> float:
    p, components = v.at(family)
    family.log_density(p, x)  # rejects x with zero density at p
    return float(directional_scores(family, p, components, x, fd)[0])


def score_mean(
    family: ParametricFamily,
    p,
    v: TangentVector,
    method: ExpectationMethod,
    fd: Optional[FDScheme] = None,
) -> float:
    """E(lambda_x(v) | p), which vanishes for every regular family."""
    sample = weighted_sample(family, p, method)
    return sample.mean(directional_scores(family, p, v.components, sample.points, fd))


def quotient_score(family: ParametricFamily, p, v, x, fd: Optional[FDScheme] = None) -> float:
    """d/dt f_{p+tv}(x) / f_p(x) at t = 0, straight from the path definition.

    Kept independent of the log-likelihood code path so the two can be
    compared.
    """
    fd = fd or FDScheme()
    p = family.require(p)
    v = np.asarray(v, dtype=float).reshape(-1)
    if not np.any(v):
        return 0.0
    x = as_points(x, family.space.dimension)
    base = float(family.density_fn(p, x)[0])
    if base < get_settings().density_floor:
        raise DensityError(f"{family.name}: zero density at the observation")
    h = fd.step(family, p, v)
    upper = float(family.density_fn(p + h * v, x)[0]) / base
    lower = float(family.density_fn(p - h * v, x)[0]) / base
    return (upper - lower) / (2.0 * h)


def check_reference_measure_invariance(
    family: ParametricFamily,
    weight: Callable[[np.ndarray], np.ndarray],
    p,
    v: TangentVector,
    x,
    fd: Optional[FDScheme] = None,
) -> Tuple[float, float]:
    """Scores of x under the family and under its reweighted twin.

    Reweighting changes the log-likelihood by -log w(x), which does not
    depend on p, so both numbers agree.
    """
    x = as_points(x, family.space.dimension)
    w = np.asarray(weight(x), dtype=float).reshape(-1)
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise SpecError("Reference-measure weight must be strictly positive")
    reweighted = reweight(family, weight)
    return (
        score_directional(family, p, v, x, fd),
        score_directional(reweighted, p, v, x, fd),
    )


def argmax_log_likelihood(family: ParametricFamily, grid: np.ndarray, x) -> int:
    """Index of the grid row maximizing L_x; ties resolve to the first row."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    values = [log_likelihood(family, row, x) for row in grid]
    return int(np.argmax(values))
