import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from src.config import get_settings
from src.errors import DensityError, ParameterDomainError, SpecError
from src.models.space import SampleSpace, SpaceKind

logger = logging.getLogger(__name__)

DensityFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
ScoreFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
SamplerFn = Callable[[np.ndarray, np.random.Generator, int], np.ndarray]
ConstraintFn = Callable[[np.ndarray], bool]


def format_point(names: Sequence[str], p: Sequence[float]) -> str:
    return ",".join(f"{n}={float(v):.17g}" for n, v in zip(names, p))


@dataclass(frozen=True, eq=False)
class ParametricFamily:
    """Densities f_p on ``space`` for p in an open box of ``k`` coordinates.

    ``density_fn(p, x)`` maps a parameter vector and points of shape (n, d)
    to n densities. ``score_fn(p, x)``, when present, returns the analytic
    log-density gradient of shape (n, k). Neither checks the domain; the
    public methods do.
    """

    name: str
    space: SampleSpace
    coordinate_names: Tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray
    density_fn: DensityFn
    score_fn: Optional[ScoreFn] = None
    sampler_fn: Optional[SamplerFn] = None
    constraint: Optional[ConstraintFn] = None
    constraint_label: str = ""

    @property
    def k(self) -> int:
        return len(self.coordinate_names)

    @property
    def has_analytic_score(self) -> bool:
        return self.score_fn is not None

    @property
    def is_discrete(self) -> bool:
        if self.space.kind is SpaceKind.PRODUCT:
            return all(f.kind is SpaceKind.DISCRETE for f in self.space.factors)
        return self.space.kind is SpaceKind.DISCRETE

    # domain

    def contains(self, p: Sequence[float]) -> bool:
        p = np.asarray(p, dtype=float)
        if p.shape != (self.k,) or not np.all(np.isfinite(p)):
            return False
        if np.any(p <= self.lower) or np.any(p >= self.upper):
            return False
        return self.constraint is None or bool(self.constraint(p))

    def require(self, p: Sequence[float]) -> np.ndarray:
        p = np.asarray(p, dtype=float).reshape(-1)
        if p.shape != (self.k,):
            raise ParameterDomainError(
                f"{self.name}: expected {self.k} coordinates ({', '.join(self.coordinate_names)}), got {p.size}"
            )
        if not self.contains(p):
            detail = f" ({self.constraint_label})" if self.constraint_label else ""
            raise ParameterDomainError(
                f"parameter outside domain: {format_point(self.coordinate_names, p)} for {self.name}{detail}"
            )
        return p

    def center(self) -> np.ndarray:
        """A point well inside the domain, used as the default evaluation point."""
        point = 0.5 * (self.lower + self.upper)
        if self.contains(point):
            return point
        # simplex-like constraints: pull toward the lower corner
        for shrink in (0.5, 0.25, 0.1):
            candidate = self.lower + shrink * (point - self.lower)
            if self.contains(candidate):
                return candidate
        raise SpecError(f"{self.name}: could not find an interior point of the parameter domain")

    def coordinate_index(self, name: str) -> int:
        try:
            return self.coordinate_names.index(name)
        except ValueError:
            raise SpecError(f"unknown coordinate '{name}' for {self.name}") from None

    # densities

    def density(self, p: Sequence[float], x: Optional[np.ndarray] = None) -> np.ndarray:
        p = self.require(p)
        points = self.space.points if x is None else as_points(x, self.space.dimension)
        return np.asarray(self.density_fn(p, points), dtype=float)

    def log_density(self, p: Sequence[float], x: np.ndarray) -> np.ndarray:
        values = self.density(p, x)
        floor = get_settings().density_floor
        if np.any(values < floor):
            raise DensityError(
                f"{self.name}: density below {floor:g} at {format_point(self.coordinate_names, p)}; "
                "point is ineligible for score evaluation"
            )
        return np.log(values)

    def analytic_score(self, p: Sequence[float], x: np.ndarray) -> Optional[np.ndarray]:
        if self.score_fn is None:
            return None
        p = self.require(p)
        return np.asarray(self.score_fn(p, as_points(x, self.space.dimension)), dtype=float).reshape(-1, self.k)

    def sample(self, p: Sequence[float], rng: np.random.Generator, size: int) -> np.ndarray:
        p = self.require(p)
        if self.sampler_fn is not None:
            return as_points(self.sampler_fn(p, rng, size), self.space.dimension)
        # fall back to drawing reference points with probabilities f_p * w
        masses = self.density_fn(p, self.space.points) * self.space.weights
        index = rng.choice(self.space.size, size=size, p=masses / masses.sum())
        return self.space.points[index]

    def total_mass(self, p: Sequence[float]) -> float:
        return float(np.sum(self.density(p) * self.space.weights))

    def check_normalization(self, tol: Optional[float] = None, probes: Optional[List[np.ndarray]] = None):
        """Verify the integral of f_p against the reference measure is 1 at probe points."""
        tol = get_settings().normalization_tol if tol is None else tol
        if not self.space.admits_exact():
            logger.debug("Skipping normalization check for %s: space too large", self.name)
            return
        for p in probes if probes is not None else self.domain_probes():
            mass = self.total_mass(p)
            if abs(mass - 1.0) > tol:
                raise DensityError(
                    f"{self.name}: densities integrate to {mass:.12g} at "
                    f"{format_point(self.coordinate_names, p)} (tolerance {tol:g})"
                )

    def domain_probes(self) -> List[np.ndarray]:
        center = self.center()
        probes = [center]
        for i in range(self.k):
            for frac in (0.1, 0.9):
                point = center.copy()
                point[i] = self.lower[i] + frac * (self.upper[i] - self.lower[i])
                if self.contains(point):
                    probes.append(point)
        return probes


def as_points(x, dimension: int) -> np.ndarray:
    points = np.asarray(x, dtype=float)
    if points.ndim == 0:
        points = points.reshape(1, 1)
    elif points.ndim == 1:
        points = points.reshape(-1, dimension) if dimension > 1 else points.reshape(-1, 1)
    if points.shape[1] != dimension:
        raise SpecError(f"Sample points must have {dimension} coordinates, got {points.shape[1]}")
    return points


def make_product(
    factors: Sequence[ParametricFamily],
    shared_params: Optional[Sequence[Mapping[str, str]]] = None,
    name: Optional[str] = None,
) -> ParametricFamily:
    """Independent joint observation of ``factors``.

    ``shared_params[i]`` renames coordinates of factor i into joint coordinate
    names; coordinates that end up with the same joint name are identified.
    Unmapped coordinates keep their own name, so equal names are shared.
    """
    factors = list(factors)
    if not factors:
        raise SpecError("make_product needs at least one factor")
    maps = list(shared_params) if shared_params is not None else [{} for _ in factors]
    if len(maps) != len(factors):
        raise SpecError("shared_params must provide one mapping per factor")

    joint_names: List[str] = []
    lower: Dict[str, float] = {}
    upper: Dict[str, float] = {}
    index_maps: List[np.ndarray] = []
    for family, mapping in zip(factors, maps):
        unknown = set(mapping) - set(family.coordinate_names)
        if unknown:
            raise SpecError(f"inconsistent identification map: {family.name} has no coordinate(s) {sorted(unknown)}")
        targets = [mapping.get(c, c) for c in family.coordinate_names]
        if len(set(targets)) != len(targets):
            raise SpecError(f"inconsistent identification map: two coordinates of {family.name} share a joint name")
        for target, lo, hi in zip(targets, family.lower, family.upper):
            if target not in lower:
                joint_names.append(target)
                lower[target], upper[target] = float(lo), float(hi)
            else:
                lower[target] = max(lower[target], float(lo))
                upper[target] = min(upper[target], float(hi))
                if not lower[target] < upper[target]:
                    raise SpecError(f"inconsistent identification map: empty domain for shared coordinate '{target}'")
        index_maps.append(np.array([joint_names.index(t) for t in targets], dtype=int))

    space = SampleSpace.product([f.space for f in factors])
    slices = space.factor_slices()
    k = len(joint_names)

    def density_fn(p, x):
        out = np.ones(x.shape[0])
        for family, idx, cols in zip(factors, index_maps, slices):
            out = out * family.density_fn(p[idx], x[:, cols])
        return out

    score_fn = None
    if all(f.has_analytic_score for f in factors):
        def score_fn(p, x):
            out = np.zeros((x.shape[0], k))
            for family, idx, cols in zip(factors, index_maps, slices):
                out[:, idx] += family.score_fn(p[idx], x[:, cols])
            return out

    def sampler_fn(p, rng, size):
        return np.hstack([f.sample(p[idx], rng, size) for f, idx in zip(factors, index_maps)])

    constraints = [(f, idx) for f, idx in zip(factors, index_maps) if f.constraint is not None]
    constraint = None
    if constraints:
        def constraint(p):
            return all(f.constraint(p[idx]) for f, idx in constraints)

    family = ParametricFamily(
        name=name or " x ".join(f.name for f in factors),
        space=space,
        coordinate_names=tuple(joint_names),
        lower=np.array([lower[n] for n in joint_names]),
        upper=np.array([upper[n] for n in joint_names]),
        density_fn=density_fn,
        score_fn=score_fn,
        sampler_fn=sampler_fn,
        constraint=constraint,
        constraint_label="; ".join(f.constraint_label for f, _ in constraints if f.constraint_label),
    )
    logger.debug("Product family %s over %d points, coordinates %s", family.name, space.size, joint_names)
    return family


def make_tabulated(
    space: SampleSpace,
    parameter_grids: Mapping[str, Sequence[float]],
    densities: np.ndarray,
    name: str = "tabulated",
    tol: Optional[float] = None,
) -> ParametricFamily:
    """Family given by density rows on a rectangular parameter grid.

    ``densities`` has shape (*grid lengths, space.size); rows are interpolated
    multilinearly in the parameters. The family has no analytic score.
    """
    tol = get_settings().table_normalization_tol if tol is None else tol
    names = tuple(parameter_grids)
    grids = tuple(np.asarray(parameter_grids[n], dtype=float) for n in names)
    table = np.asarray(densities, dtype=float)
    expected = tuple(len(g) for g in grids) + (space.size,)
    if table.shape != expected:
        raise SpecError(f"Density table has shape {table.shape}, expected {expected}")
    for n, g in zip(names, grids):
        if len(g) < 2 or np.any(np.diff(g) <= 0):
            raise SpecError(f"Parameter grid for '{n}' must be strictly increasing with at least 2 points")
    if np.any(table < 0) or not np.all(np.isfinite(table)):
        raise DensityError("Density table contains negative or non-finite entries")
    masses = table @ space.weights
    worst = np.unravel_index(np.argmax(np.abs(masses - 1.0)), masses.shape)
    if abs(masses[worst] - 1.0) > tol:
        at = format_point(names, [g[i] for g, i in zip(grids, worst)])
        raise DensityError(f"Density table row at {at} sums to {masses[worst]:.12g}, not 1 within {tol:g}")

    interpolator = RegularGridInterpolator(grids, table, method="linear", bounds_error=True)
    lookup = _PointLookup(space)

    def density_fn(p, x):
        row = interpolator(p.reshape(1, -1))[0]
        return row[lookup(x)]

    return ParametricFamily(
        name=name,
        space=space,
        coordinate_names=names,
        lower=np.array([g[0] for g in grids]),
        upper=np.array([g[-1] for g in grids]),
        density_fn=density_fn,
    )


class _PointLookup:
    """Maps sample points back to reference point indices."""

    def __init__(self, space: SampleSpace):
        self.space = space
        self._index: Optional[Dict[tuple, int]] = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        points = self.space.points
        if x is points or (x.shape == points.shape and np.array_equal(x, points)):
            return np.arange(points.shape[0])
        if self._index is None:
            self._index = {tuple(row): i for i, row in enumerate(points)}
        try:
            return np.array([self._index[tuple(row)] for row in x], dtype=int)
        except KeyError as exc:
            raise SpecError(f"Point {exc.args[0]} is not a reference point of the tabulated space") from None


def reweight(family: ParametricFamily, weight: Callable[[np.ndarray], np.ndarray]) -> ParametricFamily:
    """Express the same measures against the reference measure w * mu.

    Densities become f_p / w. The analytic score is unchanged because log w
    does not depend on the parameters.
    """
    points = family.space.points
    w = np.asarray(weight(points), dtype=float).reshape(-1)
    if w.shape != (family.space.size,) or np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise SpecError("Reweighting function must be finite and strictly positive on every reference point")
    space = family.space.with_weights(family.space.weights * w)
    base_density = family.density_fn

    def density_fn(p, x):
        if x is points:
            return base_density(p, x) / w
        return base_density(p, x) / np.asarray(weight(x), dtype=float).reshape(-1)

    return replace(family, name=f"{family.name} (reweighted)", space=space, density_fn=density_fn)


def restrict(
    family: ParametricFamily,
    bounds: Mapping[str, Tuple[Optional[float], Optional[float]]],
) -> ParametricFamily:
    """Narrow the parameter box. ``None`` keeps a side; widening is an error."""
    if not bounds:
        return family
    lower, upper = family.lower.copy(), family.upper.copy()
    for name, (lo, hi) in bounds.items():
        i = family.coordinate_index(name)
        lo = lower[i] if lo is None else float(lo)
        hi = upper[i] if hi is None else float(hi)
        if lo < family.lower[i] or hi > family.upper[i] or not lo < hi:
            raise SpecError(
                f"domain for '{name}' must be a nonempty part of ({family.lower[i]:g}, {family.upper[i]:g}), "
                f"got ({lo:g}, {hi:g})"
            )
        lower[i], upper[i] = lo, hi
    return replace(family, lower=lower, upper=upper)
