"""Sample spaces carrying a reference measure.

A space is a finite set of reference points with strictly positive weights:
counting weights for discrete supports, composite Simpson weights for a
truncated continuous grid, and products of those for joint observations.
Every integral against the reference measure is therefore a weighted sum.
"""
import enum
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np

from src.config import get_settings
from src.errors import ParameterDomainError, SpecError

logger = logging.getLogger(__name__)


class SpaceKind(str, enum.Enum):
    DISCRETE = "discrete"
    GRID = "grid"
    PRODUCT = "product"


def simpson_weights(a: float, b: float, nodes: int) -> np.ndarray:
    """Composite Simpson weights h/3 * [1, 4, 2, 4, ..., 2, 4, 1]."""
    h = (b - a) / (nodes - 1)
    weights = np.full(nodes, 2.0)
    weights[1::2] = 4.0
    weights[0] = weights[-1] = 1.0
    return weights * (h / 3.0)


@dataclass(frozen=True, eq=False)
class SampleSpace:
    kind: SpaceKind
    coordinate_names: Tuple[str, ...]
    factors: Tuple["SampleSpace", ...] = ()
    interval: Optional[Tuple[float, float]] = None
    nodes: Optional[int] = None
    _points: Optional[np.ndarray] = field(default=None, repr=False)
    _weights: Optional[np.ndarray] = field(default=None, repr=False)

    # constructors

    @classmethod
    def discrete(
        cls,
        values: Sequence[float],
        weights: Optional[Sequence[float]] = None,
        name: str = "x",
    ) -> "SampleSpace":
        points = np.asarray(values, dtype=float).reshape(-1, 1)
        if points.shape[0] == 0:
            raise SpecError("A discrete sample space needs at least one point")
        w = np.ones(points.shape[0]) if weights is None else np.asarray(weights, dtype=float)
        space = cls(
            kind=SpaceKind.DISCRETE,
            coordinate_names=(name,),
            _points=points,
            _weights=w,
        )
        space._validate_weights()
        return space

    @classmethod
    def grid(cls, a: float, b: float, nodes: Optional[int] = None, name: str = "x") -> "SampleSpace":
        nodes = get_settings().grid_nodes if nodes is None else int(nodes)
        if not a < b:
            raise SpecError(f"Grid interval must satisfy a < b, got [{a}, {b}]")
        if nodes < 3 or nodes % 2 == 0:
            raise SpecError(f"Simpson grids need an odd node count >= 3, got {nodes}")
        points = np.linspace(a, b, nodes).reshape(-1, 1)
        logger.debug("Grid [%g, %g] with %d Simpson nodes", a, b, nodes)
        return cls(
            kind=SpaceKind.GRID,
            coordinate_names=(name,),
            interval=(float(a), float(b)),
            nodes=nodes,
            _points=points,
            _weights=simpson_weights(a, b, nodes),
        )

    @classmethod
    def product(cls, factors: Sequence["SampleSpace"], names: Optional[Sequence[str]] = None) -> "SampleSpace":
        factors = tuple(factors)
        if not factors:
            raise SpecError("A product space needs at least one factor")
        dimension = sum(f.dimension for f in factors)
        if names is None:
            names = tuple(f"x{i + 1}" for i in range(dimension))
        if len(names) != dimension:
            raise SpecError(f"Expected {dimension} coordinate names, got {len(names)}")
        return cls(kind=SpaceKind.PRODUCT, coordinate_names=tuple(names), factors=factors)

    def with_weights(self, weights: np.ndarray) -> "SampleSpace":
        """Same points, different reference measure."""
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (self.size,):
            raise SpecError(f"Expected {self.size} reference weights, got shape {weights.shape}")
        space = SampleSpace(
            kind=self.kind,
            coordinate_names=self.coordinate_names,
            factors=self.factors,
            interval=self.interval,
            nodes=self.nodes,
            _points=self.points,
            _weights=weights,
        )
        space._validate_weights()
        return space

    # structure

    @property
    def dimension(self) -> int:
        return len(self.coordinate_names)

    @property
    def size(self) -> int:
        if self.kind is SpaceKind.PRODUCT and self._points is None:
            return int(np.prod([f.size for f in self.factors], dtype=np.int64))
        return int(self.points.shape[0])

    @cached_property
    def points(self) -> np.ndarray:
        """Reference points, shape (size, dimension), last factor varying fastest."""
        if self._points is not None:
            return self._points
        self._require_materializable()
        index = np.indices([f.size for f in self.factors]).reshape(len(self.factors), -1)
        return np.hstack([f.points[i] for f, i in zip(self.factors, index)])

    @cached_property
    def weights(self) -> np.ndarray:
        if self._weights is not None:
            return self._weights
        self._require_materializable()
        index = np.indices([f.size for f in self.factors]).reshape(len(self.factors), -1)
        weights = np.ones(index.shape[1])
        for f, i in zip(self.factors, index):
            weights = weights * f.weights[i]
        return weights

    def admits_exact(self) -> bool:
        settings = get_settings()
        return self.dimension <= settings.max_exact_dimension and self.size <= settings.max_exact_points

    def factor_slices(self) -> Tuple[slice, ...]:
        """Column slices of ``points`` belonging to each factor."""
        slices, start = [], 0
        for f in self.factors:
            slices.append(slice(start, start + f.dimension))
            start += f.dimension
        return tuple(slices)

    def _require_materializable(self):
        if not self.admits_exact():
            raise ParameterDomainError(
                f"Exact expectation unavailable: product space of dimension {self.dimension} "
                f"with {self.size} points exceeds the exact-expectation limits"
            )

    def _validate_weights(self):
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights <= 0):
            raise SpecError("Reference weights must be finite and strictly positive")
