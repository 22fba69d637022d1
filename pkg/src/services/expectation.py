"""Expectation engine E(g | p) shared by every integral in the toolkit.

Both backends reduce to a weighted sample: the exact backend enumerates the
reference points with masses f_p(x) w(x), the Monte Carlo backend draws
points with masses 1/n. Sums use numpy's pairwise reduction in the fixed
enumeration order.

Monte Carlo draws are split into fixed-size chunks. Chunk ``c`` is drawn
from a Philox generator keyed by ``SeedSequence(seed, spawn_key=(c,))``, so
the sample, and everything computed from it, is a function of
(seed, mc_samples) alone, whatever the number of workers.
"""
import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Optional, Tuple

import numpy as np

from src.config import get_settings
from src.errors import ParameterDomainError, SpecError
from src.models.family import ParametricFamily

logger = logging.getLogger(__name__)

MC_CHUNK_SIZE = 16_384
MAX_SEED = 2**64 - 1

SampleFunction = Callable[[np.ndarray], np.ndarray]


class MethodKind(str, enum.Enum):
    EXACT = "exact"
    MONTE_CARLO = "mc"


@dataclass(frozen=True)
class ExpectationMethod:
    kind: MethodKind = MethodKind.EXACT
    mc_samples: int = 100_000
    seed: int = 0
    workers: Optional[int] = None

    def __post_init__(self):
        if self.mc_samples < 1:
            raise SpecError(f"mc_samples must be positive, got {self.mc_samples}")
        if not 0 <= self.seed <= MAX_SEED:
            raise SpecError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @classmethod
    def exact(cls) -> "ExpectationMethod":
        return cls(MethodKind.EXACT)

    @classmethod
    def monte_carlo(cls, samples: int, seed: int, workers: Optional[int] = None) -> "ExpectationMethod":
        return cls(MethodKind.MONTE_CARLO, mc_samples=samples, seed=seed, workers=workers)

    @property
    def is_exact(self) -> bool:
        return self.kind is MethodKind.EXACT

    def with_seed(self, seed: int) -> "ExpectationMethod":
        return replace(self, seed=seed)

    def require_samples(self, minimum: int, operation: str):
        if not self.is_exact and self.mc_samples < minimum:
            raise SpecError(f"{operation} needs at least {minimum} Monte Carlo samples, got {self.mc_samples}")


@dataclass(frozen=True)
class WeightedSample:
    """Points with probability masses; ``mean`` is the expectation under p."""

    points: np.ndarray
    masses: np.ndarray
    method: ExpectationMethod

    @property
    def size(self) -> int:
        return int(self.points.shape[0])

    @cached_property
    def total_mass(self) -> float:
        return float(np.sum(self.masses))

    def mean(self, values: np.ndarray) -> float:
        """Mass-weighted mean, normalized by the total mass; constants come back exactly."""
        values = np.broadcast_to(np.asarray(values, dtype=float), self.masses.shape)
        if values.size and np.all(values == values[0]):
            return float(values[0])
        return float(np.sum(values * self.masses) / self.total_mass)


def chunk_generator(seed: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chunk,))))


def draw(family: ParametricFamily, p, method: ExpectationMethod) -> np.ndarray:
    """The Monte Carlo sample for (seed, mc_samples), shape (mc_samples, d)."""
    p = family.require(p)
    n = method.mc_samples
    sizes = [min(MC_CHUNK_SIZE, n - start) for start in range(0, n, MC_CHUNK_SIZE)]
    workers = method.workers or get_settings().mc_workers

    def run(chunk: int) -> np.ndarray:
        return family.sample(p, chunk_generator(method.seed, chunk), sizes[chunk])

    logger.debug("Drawing %d samples in %d chunks with %d worker(s)", n, len(sizes), workers)
    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run, range(len(sizes))))
    else:
        chunks = [run(c) for c in range(len(sizes))]
    return np.concatenate(chunks, axis=0)


def weighted_sample(family: ParametricFamily, p, method: ExpectationMethod) -> WeightedSample:
    p = family.require(p)
    if not method.is_exact:
        points = draw(family, p, method)
        return WeightedSample(points, np.full(points.shape[0], 1.0 / points.shape[0]), method)

    space = family.space
    if not space.admits_exact():
        raise ParameterDomainError(
            f"Exact expectation requested on an oversized space ({space.dimension} dimensions, "
            f"{space.size} points); use Monte Carlo"
        )
    density = family.density(p)
    # points with negligible density carry no mass and are never handed to g
    support = density > get_settings().support_floor
    return WeightedSample(space.points[support], density[support] * space.weights[support], method)


def expect(g: SampleFunction, family: ParametricFamily, p, method: ExpectationMethod) -> float:
    sample = weighted_sample(family, p, method)
    return sample.mean(g(sample.points))


def expect_pair(
    g: SampleFunction,
    h: SampleFunction,
    family: ParametricFamily,
    p,
    method: ExpectationMethod,
) -> Tuple[float, float, float]:
    """(E[g], E[h], E[g h]) from one pass over the same points."""
    sample = weighted_sample(family, p, method)
    gv = np.asarray(g(sample.points), dtype=float)
    hv = np.asarray(h(sample.points), dtype=float)
    return sample.mean(gv), sample.mean(hv), sample.mean(gv * hv)
