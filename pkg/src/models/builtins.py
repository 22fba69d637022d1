"""Canonical families: Gaussian, Bernoulli, Poisson and categorical."""
import logging
from typing import Optional, Tuple

import numpy as np
from scipy import stats

from src.config import get_settings
from src.errors import SpecError
from src.models.family import ParametricFamily
from src.models.space import SampleSpace

logger = logging.getLogger(__name__)

DEFAULT_MU_RANGE = (-5.0, 5.0)
DEFAULT_SIGMA_RANGE = (0.25, 4.0)
DEFAULT_RATE_RANGE = (0.0, 20.0)


def make_gaussian(
    mu_known: bool,
    sigma_known: bool,
    mu: float = 0.0,
    sigma: float = 1.0,
    mu_range: Tuple[float, float] = DEFAULT_MU_RANGE,
    sigma_range: Tuple[float, float] = DEFAULT_SIGMA_RANGE,
    nodes: Optional[int] = None,
    span_sigmas: Optional[float] = None,
) -> ParametricFamily:
    """Normal family on a truncated Simpson grid.

    Free coordinates are drawn from (mu, sigma) in that order; known values
    are taken from ``mu`` / ``sigma``. The grid spans
    [mu_lo - s * sigma_hi, mu_hi + s * sigma_hi] with s = ``span_sigmas``.
    """
    if mu_known and sigma_known:
        raise SpecError("Gaussian family needs at least one free coordinate")
    if sigma_known and sigma <= 0:
        raise SpecError(f"Gaussian scale must be positive, got sigma={sigma}")
    if not sigma_known and sigma_range[0] < 0:
        raise SpecError(f"Gaussian scale domain must exclude sigma <= 0, got {sigma_range}")
    for label, (lo, hi) in (("mu", mu_range), ("sigma", sigma_range)):
        if not lo < hi:
            raise SpecError(f"Empty domain for {label}: {lo} >= {hi}")

    span = get_settings().grid_sigmas if span_sigmas is None else span_sigmas
    mu_lo, mu_hi = (mu, mu) if mu_known else mu_range
    sigma_hi = sigma if sigma_known else sigma_range[1]
    space = SampleSpace.grid(mu_lo - span * sigma_hi, mu_hi + span * sigma_hi, nodes)

    names, lower, upper = [], [], []
    if not mu_known:
        names.append("mu")
        lower.append(mu_range[0])
        upper.append(mu_range[1])
    if not sigma_known:
        names.append("sigma")
        lower.append(sigma_range[0])
        upper.append(sigma_range[1])

    def unpack(p):
        m = mu if mu_known else p[0]
        s = sigma if sigma_known else p[-1]
        return m, s

    def density_fn(p, x):
        m, s = unpack(p)
        return stats.norm.pdf(x[:, 0], loc=m, scale=s)

    def score_fn(p, x):
        m, s = unpack(p)
        z = x[:, 0] - m
        columns = []
        if not mu_known:
            columns.append(z / s**2)
        if not sigma_known:
            columns.append((z**2 - s**2) / s**3)
        return np.column_stack(columns)

    def sampler_fn(p, rng, size):
        m, s = unpack(p)
        return rng.normal(m, s, size=size).reshape(-1, 1)

    label = "gaussian(" + ", ".join(
        [f"mu={mu:g}" if mu_known else "mu", f"sigma={sigma:g}" if sigma_known else "sigma"]
    ) + ")"
    family = ParametricFamily(
        name=label,
        space=space,
        coordinate_names=tuple(names),
        lower=np.array(lower, dtype=float),
        upper=np.array(upper, dtype=float),
        density_fn=density_fn,
        score_fn=score_fn,
        sampler_fn=sampler_fn,
    )
    family.check_normalization()
    return family


def make_bernoulli() -> ParametricFamily:
    space = SampleSpace.discrete([0.0, 1.0])

    def density_fn(p, x):
        v = x[:, 0]
        return np.where(v == 1.0, p[0], np.where(v == 0.0, 1.0 - p[0], 0.0))

    def score_fn(p, x):
        return ((x[:, 0] - p[0]) / (p[0] * (1.0 - p[0]))).reshape(-1, 1)

    def sampler_fn(p, rng, size):
        return rng.binomial(1, p[0], size=size).astype(float).reshape(-1, 1)

    family = ParametricFamily(
        name="bernoulli",
        space=space,
        coordinate_names=("p",),
        lower=np.array([0.0]),
        upper=np.array([1.0]),
        density_fn=density_fn,
        score_fn=score_fn,
        sampler_fn=sampler_fn,
    )
    family.check_normalization()
    return family


def poisson_truncation(rate: float, tail_mass: float) -> int:
    """Smallest n whose upper tail P(X > n) is below ``tail_mass``."""
    start = stats.poisson.ppf(1.0 - tail_mass, rate)
    n = int(start) if np.isfinite(start) else int(rate)
    while stats.poisson.sf(n, rate) >= tail_mass:
        n += 1
    while n > 0 and stats.poisson.sf(n - 1, rate) < tail_mass:
        n -= 1
    return n


def make_poisson(
    tail_mass: Optional[float] = None,
    rate_range: Tuple[float, float] = DEFAULT_RATE_RANGE,
) -> ParametricFamily:
    """Poisson family on {0, ..., n}, truncated for the largest rate in the domain."""
    tail_mass = get_settings().poisson_tail_mass if tail_mass is None else tail_mass
    if tail_mass > 1e-12:
        raise SpecError(f"Poisson tail_mass must be <= 1e-12, got {tail_mass:g}")
    if not 0 <= rate_range[0] < rate_range[1]:
        raise SpecError(f"Poisson rate domain must be a nonempty subset of (0, inf), got {rate_range}")
    n = poisson_truncation(rate_range[1], tail_mass)
    logger.debug("Poisson support truncated at %d for rate <= %g", n, rate_range[1])
    space = SampleSpace.discrete(np.arange(n + 1, dtype=float))

    def density_fn(p, x):
        return stats.poisson.pmf(x[:, 0], p[0])

    def score_fn(p, x):
        return (x[:, 0] / p[0] - 1.0).reshape(-1, 1)

    def sampler_fn(p, rng, size):
        return rng.poisson(p[0], size=size).astype(float).reshape(-1, 1)

    family = ParametricFamily(
        name="poisson",
        space=space,
        coordinate_names=("lambda",),
        lower=np.array([rate_range[0]], dtype=float),
        upper=np.array([rate_range[1]], dtype=float),
        density_fn=density_fn,
        score_fn=score_fn,
        sampler_fn=sampler_fn,
    )
    family.check_normalization()
    return family


def make_categorical(m: int) -> ParametricFamily:
    """Outcomes 1..m; the chart is the first m-1 probabilities, outcome m gets the rest."""
    if m < 2:
        raise SpecError(f"Categorical family needs m >= 2, got {m}")
    space = SampleSpace.discrete(np.arange(1, m + 1, dtype=float))
    outcomes = np.arange(1, m + 1)

    def probabilities(p):
        return np.append(p, 1.0 - p.sum())

    def outcome_index(x):
        v = x[:, 0]
        index = np.rint(v).astype(int) - 1
        valid = (index >= 0) & (index < m) & (v == index + 1)
        return index, valid

    def density_fn(p, x):
        index, valid = outcome_index(x)
        return np.where(valid, probabilities(p)[np.clip(index, 0, m - 1)], 0.0)

    def score_fn(p, x):
        index, _ = outcome_index(x)
        probs = probabilities(p)
        hits = (index[:, None] == np.arange(m - 1)[None, :]) / probs[:-1]
        return hits - ((index == m - 1) / probs[-1])[:, None]

    def sampler_fn(p, rng, size):
        return rng.choice(outcomes, size=size, p=probabilities(p)).astype(float).reshape(-1, 1)

    family = ParametricFamily(
        name=f"categorical{m}",
        space=space,
        coordinate_names=tuple(f"p{i}" for i in range(1, m)),
        lower=np.zeros(m - 1),
        upper=np.ones(m - 1),
        density_fn=density_fn,
        score_fn=score_fn,
        sampler_fn=sampler_fn,
        constraint=lambda p: p.sum() < 1.0,
        constraint_label="probabilities must sum to less than 1",
    )
    family.check_normalization()
    return family
