import json

import pytest

from src.models.builtins import make_bernoulli, make_categorical, make_gaussian, make_poisson
from src.models.family import make_product


@pytest.fixture(scope="session")
def gaussian_mean():
    """N(mu, 1), mu free."""
    return make_gaussian(mu_known=False, sigma_known=True, sigma=1.0)


@pytest.fixture(scope="session")
def gaussian_scale():
    """N(0, sigma^2), sigma free."""
    return make_gaussian(mu_known=True, sigma_known=False, mu=0.0)


@pytest.fixture(scope="session")
def gaussian_both():
    return make_gaussian(mu_known=False, sigma_known=False, mu_range=(-3.0, 3.0), sigma_range=(0.5, 3.0))


@pytest.fixture(scope="session")
def bernoulli():
    return make_bernoulli()


@pytest.fixture(scope="session")
def poisson():
    return make_poisson(rate_range=(0.0, 10.0))


@pytest.fixture(scope="session")
def categorical3():
    return make_categorical(3)


@pytest.fixture(scope="session")
def two_channel():
    """N(mu, 1) x N(mu, 4) observed jointly with a shared mu."""
    factors = [
        make_gaussian(False, True, sigma=1.0, mu_range=(-3.0, 3.0), nodes=801),
        make_gaussian(False, True, sigma=2.0, mu_range=(-3.0, 3.0), nodes=801),
    ]
    return make_product(factors)


@pytest.fixture(scope="session")
def canonical_families(gaussian_mean, gaussian_scale, gaussian_both, bernoulli, poisson, categorical3):
    return {
        "gaussian_mean": gaussian_mean,
        "gaussian_scale": gaussian_scale,
        "gaussian_both": gaussian_both,
        "bernoulli": bernoulli,
        "poisson": poisson,
        "categorical3": categorical3,
    }


@pytest.fixture
def write_spec(tmp_path):
    """Writes a model spec document and returns its path."""

    def write(document, name="model.json"):
        path = tmp_path / name
        path.write_text(json.dumps(document), encoding="utf-8")
        return path

    return write
