import numpy as np
import pytest

from proxl2o.densecore import named_stream
from proxl2o.problems import CompositeProblem, generate_lasso


@pytest.fixture
def rng():
    return named_stream(1234, "tests")


def small_lasso(seed=5, m=50, n=100, s=20, lam=0.1) -> CompositeProblem:
    inst = generate_lasso(named_stream(seed, "tests/lasso"), m, n, s, lam)
    return CompositeProblem.from_lasso(inst)


def scalar_lasso(a=1.0, b=2.0, lam=1.0) -> CompositeProblem:
    return CompositeProblem(
        "lasso_quadratic", "l1", lam,
        A=np.array([[a]]), b=np.array([b]))
