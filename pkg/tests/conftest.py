import numpy as np
import pytest

from smp_bsde.lq_problem import LqCoefficients, preset
from smp_bsde.riccati import integrate_riccati


def scalar_problem(**kw) -> LqCoefficients:
    """d = l = m = 1 problem; keyword arguments override the zero defaults."""
    base = dict(
        A=[[0.0]], B=[[1.0]], beta=[0.0], C=[[[0.0]]], D=[[[0.0]]], Sigma=[[0.0]],
        R_x=[[0.0]], R_xu=[[0.0]], R_u=[[1.0]], G=[[1.0]], x0=[1.0], T=1.0,
    )
    base.update(kw)
    return LqCoefficients.from_mapping(base)


def random_problem(rng, d=3, l=2, m=2, drift_only=False) -> LqCoefficients:
    def sym_pd(n, shift):
        a = rng.normal(size=(n, n))
        return a @ a.T / n + shift * np.eye(n)

    return LqCoefficients.from_mapping(
        dict(
            A=rng.normal(size=(d, d)) * 0.5,
            B=rng.normal(size=(d, l)),
            beta=rng.normal(size=d),
            C=np.zeros((m, d, d)) if drift_only else rng.normal(size=(m, d, d)) * 0.1,
            D=np.zeros((m, d, l)) if drift_only else rng.normal(size=(m, d, l)) * 0.1,
            Sigma=rng.normal(size=(d, m)) * 0.3,
            R_x=sym_pd(d, 0.1),
            R_xu=rng.normal(size=(l, d)) * 0.1,
            R_u=sym_pd(l, 1.0),
            G=sym_pd(d, 0.1),
            x0=rng.normal(size=d),
            T=0.5,
        )
    )


@pytest.fixture(scope="session")
def ex1():
    return preset("example1")


@pytest.fixture(scope="session")
def ex2():
    return preset("example2")


@pytest.fixture(scope="session")
def sol1(ex1):
    return integrate_riccati(ex1, 10_000)


@pytest.fixture(scope="session")
def sol1_coarse(ex1):
    return integrate_riccati(ex1, 1_000)


@pytest.fixture(scope="session")
def sol2_coarse(ex2):
    return integrate_riccati(ex2, 1_000)
