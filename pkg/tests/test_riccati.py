import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_problem, scalar_problem
from smp_bsde.errors import ConfigError, DomainError, SingularControlError
from smp_bsde.lq_problem import (
    LqCoefficients,
    diffusion_bar,
    drift_bar,
    feedback_map,
    preset,
    running_cost,
    terminal_cost,
    terminal_gradient,
)
from smp_bsde.riccati import (
    dp_optimal_control,
    integrate_riccati,
    load_solution,
    reference_pq,
    riccati_rhs,
    save_solution,
    value_at,
)


def rhs_oracle(c, Gam, gam):
    """Loop-based evaluation of the Riccati right-hand side."""
    m = c.m
    R_hat = c.R_u.copy()
    S_hat = c.B.T @ Gam + c.R_xu
    CGC = np.zeros_like(Gam)
    for j in range(m):
        R_hat += c.D[j].T @ Gam @ c.D[j]
        S_hat += c.D[j].T @ Gam @ c.C[j]
        CGC += c.C[j].T @ Gam @ c.C[j]
    Rinv = np.linalg.inv(R_hat)
    Psi = Rinv @ S_hat
    src = c.B.T @ gam
    for j in range(m):
        src = src + c.D[j].T @ Gam @ c.Sigma[:, j]
    psi = Rinv @ src
    dG = -(Gam @ c.A + c.A.T @ Gam + CGC + c.R_x - S_hat.T @ Rinv @ S_hat)
    dg = -(c.A.T @ gam + sum(c.C[j].T @ Gam @ c.Sigma[:, j] for j in range(m)) - Psi.T @ R_hat @ psi + Gam @ c.beta)
    dk = 0.5 * psi @ R_hat @ psi - c.beta @ gam - 0.5 * sum(c.Sigma[:, j] @ Gam @ c.Sigma[:, j] for j in range(m))
    return dG, dg, dk


def closed_form(g0, r, T, t):
    return g0 / (1 + g0 * (T - t) / r)


# riccati_rhs

def test_homogeneous_problem_stays_homogeneous():
    rng = np.random.default_rng(0)
    raw = random_problem(rng).to_mapping()
    raw["beta"] = np.zeros(3)
    raw["Sigma"] = np.zeros((3, 2))
    c = LqCoefficients.from_mapping(raw)
    _, dg, dk = riccati_rhs(c, c.G, np.zeros(3), 0.0)
    assert not dg.any() and dk == 0


def test_scalar_rhs():
    c = scalar_problem(R_u=[[2.0]])
    dG, _, _ = riccati_rhs(c, np.array([[3.0]]), np.zeros(1), 0.0)
    assert dG[0, 0] == pytest.approx(9.0 / 2.0, rel=1e-15)


def test_rhs_matches_oracle_example1(ex1):
    dG, dg, dk = riccati_rhs(ex1, ex1.G, np.zeros(6), 0.0)
    oG, og, ok = rhs_oracle(ex1, ex1.G, np.zeros(6))
    np.testing.assert_allclose(dG, oG, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(dg, og, rtol=1e-12, atol=1e-12)
    assert dk == pytest.approx(ok, rel=1e-12)


@settings(max_examples=30)
@given(seed=st.integers(0, 2**31 - 1))
def test_rhs_matches_oracle_random(seed):
    rng = np.random.default_rng(seed)
    c = random_problem(rng)
    a = rng.normal(size=(3, 3))
    Gam = a @ a.T
    gam = rng.normal(size=3)
    for got, want in zip(riccati_rhs(c, Gam, gam, 0.0), rhs_oracle(c, Gam, gam)):
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)


def test_singular_r_hat_reports_time():
    c = preset("example2")
    with pytest.raises(SingularControlError) as info:
        riccati_rhs(c, -1e6 * np.eye(6), np.zeros(6), 0.0, t=0.25)
    assert info.value.t == 0.25


# integrate_riccati

def test_scalar_closed_form():
    c = scalar_problem(R_u=[[0.5]], G=[[3.0]], T=1.0)
    sol = integrate_riccati(c, 10_000)
    exact = closed_form(3.0, 0.5, 1.0, sol.grid)
    assert np.max(np.abs(sol.Gamma[:, 0, 0] - exact)) < 1e-8


def test_rk4_order():
    c = scalar_problem(R_u=[[0.5]], G=[[3.0]], T=1.0)
    errs = []
    for n in (20, 40, 80, 160):
        sol = integrate_riccati(c, n)
        errs.append(abs(sol.Gamma[0, 0, 0] - closed_form(3.0, 0.5, 1.0, 0.0)))
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    assert min(ratios) >= 8
    assert ratios[-1] == pytest.approx(16, rel=0.1)


@pytest.mark.parametrize("name", ["example1", "example2"])
def test_terminal_anchoring_and_symmetry(name, sol1_coarse, sol2_coarse):
    c = preset(name)
    sol = sol1_coarse if name == "example1" else sol2_coarse
    assert np.array_equal(sol.Gamma[-1], c.G)
    assert not sol.gamma[-1].any() and sol.kappa[-1] == 0
    assert np.max(np.abs(sol.Gamma - np.swapaxes(sol.Gamma, 1, 2))) == 0


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_anchoring_random(seed):
    c = random_problem(np.random.default_rng(seed))
    sol = integrate_riccati(c, 50)
    assert np.array_equal(sol.Gamma[-1], c.G)
    assert np.array_equal(sol.Gamma, np.swapaxes(sol.Gamma, 1, 2))


def test_bad_n_ode(ex1):
    for n in (0, -3, 2.5):
        with pytest.raises(ConfigError):
            integrate_riccati(ex1, n)


@pytest.mark.slow
def test_grid_refinement_example1(ex1, sol1):
    fine = integrate_riccati(ex1, 100_000)
    assert np.max(np.abs(fine.Gamma[0] - sol1.Gamma[0])) < 1e-8


def test_hjb_residual(sol2_coarse, ex2):
    """V solves V_t + min_u {b'V_x + 1/2 Tr(s s' V_xx) + f} = 0 at interior nodes."""
    c, sol = ex2, sol2_coarse
    rng = np.random.default_rng(5)
    h = sol.grid[1]
    for n in (100, 500, 900):
        t = sol.grid[n]
        for _ in range(5):
            x = rng.normal(size=6) * 0.3
            V = [float(value_at(sol, sol.grid[n + k], x).value) for k in (-2, -1, 1, 2)]
            Vt = (V[0] - 8 * V[1] + 8 * V[2] - V[3]) / (12 * h)
            v = value_at(sol, t, x)

            def generator(u):
                s = diffusion_bar(c, t, x, u)
                return drift_bar(c, t, x, u) @ v.grad + 0.5 * np.sum(s * (v.hess @ s)) + running_cost(c, t, x, u)

            u = dp_optimal_control(c, sol, t, x)
            resid = Vt + generator(u)
            assert abs(resid) < 1e-7 * (1 + abs(Vt))
            # u is the minimiser of the generator
            for _ in range(10):
                assert generator(u) <= generator(u + 0.1 * rng.normal(size=2))


# value_at

def test_value_at_examples(sol1_coarse, ex1):
    v = value_at(sol1_coarse, 0.2, np.zeros(6))
    n = sol1_coarse.node(0.2)
    assert v.value == sol1_coarse.kappa[n]
    np.testing.assert_array_equal(v.grad, sol1_coarse.gamma[n])
    x = np.random.default_rng(0).normal(size=6)
    vT = value_at(sol1_coarse, ex1.T, x)
    assert vT.value == pytest.approx(terminal_cost(ex1, x), rel=1e-14)
    assert value_at(sol1_coarse, 0.0, ex1.x0).value > 0


def test_value_matches_benchmark_value(sol1, ex1):
    assert float(value_at(sol1, 0.0, ex1.x0).value) == pytest.approx(1.45989, abs=1e-5)


def test_value_domain(sol1_coarse):
    with pytest.raises(DomainError):
        value_at(sol1_coarse, -0.1, np.zeros(6))
    with pytest.raises(DomainError):
        value_at(sol1_coarse, 0.6, np.zeros(6))


def test_value_batched(sol1_coarse):
    X = np.random.default_rng(1).normal(size=(4, 6))
    v = value_at(sol1_coarse, 0.1, X)
    for k in range(4):
        assert v.value[k] == pytest.approx(float(value_at(sol1_coarse, 0.1, X[k]).value), rel=1e-14)


# feedback

def test_dp_control_drift_collapse(sol1_coarse, ex1):
    x = np.random.default_rng(2).normal(size=6)
    v = value_at(sol1_coarse, 0.3, x)
    expected = -np.linalg.solve(ex1.R_u, ex1.B.T @ v.grad)
    np.testing.assert_allclose(dp_optimal_control(ex1, sol1_coarse, 0.3, x), expected, rtol=1e-12, atol=1e-14)


def test_dp_control_zero_at_stationary_point(sol1_coarse, ex1):
    n = sol1_coarse.node(0.1)
    x = -np.linalg.solve(sol1_coarse.Gamma[n], sol1_coarse.gamma[n])
    assert np.max(np.abs(dp_optimal_control(ex1, sol1_coarse, 0.1, x))) < 1e-12


@pytest.mark.parametrize("name", ["example1", "example2"])
def test_smp_dp_feedback_agreement(name, sol1_coarse, sol2_coarse):
    c = preset(name)
    sol = sol1_coarse if name == "example1" else sol2_coarse
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        t = float(rng.uniform(0, c.T))
        x = rng.normal(size=6)
        u = dp_optimal_control(c, sol, t, x)
        P, Q = reference_pq(c, sol, t, x, u)
        worst = max(worst, np.max(np.abs(u - feedback_map(c, t, x, P, Q))))
    assert worst < 1e-9


def test_reference_pq_terminal_identity(sol2_coarse, ex2):
    x = np.random.default_rng(4).normal(size=6)
    P, Q = reference_pq(ex2, sol2_coarse, ex2.T, x, np.zeros(2))
    np.testing.assert_allclose(P, -terminal_gradient(ex2, x), rtol=1e-15)
    np.testing.assert_allclose(Q, -ex2.G @ diffusion_bar(ex2, ex2.T, x, np.zeros(2)), rtol=1e-15)


def test_reference_p0(sol1, ex1):
    P, _ = reference_pq(ex1, sol1, 0.0, ex1.x0, np.zeros(2))
    np.testing.assert_allclose(P, -(sol1.Gamma[0] @ ex1.x0 + sol1.gamma[0]), rtol=1e-15)


# cache

def test_save_load_round_trip(tmp_path, sol1_coarse):
    path = save_solution(sol1_coarse, tmp_path / "ric.npz")
    again = load_solution(path)
    for k in ("grid", "Gamma", "gamma", "kappa"):
        assert np.array_equal(getattr(again, k), getattr(sol1_coarse, k))
