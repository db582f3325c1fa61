import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import scalar_problem
from smp_bsde.checkpoint import load_checkpoint, save_checkpoint
from smp_bsde.dp_baseline import (
    dp_loss_and_gradients,
    dp_rollout,
    init_dp_state,
    robust_loss,
    train_dp,
)
from smp_bsde.errors import SingularDiffusionError, UnsupportedProblemError
from smp_bsde.lq_problem import LqCoefficients, preset, running_cost, terminal_cost
from smp_bsde.path_engine import sample_brownian
from smp_bsde.smp_trainer import TrainingConfig


def small_config(**kw):
    base = dict(N=3, batch_size=5, iterations=0, hidden=(4,), seed=2, dtype="float64")
    base.update(kw)
    return TrainingConfig(**base)


def zero_nets(state):
    for z in state.zs:
        for a in z.arrays():
            a[...] = 0


def params(state):
    return [a for z in state.zs for a in z.arrays()]


# guard

def test_example2_rejected():
    with pytest.raises(UnsupportedProblemError):
        init_dp_state(small_config(), preset("example2"))


def test_state_dependent_diffusion_rejected():
    with pytest.raises(UnsupportedProblemError):
        init_dp_state(small_config(), scalar_problem(Sigma=[[1.0]], C=[[[0.5]]]))


def test_singular_diffusion_rejected():
    with pytest.raises(SingularDiffusionError):
        init_dp_state(small_config(), scalar_problem(Sigma=[[0.0]]))


def test_any_control_dependent_diffusion_rejected(ex1):
    rng = np.random.default_rng(0)
    for _ in range(5):
        raw = ex1.to_mapping()
        D = np.zeros((6, 6, 2))
        D[rng.integers(6), rng.integers(6), rng.integers(2)] = rng.normal()
        raw["D"] = D
        with pytest.raises(UnsupportedProblemError):
            init_dp_state(small_config(), LqCoefficients.from_mapping(raw))


# rollout

def test_zero_networks_uncontrolled(ex1):
    raw = ex1.to_mapping()
    raw["R_xu"] = np.zeros((2, 6))
    c = LqCoefficients.from_mapping(raw)
    state = init_dp_state(small_config(), c)
    zero_nets(state)
    dW = sample_brownian(4, 5, 3, 6, c.T).increments
    roll = dp_rollout(c, state, dW)
    assert not roll.u.any()
    h = c.T / 3
    X = np.tile(c.x0, (5, 1))
    for i in range(3):
        X = X + h * (X @ c.A.T + c.beta) + dW[:, i] @ c.Sigma.T
        np.testing.assert_allclose(roll.X[:, i + 1], X, rtol=1e-14, atol=1e-14)


def test_control_uses_recovered_gradient(ex1):
    state = init_dp_state(small_config(), ex1)
    dW = sample_brownian(5, 5, 3, 6, ex1.T).increments
    roll = dp_rollout(ex1, state, dW)
    for i in range(3):
        Vx = np.linalg.solve(ex1.Sigma.T, roll.Z[:, i].T).T
        u = -np.linalg.solve(ex1.R_u, (roll.X[:, i] @ ex1.R_xu.T + Vx @ ex1.B).T).T
        np.testing.assert_allclose(roll.u[:, i], u, rtol=1e-12, atol=1e-13)


# robust loss

def _inputs(M=6, N=3, seed=0):
    c = preset("example1")
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(M, N + 1, 6))
    Z = rng.normal(size=(M, N, 6))
    u = rng.normal(size=(M, N, 2))
    dW = rng.normal(size=(M, N, 6)) * 0.1
    return c, X, Z, u, dW


def test_robust_loss_all_zero():
    c = scalar_problem(G=[[0.0]], R_x=[[0.0]], R_u=[[1.0]])
    X = np.zeros((4, 3, 1))
    loss, est = robust_loss(c, X, np.zeros((4, 2, 1)), np.zeros((4, 2, 1)), np.ones((4, 2, 1)))
    assert loss == 0 and not est.samples.any()


def test_robust_loss_without_regulariser():
    c, X, Z, u, dW = _inputs()
    loss, est = robust_loss(c, X, Z, u, dW, lam=0.0)
    assert loss == est.mean


def test_robust_loss_single_sample():
    c, X, Z, u, dW = _inputs(M=1)
    loss, est = robust_loss(c, X, Z, u, dW)
    assert est.variance == 0 and loss == est.samples[0]


def test_backward_sum_oracle():
    c, X, Z, u, dW = _inputs()
    N, h = 3, c.T / 3
    _, est = robust_loss(c, X, Z, u, dW)
    for k in range(len(X)):
        y = terminal_cost(c, X[k, -1])
        for i in reversed(range(N)):
            y = y + running_cost(c, 0.0, X[k, i], u[k, i]) * h - Z[k, i] @ dW[k, i]
        assert est.samples[k] == pytest.approx(y, rel=1e-12)


def test_backward_sum_identity_without_running_cost():
    c = scalar_problem(R_x=[[0.0]], G=[[3.0]])
    X = np.random.default_rng(1).normal(size=(7, 3, 1))
    _, est = robust_loss(c, X, np.zeros((7, 2, 1)), np.zeros((7, 2, 1)), np.ones((7, 2, 1)))
    np.testing.assert_array_equal(est.samples, terminal_cost(c, X[:, -1]))


@settings(max_examples=30)
@given(lam=st.floats(0, 10), seed=st.integers(0, 1000))
def test_lambda_sensitivity(lam, seed):
    c, X, Z, u, dW = _inputs(seed=seed)
    base, est = robust_loss(c, X, Z, u, dW, lam=0.0)
    full, _ = robust_loss(c, X, Z, u, dW, lam=lam)
    assert full == pytest.approx(base + lam * est.variance, rel=1e-14, abs=1e-14)


# gradients

def test_gradients_match_fd(ex1):
    state = init_dp_state(small_config(hidden=(2,)), ex1)
    dW = sample_brownian(7, 5, 3, 6, ex1.T).increments
    _, _, grads = dp_loss_and_gradients(ex1, state, dW)
    flat = [a for g in grads for a in g.arrays()]
    eps = 1e-6
    for p, g in zip(params(state), flat):
        for idx in list(np.ndindex(p.shape))[:: max(1, p.size // 6)]:
            old = p[idx]
            p[idx] = old + eps
            fp = dp_loss_and_gradients(ex1, state, dW)[0]
            p[idx] = old - eps
            fm = dp_loss_and_gradients(ex1, state, dW)[0]
            p[idx] = old
            fd = (fp - fm) / (2 * eps)
            assert abs(g[idx] - fd) <= max(1e-4 * abs(fd), 1e-7), (idx, g[idx], fd)


# training

def test_zero_iterations(ex1):
    state, reports = train_dp(small_config(), ex1)
    assert state.step == 0 and state.loss_history == [] and reports == []


def test_training_reduces_loss(ex1):
    cfg = small_config(N=5, batch_size=256, iterations=200, hidden=(16,), eta0=5e-3)
    state, _ = train_dp(cfg, ex1)
    hist = np.array(state.loss_history)
    assert np.median(hist[-20:]) < np.median(hist[:20])


def test_checkpoint_round_trip(tmp_path, ex1):
    state, _ = train_dp(small_config(iterations=2, dtype="float32"), ex1)
    back = load_checkpoint(save_checkpoint(tmp_path / "dp.npz", state, {"method": "dp"}))
    assert back.step == 2 and back.loss_history == state.loss_history
    for x, y in zip(params(state), params(back)):
        assert np.array_equal(x, y)
