"""Dynamics catalog, linearization, and Gaussian moment propagation."""

import numpy as np
import pytest

from covsteer.models import (
    ControlLaw,
    DivergenceError,
    DynamicsModel,
    GaussianState,
    LinearizedDynamics,
    NominalTrajectory,
    forward_pass,
    linearize_dynamics,
    make_model,
    propagate_cov,
    propagate_mean,
    quadrotor_hover_input,
    sampled_forward_pass,
)

from helpers import fd_jacobian, linear_gaussian_moments


def _random_point(rng, name, n, m):
    x = rng.uniform(-1.0, 1.0, n)
    u = rng.uniform(-1.0, 1.0, m)
    if name == "quadrotor":
        x[7] = np.clip(x[7], -1.0, 1.0)  # stay away from the pitch singularity
        u = quadrotor_hover_input() + u
    return x, u


# ---------------------------------------------------------------------------
# Linearization
# ---------------------------------------------------------------------------

def test_linearize_linear_system_returns_itself():
    model = make_model("double_integrator", 0.2)
    rng = np.random.default_rng(0)
    A_ref, B_ref = model.jacobian(np.zeros(4), np.zeros(2))
    for _ in range(5):
        x, u = rng.standard_normal(4), rng.standard_normal(2)
        lin = linearize_dynamics(model, x, u)
        assert np.allclose(lin.A, A_ref)
        assert np.allclose(lin.B, B_ref)
        assert np.allclose(lin.d, 0.0, atol=1e-12)


def test_unicycle_jacobian_vs_finite_differences():
    model = make_model("unicycle", 0.1)
    lin = linearize_dynamics(model, np.zeros(3), np.array([1.0, 0.0]))
    Afd, Bfd = fd_jacobian(model.step, np.zeros(3), np.array([1.0, 0.0]), eps=1e-5)
    assert np.abs(lin.A - Afd).max() <= 1e-6
    assert np.abs(lin.B - Bfd).max() <= 1e-6


def test_quadrotor_jacobian_at_hover():
    model = make_model("quadrotor", 0.1)
    hover_x = np.zeros(12)
    hover_u = quadrotor_hover_input()
    lin = linearize_dynamics(model, hover_x, hover_u)
    Afd, Bfd = fd_jacobian(model.step, hover_x, hover_u, eps=1e-5)
    assert np.abs(lin.A - Afd).max() <= 1e-5
    assert np.abs(lin.B - Bfd).max() <= 1e-5


@pytest.mark.parametrize("name,n,m", [
    ("double_integrator", 4, 2), ("unicycle", 3, 2), ("quadrotor", 12, 4),
])
def test_jacobians_match_finite_differences_randomized(name, n, m):
    model = make_model(name, 0.1)
    rng = np.random.default_rng(42)
    for _ in range(100):
        x, u = _random_point(rng, name, n, m)
        lin = linearize_dynamics(model, x, u)
        Afd, Bfd = fd_jacobian(model.step, x, u, eps=1e-5)
        assert np.abs(lin.A - Afd).max() <= 1e-5
        assert np.abs(lin.B - Bfd).max() <= 1e-5


def test_linearization_exact_at_expansion_point():
    model = make_model("unicycle", 0.1)
    x, u = np.array([0.3, -0.2, 0.7]), np.array([0.9, 0.4])
    lin = linearize_dynamics(model, x, u)
    assert np.abs(model.step(x, u) - (lin.A @ x + lin.B @ u + lin.d)).max() <= 1e-12


def test_linearize_nonfinite_raises():
    from covsteer.models import LinearizationError

    bad = DynamicsModel(
        name="bad", state_dim=1, control_dim=1, dt=0.1,
        step=lambda x, u: x * np.inf,
        diffusion=lambda x: np.zeros(np.shape(x)[:-1] + (1, 0)),
    )
    with pytest.raises(LinearizationError):
        linearize_dynamics(bad, np.ones(1), np.ones(1))


# ---------------------------------------------------------------------------
# Moment propagation
# ---------------------------------------------------------------------------

def test_propagate_mean_identity_and_scalar():
    lin = LinearizedDynamics(A=np.eye(2), B=np.zeros((2, 1)), d=np.zeros(2),
                             D=np.zeros((2, 0)))
    mu = np.array([0.3, -0.4])
    assert np.allclose(propagate_mean(lin, mu, np.zeros(1)), mu)
    lin2 = LinearizedDynamics(A=np.array([[2.0]]), B=np.array([[1.0]]),
                              d=np.array([3.0]), D=np.zeros((1, 0)))
    assert np.isclose(propagate_mean(lin2, np.array([1.0]), np.array([1.0]))[0], 6.0)


def test_propagate_mean_matches_step_at_expansion():
    model = make_model("unicycle", 0.1)
    x, u = np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0])
    lin = linearize_dynamics(model, x, u)
    assert np.allclose(propagate_mean(lin, x, u), model.step(x, u), atol=1e-12)


def test_propagate_cov_trivial_cases():
    D = np.array([[0.1, 0.0], [0.0, 0.2]])
    lin = LinearizedDynamics(A=np.zeros((2, 2)), B=np.zeros((2, 2)),
                             d=np.zeros(2), D=D)
    out = propagate_cov(lin, np.eye(2), np.zeros((2, 2)))
    assert np.allclose(out, D @ D.T)
    lin2 = LinearizedDynamics(A=np.eye(2), B=np.zeros((2, 1)), d=np.zeros(2),
                              D=np.zeros((2, 1)))
    S = np.array([[2.0, 0.5], [0.5, 1.0]])
    assert np.allclose(propagate_cov(lin2, S, np.zeros((1, 2))), S)


def test_propagate_cov_monte_carlo_oracle():
    rng = np.random.default_rng(7)
    A = 0.6 * rng.standard_normal((3, 3))
    B = rng.standard_normal((3, 2))
    K = 0.3 * rng.standard_normal((2, 3))
    D = 0.4 * rng.standard_normal((3, 3))
    S = rng.standard_normal((3, 3)); S = S @ S.T + 0.5 * np.eye(3)
    lin = LinearizedDynamics(A=A, B=B, d=np.zeros(3), D=D)
    predicted = propagate_cov(lin, S, K)

    n_samples = 10**6
    L = np.linalg.cholesky(S)
    X = (L @ rng.standard_normal((3, n_samples))).T
    W = rng.standard_normal((n_samples, 3))
    Xn = X @ (A + B @ K).T + W @ D.T
    sample_cov = np.cov(Xn.T)
    # 3 standard errors of a covariance entry estimate ~ 3*sqrt((v_ii v_jj + v_ij^2)/N)
    for i in range(3):
        for j in range(3):
            se = np.sqrt((predicted[i, i] * predicted[j, j] + predicted[i, j] ** 2) / n_samples)
            assert abs(sample_cov[i, j] - predicted[i, j]) <= 3 * se + 1e-12


def test_propagate_cov_preserves_psd():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        n, m, p = 3, 2, 2
        A = rng.standard_normal((n, n))
        B = rng.standard_normal((n, m))
        K = rng.standard_normal((m, n))
        D = rng.standard_normal((n, p))
        S = rng.standard_normal((n, n)); S = S @ S.T
        lin = LinearizedDynamics(A=A, B=B, d=np.zeros(n), D=D)
        out = propagate_cov(lin, S, K)
        assert np.linalg.eigvalsh(out).min() >= -1e-9
        assert np.allclose(out, out.T)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _linear_law(rng, t_f, n, m):
    return ControlLaw(
        v=0.2 * rng.standard_normal((t_f, m)),
        K=0.1 * rng.standard_normal((t_f, m, n)),
        ref_mean=rng.standard_normal((t_f, n)),
    )


def test_forward_pass_linear_system_matches_mean_recursion():
    rng = np.random.default_rng(9)
    model = make_model("double_integrator", 0.2)
    t_f = 10
    law = _linear_law(rng, t_f, 4, 2)
    x0 = rng.standard_normal(4)
    Sig = np.broadcast_to(np.eye(4), (t_f + 1, 4, 4)).copy()
    traj = forward_pass(model, law, Sig, x0)
    A, B = model.jacobian(x0, np.zeros(2))
    mu = x0.copy()
    for t in range(t_f):
        u = law.v[t] + law.K[t] @ (mu - law.ref_mean[t])
        mu = A @ mu + B @ u
    assert np.abs(traj.xbar[-1] - mu).max() <= 1e-10


def test_forward_pass_no_feedback_is_open_loop():
    rng = np.random.default_rng(10)
    model = make_model("unicycle", 0.1)
    law = _linear_law(rng, 8, 3, 2)
    x0 = np.zeros(3)
    Sig = np.zeros((9, 3, 3))
    traj = forward_pass(model, law, Sig, x0, use_feedback=False)
    x = x0.copy()
    for t in range(8):
        x = model.step(x, law.v[t])
    assert np.abs(traj.xbar[-1] - x).max() <= 1e-12


def test_forward_pass_unicycle_matches_hand_integration():
    model = make_model("unicycle", 0.1)
    t_f = 50
    law = ControlLaw(v=np.tile([1.0, 0.2], (t_f, 1)), K=np.zeros((t_f, 2, 3)),
                     ref_mean=np.zeros((t_f, 3)))
    traj = forward_pass(model, law, np.zeros((t_f + 1, 3, 3)), np.zeros(3))
    x, y, th = 0.0, 0.0, 0.0
    for _ in range(t_f):
        x += 0.1 * 1.0 * np.cos(th)
        y += 0.1 * 1.0 * np.sin(th)
        th += 0.1 * 0.2
    assert np.abs(traj.xbar[-1] - [x, y, th]).max() <= 1e-12


def test_forward_pass_dynamic_consistency():
    rng = np.random.default_rng(11)
    model = make_model("unicycle", 0.1)
    law = _linear_law(rng, 20, 3, 2)
    traj = forward_pass(model, law, np.zeros((21, 3, 3)), np.zeros(3))
    assert traj.dynamics_defect(model) <= 1e-9


def test_forward_pass_divergence_error():
    explosive = DynamicsModel(
        name="boom", state_dim=1, control_dim=1, dt=0.1,
        step=lambda x, u: x * 1e200,
        diffusion=lambda x: np.zeros(np.shape(x)[:-1] + (1, 0)),
        jacobian=lambda x, u: (np.array([[1e200]]), np.zeros((1, 1))),
    )
    law = ControlLaw(v=np.zeros((4, 1)), K=np.zeros((4, 1, 1)), ref_mean=np.zeros((4, 1)))
    with pytest.raises(DivergenceError):
        forward_pass(explosive, law, np.zeros((5, 1, 1)), np.ones(1))


def test_sampled_forward_pass_zero_noise_equals_mean():
    rng = np.random.default_rng(12)
    model = make_model("unicycle", 0.1)
    law = _linear_law(rng, 6, 3, 2)
    dist = GaussianState(np.array([0.1, 0.2, 0.0]), np.zeros((3, 3)))
    traj = sampled_forward_pass(model, law, dist, n_samples=32, seed=4)
    ref = forward_pass(model, law, np.zeros((7, 3, 3)), dist.mean)
    assert np.abs(traj.xbar - ref.xbar).max() <= 1e-12
    assert np.abs(traj.Sigma).max() <= 1e-18


def test_sampled_forward_pass_matches_analytic_recursion():
    rng = np.random.default_rng(13)
    model = make_model("double_integrator", 0.2,
                       diffusion=lambda x: np.broadcast_to(
                           0.05 * np.eye(4), np.shape(x)[:-1] + (4, 4)))
    t_f = 6
    law = _linear_law(rng, t_f, 4, 2)
    mu0 = np.array([0.5, -0.5, 0.0, 0.0])
    S0 = 0.04 * np.eye(4)
    n_samples = 10**5
    traj = sampled_forward_pass(model, law, GaussianState(mu0, S0), n_samples, seed=3)
    A, B = model.jacobian(mu0, np.zeros(2))
    means, covs = linear_gaussian_moments(
        A, B, 0.05 * np.eye(4), law.v, law.K, law.ref_mean, mu0, S0, t_f,
    )
    for t in (1, t_f):
        for i in range(4):
            for j in range(4):
                se = np.sqrt((covs[t][i, i] * covs[t][j, j] + covs[t][i, j] ** 2) / n_samples)
                assert abs(traj.Sigma[t][i, j] - covs[t][i, j]) <= 3 * se + 1e-9
        se_mean = 3 * np.sqrt(np.diag(covs[t]) / n_samples)
        assert np.all(np.abs(traj.xbar[t] - means[t]) <= se_mean + 1e-9)


def test_sampled_forward_pass_deterministic():
    rng = np.random.default_rng(14)
    model = make_model("unicycle", 0.1,
                       diffusion=lambda x: np.broadcast_to(
                           0.01 * np.eye(3), np.shape(x)[:-1] + (3, 3)))
    law = _linear_law(rng, 5, 3, 2)
    dist = GaussianState(np.zeros(3), 0.1 * np.eye(3))
    a = sampled_forward_pass(model, law, dist, 500, seed=9)
    b = sampled_forward_pass(model, law, dist, 500, seed=9)
    assert np.array_equal(a.xbar, b.xbar)
    assert np.array_equal(a.Sigma, b.Sigma)


def test_gaussian_state_validation():
    with pytest.raises(ValueError):
        GaussianState(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        GaussianState(np.zeros(2), np.array([[-1.0, 0.0], [0.0, 1.0]]))
