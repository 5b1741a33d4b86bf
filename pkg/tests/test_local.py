"""Cost expansion, objective pieces, and local problem assembly."""

import numpy as np
import pytest

from covsteer.chance import Obstacle, RiskBudget
from covsteer.local import (
    Boundary,
    CostExpansionError,
    QuadraticCost,
    build_local_problem,
    cov_objective,
    expand_cost,
    mean_objective,
    prox_objective,
)
from covsteer.models import GaussianState, NominalTrajectory, make_model

from helpers import fd_hessian


def _traj(rng, model, t_f):
    x = rng.uniform(-1, 1, model.state_dim)
    xbar = [x.copy()]
    ubar = rng.uniform(-0.5, 0.5, (t_f, model.control_dim))
    for t in range(t_f):
        x = model.step(x, ubar[t])
        xbar.append(x.copy())
    return NominalTrajectory(
        xbar=np.array(xbar), ubar=ubar,
        Sigma=np.broadcast_to(0.1 * np.eye(model.state_dim),
                              (t_f + 1, model.state_dim, model.state_dim)).copy(),
    )


# ---------------------------------------------------------------------------
# expand_cost
# ---------------------------------------------------------------------------

def test_expand_cost_quadratic_is_exact():
    rng = np.random.default_rng(0)
    model = make_model("unicycle", 0.1)
    traj = _traj(rng, model, 6)
    Qhat = np.diag([0.5, 1.0, 2.0])
    cost = expand_cost(Qhat, np.eye(2), traj)
    for t in range(6):
        assert np.allclose(cost.Q[t], Qhat)
        assert np.allclose(cost.q[t], -Qhat @ traj.xbar[t])


def test_expand_cost_zero():
    rng = np.random.default_rng(1)
    model = make_model("unicycle", 0.1)
    traj = _traj(rng, model, 4)
    cost = expand_cost(lambda x: 0.0, np.eye(2), traj)
    assert np.abs(cost.Q).max() == 0.0
    assert np.abs(cost.q).max() == 0.0


def test_expand_cost_quartic_vs_fd_hessian():
    model = make_model("double_integrator", 0.1)
    traj = NominalTrajectory(
        xbar=np.array([[1.0, 0.0, 0.0, 0.0]] * 2), ubar=np.zeros((1, 2)),
        Sigma=np.broadcast_to(np.eye(4), (2, 4, 4)).copy(),
    )
    quartic = lambda x: float(np.sum(x**2) ** 2)
    cost = expand_cost(quartic, np.eye(2), traj)
    H = fd_hessian(quartic, traj.xbar[0])
    assert np.abs(cost.Q[0] - H).max() <= 1e-5


def test_expand_cost_clamps_concave_to_psd():
    model = make_model("unicycle", 0.1)
    traj = NominalTrajectory(xbar=np.zeros((2, 3)), ubar=np.zeros((1, 2)),
                             Sigma=np.broadcast_to(np.eye(3), (2, 3, 3)).copy())
    concave = lambda x: float(-np.sum(x**2))
    cost = expand_cost(concave, np.eye(2), traj)
    assert np.linalg.eigvalsh(cost.Q[0]).min() >= -1e-12


def test_expand_cost_nonfinite_raises():
    traj = NominalTrajectory(xbar=np.zeros((2, 2)), ubar=np.zeros((1, 1)),
                             Sigma=np.broadcast_to(np.eye(2), (2, 2, 2)).copy())
    with pytest.raises(CostExpansionError):
        expand_cost(lambda x: float(np.inf) * np.sum(x), np.eye(1), traj)


# ---------------------------------------------------------------------------
# Objective pieces
# ---------------------------------------------------------------------------

def _random_cost(rng, t_f, n, m):
    Qs = []
    for _ in range(t_f):
        L = rng.standard_normal((n, n))
        Qs.append(L @ L.T)
    R = np.eye(m) + 0.1 * np.ones((m, m))
    return QuadraticCost(Q=np.array(Qs), q=rng.standard_normal((t_f, n)), R=R)


def test_mean_objective_trivial():
    cost = QuadraticCost(Q=np.zeros((3, 2, 2)), q=np.zeros((3, 2)), R=np.eye(1))
    assert mean_objective(cost, np.zeros((4, 2)), np.zeros((3, 1))) == 0.0


def test_mean_objective_single_step():
    cost = QuadraticCost(Q=np.eye(2)[None], q=np.zeros((1, 2)), R=np.eye(1))
    val = mean_objective(cost, np.array([[1.0, 1.0], [0.0, 0.0]]), np.array([[2.0]]))
    assert np.isclose(val, 1.0 + 2.0)


def test_mean_objective_vs_resummation():
    rng = np.random.default_rng(2)
    t_f, n, m = 7, 3, 2
    cost = _random_cost(rng, t_f, n, m)
    mu = rng.standard_normal((t_f + 1, n))
    v = rng.standard_normal((t_f, m))
    total = np.longdouble(0)
    for t in range(t_f):
        total += np.longdouble(0.5) * mu[t] @ cost.Q[t] @ mu[t]
        total += np.longdouble(1.0) * cost.q[t] @ mu[t]
        total += np.longdouble(0.5) * v[t] @ cost.R @ v[t]
    val = mean_objective(cost, mu, v)
    assert abs(val - float(total)) <= 1e-10 * max(1.0, abs(float(total)))


def test_cov_objective_cases():
    t_f, n, m = 4, 3, 2
    cost = QuadraticCost(Q=np.broadcast_to(np.eye(n), (t_f, n, n)).copy(),
                         q=np.zeros((t_f, n)), R=np.eye(m))
    Sig = np.stack([(i + 1) * np.eye(n) for i in range(t_f + 1)])
    val = cov_objective(cost, Sig, np.zeros((t_f, m, n)))
    assert np.isclose(val, sum(np.trace(Sig[t]) for t in range(t_f)))
    assert cov_objective(cost, np.zeros((t_f + 1, n, n)), np.zeros((t_f, m, n))) == 0.0


def test_cov_objective_vs_recomputation():
    rng = np.random.default_rng(3)
    t_f, n, m = 5, 3, 2
    cost = _random_cost(rng, t_f, n, m)
    Sig = np.stack([np.eye(n) + 0.1 * rng.standard_normal((n, n)) for _ in range(t_f + 1)])
    Sig = 0.5 * (Sig + np.swapaxes(Sig, 1, 2))
    K = rng.standard_normal((t_f, m, n))
    ref = 0.0
    for t in range(t_f):
        ref += sum(cost.Q[t][i, j] * Sig[t][j, i] for i in range(n) for j in range(n))
        M = cost.R @ K[t] @ Sig[t] @ K[t].T
        ref += np.trace(M)
    assert abs(cov_objective(cost, Sig, K) - ref) <= 1e-10 * max(1.0, abs(ref))


def test_prox_objective_cases():
    rng = np.random.default_rng(4)
    model = make_model("unicycle", 0.1)
    traj = _traj(rng, model, 5)
    assert prox_objective((1.0, 1.0), traj.xbar, traj.Sigma, traj) == 0.0
    mu = traj.xbar + rng.standard_normal(traj.xbar.shape)
    Sig = traj.Sigma + 0.1
    assert prox_objective((0.0, 0.0), mu, Sig, traj) == 0.0
    # scalar arithmetic case
    traj1 = NominalTrajectory(xbar=np.zeros((1 + 0, 1)) if False else np.zeros((1, 1)),
                              ubar=np.zeros((0, 1)), Sigma=np.zeros((1, 1, 1)))
    val = prox_objective((2.0, 0.0), np.array([[3.0]]), np.zeros((1, 1, 1)), traj1)
    assert np.isclose(val, 9.0)


def test_objectives_midpoint_convexity():
    rng = np.random.default_rng(5)
    t_f, n, m = 4, 2, 2
    cost = _random_cost(rng, t_f, n, m)
    model = make_model("double_integrator", 0.1)
    anchor = NominalTrajectory(xbar=np.zeros((t_f + 1, 4)), ubar=np.zeros((t_f, 2)),
                               Sigma=np.zeros((t_f + 1, 4, 4)))
    for _ in range(50):
        mu1, mu2 = rng.standard_normal((2, t_f + 1, n))
        v1, v2 = rng.standard_normal((2, t_f, m))
        mid_mu, mid_v = 0.5 * (mu1 + mu2), 0.5 * (v1 + v2)
        assert mean_objective(cost, mid_mu, mid_v) <= 0.5 * (
            mean_objective(cost, mu1, v1) + mean_objective(cost, mu2, v2)) + 1e-9
        S1 = np.stack([np.eye(n)] * (t_f + 1)) * rng.uniform(0.5, 2)
        S2 = np.stack([np.eye(n)] * (t_f + 1)) * rng.uniform(0.5, 2)
        K1, K2 = rng.standard_normal((2, t_f, m, n))
        # J_Sigma is convex jointly in (Sigma, K) along fixed-Sigma lines
        assert cov_objective(cost, S1, 0.5 * (K1 + K2)) <= 0.5 * (
            cov_objective(cost, S1, K1) + cov_objective(cost, S1, K2)) + 1e-9
        # prox objective convex in (mu, Sigma)
        mu_a = rng.standard_normal((t_f + 1, 4))
        mu_b = rng.standard_normal((t_f + 1, 4))
        Sig_a = np.stack([np.eye(4)] * (t_f + 1)) * rng.uniform(0.1, 2)
        Sig_b = np.stack([np.eye(4)] * (t_f + 1)) * rng.uniform(0.1, 2)
        lhs = prox_objective((1.0, 1.0), 0.5 * (mu_a + mu_b), 0.5 * (Sig_a + Sig_b), anchor)
        rhs = 0.5 * (prox_objective((1.0, 1.0), mu_a, Sig_a, anchor)
                     + prox_objective((1.0, 1.0), mu_b, Sig_b, anchor))
        assert lhs <= rhs + 1e-9


# ---------------------------------------------------------------------------
# build_local_problem
# ---------------------------------------------------------------------------

def _boundary(n):
    return Boundary(init=GaussianState(np.zeros(n), 0.1 * np.eye(n)),
                    term=GaussianState(np.ones(n), 0.1 * np.eye(n)))


def test_build_local_problem_linear_quadratic_independent_of_anchor():
    rng = np.random.default_rng(6)
    model = make_model("double_integrator", 0.1)
    Qhat = 0.1 * np.eye(4)
    R = np.eye(2)
    t1, t2 = _traj(rng, model, 5), _traj(rng, model, 5)
    p1 = build_local_problem(model, Qhat, R, [], None, _boundary(4), (1.0, 1.0), t1)
    p2 = build_local_problem(model, Qhat, R, [], None, _boundary(4), (1.0, 1.0), t2)
    for a, b in zip(p1.lin, p2.lin):
        assert np.allclose(a.A, b.A) and np.allclose(a.B, b.B)
    assert np.allclose(p1.cost.Q, p2.cost.Q)


def test_build_local_problem_unicycle_structure():
    rng = np.random.default_rng(7)
    model = make_model("unicycle", 0.1,
                       diffusion=lambda x: np.broadcast_to(
                           0.01 * np.eye(3), np.shape(x)[:-1] + (3, 3)))
    t_f = 50
    x = np.array([-3.0, 0.0, 0.0])
    xbar, ubar = [x.copy()], []
    for t in range(t_f):
        u = np.array([1.2, 0.0])
        ubar.append(u)
        x = model.step(x, u)
        xbar.append(x.copy())
    traj = NominalTrajectory(xbar=np.array(xbar), ubar=np.array(ubar),
                             Sigma=np.broadcast_to(0.1 * np.eye(3), (t_f + 1, 3, 3)).copy())
    obstacles = [Obstacle(shape="circle", projection=(0, 1),
                          center=np.array([i - 2.0, 1.5]), radius=0.4) for i in range(5)]
    budget = RiskBudget.from_per_constraint(0.01, 5)
    prob = build_local_problem(model, 0.001 * np.eye(3), 0.1 * np.eye(2),
                               obstacles, budget, _boundary(3), (1.0, 1.0), traj)
    assert len(prob.lin) == 50
    assert len(prob.constraints) == 51
    interior = [len(g) for g in prob.constraints[1:-1]]
    assert all(c == 5 for c in interior)
    assert len(prob.constraints[0]) == 0 and len(prob.constraints[-1]) == 0
    assert prob.lin[0].D.shape == (3, 3)


def test_build_local_problem_deterministic():
    rng = np.random.default_rng(8)
    model = make_model("unicycle", 0.1)
    traj = _traj(rng, model, 8)
    obstacles = [Obstacle(shape="circle", projection=(0, 1),
                          center=np.array([0.0, 2.0]), radius=0.5)]
    budget = RiskBudget.from_per_constraint(0.05, 1)
    args = (model, 0.01 * np.eye(3), np.eye(2), obstacles, budget,
            _boundary(3), (1.0, 1.0), traj)
    p1 = build_local_problem(*args)
    p2 = build_local_problem(*args)
    for a, b in zip(p1.lin, p2.lin):
        assert np.array_equal(a.A, b.A) and np.array_equal(a.d, b.d)
    assert np.array_equal(p1.cost.Q, p2.cost.Q)
    for g1, g2 in zip(p1.constraints, p2.constraints):
        for c1, c2 in zip(g1, g2):
            assert c1.c == c2.c
            assert np.array_equal(c1.w, c2.w)
            assert np.array_equal(c1.G, c2.G)
