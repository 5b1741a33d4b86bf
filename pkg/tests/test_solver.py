"""Inner/outer solver orchestration, baseline SDP, and initial guesses."""

import numpy as np
import pytest

from covsteer.blocks import ConsensusState
from covsteer.chance import LinearizedChanceConstraint, Obstacle, RiskBudget
from covsteer.local import Boundary, LocalProblem, QuadraticCost
from covsteer.models import (
    GaussianState,
    LinearizedDynamics,
    NominalTrajectory,
    make_model,
)
from covsteer.solver import (
    SolverConfig,
    SteeringScenario,
    _solution_objective,
    admm_solve,
    baseline_solve,
    initial_guess,
    outer_solve,
)


def _simple_problem(t_f=6, with_constraint=False):
    n, m = 2, 1
    A = np.array([[1.0, 0.2], [0.0, 1.0]])
    B = np.array([[0.02], [0.2]])
    D = 0.08 * np.eye(n)
    bnd = Boundary(
        init=GaussianState(np.zeros(n), 0.2 * np.eye(n)),
        term=GaussianState(np.array([1.0, 0.0]), 0.3 * np.eye(n)),
        terminal_cov_mode="inequality",
    )
    anchor = NominalTrajectory(
        xbar=np.linspace(bnd.init.mean, bnd.term.mean, t_f + 1),
        ubar=np.zeros((t_f, m)),
        Sigma=np.broadcast_to(0.2 * np.eye(n), (t_f + 1, n, n)).copy(),
    )
    lin = [LinearizedDynamics(A=A, B=B, d=np.zeros(n), D=D) for _ in range(t_f)]
    cost = QuadraticCost(Q=np.broadcast_to(0.1 * np.eye(n), (t_f, n, n)).copy(),
                         q=np.zeros((t_f, n)), R=np.eye(m))
    cons = [[] for _ in range(t_f + 1)]
    if with_constraint:
        w = np.array([0.0, 1.0])
        cons[t_f // 2] = [LinearizedChanceConstraint(
            c=-(w @ anchor.xbar[t_f // 2]) - 1.0, w=w, G=0.05 * np.eye(n))]
    return LocalProblem(lin=lin, cost=cost, constraints=cons, boundary=bnd,
                        prox_weights=(1.0, 1.0), anchor=anchor)


# ---------------------------------------------------------------------------
# admm_solve
# ---------------------------------------------------------------------------

def test_admm_matches_baseline_no_constraints():
    prob = _simple_problem()
    cfg = SolverConfig(inner_iters=2000, inner_tol=1e-6, conic_tol=1e-8,
                       conic_prox_max_iters=30000)
    base = baseline_solve(prob, cfg)
    assert base.status == "converged"
    state, hist = admm_solve(prob, ConsensusState.from_anchor(prob.anchor, cfg.rho), cfg)
    obj_a = _solution_objective(prob, state.mu_s, state.v, state.Sigma_s, state.K)
    obj_b = _solution_objective(prob, base.mean_traj, base.law.v, base.cov_traj, base.law.K)
    assert abs(obj_a - obj_b) / abs(obj_b) <= 0.01
    assert hist[-1, 0] <= 1e-6


def test_admm_fixed_point_stays_put():
    prob = _simple_problem()
    cfg = SolverConfig(inner_iters=4000, inner_tol=1e-10, conic_tol=1e-11,
                       conic_prox_max_iters=100_000, adaptive_conic_tol=False)
    state, _ = admm_solve(prob, ConsensusState.from_anchor(prob.anchor, cfg.rho), cfg)
    snapshot = {
        "mu_s": state.mu_s.copy(), "Sigma_s": state.Sigma_s.copy(),
        "mu_cn": state.mu_cn.copy(), "lam1": state.lam1.copy(),
    }
    cfg_one = SolverConfig(inner_iters=1, inner_tol=1e-9, conic_tol=1e-11,
                           conic_prox_max_iters=100_000, adaptive_conic_tol=False)
    state2, hist = admm_solve(prob, state, cfg_one)
    assert hist[0, 0] <= 1e-9
    assert np.abs(state2.mu_s - snapshot["mu_s"]).max() <= 1e-9
    assert np.abs(state2.Sigma_s - snapshot["Sigma_s"]).max() <= 1e-9


def test_admm_fixed_iteration_count():
    prob = _simple_problem()
    cfg = SolverConfig(inner_iters=15, inner_tol=None)
    state, hist = admm_solve(prob, ConsensusState.from_anchor(prob.anchor, cfg.rho), cfg)
    assert len(hist) == 15


def test_admm_records_violation_history():
    prob = _simple_problem(with_constraint=True)
    cfg = SolverConfig(inner_iters=10)
    _, hist = admm_solve(prob, ConsensusState.from_anchor(prob.anchor, cfg.rho), cfg)
    assert hist.shape == (10, 3)
    assert np.all(np.isfinite(hist))


# ---------------------------------------------------------------------------
# baseline_solve
# ---------------------------------------------------------------------------

def test_baseline_infeasible_by_construction():
    # a chance half-plane excluding both boundary means with no control
    # authority to escape it
    t_f = 3
    n, m = 1, 1
    bnd = Boundary(init=GaussianState(np.zeros(1), np.eye(1)),
                   term=GaussianState(np.zeros(1), np.eye(1)),
                   terminal_cov_mode="inequality")
    anchor = NominalTrajectory(xbar=np.zeros((t_f + 1, 1)), ubar=np.zeros((t_f, 1)),
                               Sigma=np.broadcast_to(np.eye(1), (t_f + 1, 1, 1)).copy())
    lin = [LinearizedDynamics(A=np.eye(1), B=np.zeros((1, 1)), d=np.zeros(1),
                              D=np.zeros((1, 1))) for _ in range(t_f)]
    cost = QuadraticCost(Q=np.zeros((t_f, 1, 1)), q=np.zeros((t_f, 1)), R=np.eye(1))
    cons = [[] for _ in range(t_f + 1)]
    # requires mu_1 >= 5 but mu is pinned at 0 with B = 0
    cons[1] = [LinearizedChanceConstraint(c=5.0, w=np.array([-1.0]), G=np.zeros((1, 1)))]
    prob = LocalProblem(lin=lin, cost=cost, constraints=cons, boundary=bnd,
                        prox_weights=(1.0, 1.0), anchor=anchor)
    rep = baseline_solve(prob, SolverConfig())
    assert rep.status == "infeasible"


def test_baseline_constraint_satisfaction():
    prob = _simple_problem(with_constraint=True)
    rep = baseline_solve(prob, SolverConfig(conic_tol=1e-8))
    assert rep.status == "converged"
    assert rep.constraint_residuals <= 1e-6
    # mean recursion holds
    for t in range(prob.horizon):
        lin = prob.lin[t]
        defect = rep.mean_traj[t + 1] - (lin.A @ rep.mean_traj[t] + lin.B @ rep.law.v[t])
        assert np.abs(defect).max() <= 1e-6


# ---------------------------------------------------------------------------
# outer_solve
# ---------------------------------------------------------------------------

def _lq_scenario(t_f=6):
    model = make_model("double_integrator", 0.2,
                       diffusion=lambda x: np.broadcast_to(
                           0.05 * np.eye(4), np.shape(x)[:-1] + (4, 4)))
    bnd = Boundary(
        init=GaussianState(np.array([-1.0, 0.0, 0.5, 0.0]), 0.1 * np.eye(4)),
        term=GaussianState(np.array([1.0, 0.0, 0.5, 0.0]), 0.12 * np.eye(4)),
        terminal_cov_mode="inequality",
    )
    return SteeringScenario(
        name="lq", model=model, t_f=t_f, cost_model=0.05 * np.eye(4),
        R=0.1 * np.eye(2), boundary=bnd,
    )


def test_outer_solve_linear_quadratic_converges_fast():
    # expansions of a linear system are exact; the only anchor dependence left
    # is the cost re-centering q_t = -Q x_t, so the trust-region residual
    # contracts geometrically and the loop stops within a couple of rounds
    scn = _lq_scenario()
    cfg = SolverConfig(inner_iters=400, inner_tol=1e-7, outer_iters=6,
                       outer_tol=1e-3, conic_tol=1e-8, conic_prox_max_iters=30000,
                       alpha_mu=0.0, alpha_sigma=0.0, final_polish=False)
    tau0 = initial_guess(scn)
    rep = outer_solve(scn, cfg, tau0)
    assert rep.status == "converged"
    assert len(rep.trust_region_history) <= 3
    assert rep.trust_region_history[-1] <= 1e-3
    tr = rep.trust_region_history
    assert all(tr[i + 1] <= 0.1 * tr[i] for i in range(len(tr) - 1))


def test_outer_solve_deterministic():
    scn = _lq_scenario()
    cfg = SolverConfig(inner_iters=10, outer_iters=2)
    tau0 = initial_guess(scn)
    r1 = outer_solve(scn, cfg, tau0)
    r2 = outer_solve(scn, cfg, tau0)
    assert np.array_equal(r1.mean_traj, r2.mean_traj)
    assert np.array_equal(r1.cov_traj, r2.cov_traj)
    assert r1.objective == r2.objective


def test_outer_solve_sampled_forward_pass():
    scn = _lq_scenario(t_f=5)
    cfg = SolverConfig(inner_iters=8, outer_iters=2, forward_pass_mode="sampled",
                       n_rollout_samples=64, seed=5)
    tau0 = initial_guess(scn)
    rep = outer_solve(scn, cfg, tau0)
    assert rep.law is not None
    assert np.all(np.isfinite(rep.mean_traj))


# ---------------------------------------------------------------------------
# initial_guess
# ---------------------------------------------------------------------------

def test_initial_guess_constant_when_endpoints_coincide():
    model = make_model("unicycle", 0.1)
    bnd = Boundary(init=GaussianState(np.array([1.0, 2.0, 0.0]), 0.1 * np.eye(3)),
                   term=GaussianState(np.array([1.0, 2.0, 0.0]), 0.1 * np.eye(3)))
    scn = SteeringScenario(name="s", model=model, t_f=5, cost_model=np.eye(3),
                           R=np.eye(2), boundary=bnd)
    tau = initial_guess(scn)
    assert np.abs(tau.xbar - bnd.init.mean).max() <= 1e-12
    assert np.abs(tau.ubar).max() <= 1e-12


def test_initial_guess_double_integrator_exact_endpoint():
    # constant-velocity boundary pair makes the inverse dynamics exact
    model = make_model("double_integrator", 0.2)
    v = 0.5
    bnd = Boundary(init=GaussianState(np.array([0.0, 0.0, v, 0.0]), 0.1 * np.eye(4)),
                   term=GaussianState(np.array([1.0, 0.0, v, 0.0]), 0.1 * np.eye(4)))
    scn = SteeringScenario(name="s", model=model, t_f=10, cost_model=np.eye(4),
                           R=np.eye(2), boundary=bnd)
    tau = initial_guess(scn)
    assert np.abs(tau.xbar[-1] - bnd.term.mean).max() <= 1e-9
    assert tau.dynamics_defect(model) <= 1e-9


def test_initial_guess_provided_validates():
    model = make_model("unicycle", 0.1)
    bnd = Boundary(init=GaussianState(np.zeros(3), 0.1 * np.eye(3)),
                   term=GaussianState(np.array([1.0, 0.0, 0.0]), 0.1 * np.eye(3)))
    scn = SteeringScenario(name="s", model=model, t_f=4, cost_model=np.eye(3),
                           R=np.eye(2), boundary=bnd)
    good = initial_guess(scn)
    same = initial_guess(scn, mode="provided", provided=good)
    assert same is good
    bad = NominalTrajectory(xbar=good.xbar + 0.1, ubar=good.ubar, Sigma=good.Sigma)
    with pytest.raises(ValueError, match="inconsistent"):
        initial_guess(scn, mode="provided", provided=bad)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(rho=0.0)
    with pytest.raises(ValueError):
        SolverConfig(inner_iters=0)
    with pytest.raises(ValueError):
        SolverConfig(averaging_mode="bogus")
