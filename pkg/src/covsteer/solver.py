"""Solver orchestration: inner splitting loop, outer convexification, baseline SDP.

The outer loop alternates Taylor expansion about the current nominal
trajectory, an inner solve of the resulting convex problem, and a forward
pass that re-rolls the nonlinear dynamics under the new control law.  The
inner solve is either the consensus splitting scheme (default) or, for the
ablation baseline, one monolithic cone program carrying every constraint at
once.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .blocks import (
    ConsensusState,
    ControlPolytope,
    CovProx,
    InfeasibleCovarianceError,
    InfeasibleMeanError,
    MeanProx,
    RecoveryError,
    append_cov_structure,
    chance_prox,
    consensus_update,
    dual_update,
    polish_mean,
)
from .chance import Obstacle, RiskBudget, max_violation
from .conic import Cone, ConeProgram, ConicWorkspace, smat, svec, svec_dim
from .local import (
    Boundary,
    LocalProblem,
    build_local_problem,
    cov_objective,
    mean_objective,
    prox_objective,
)
from .models import (
    ControlLaw,
    DynamicsModel,
    GaussianState,
    NominalTrajectory,
    forward_pass,
    linearize_dynamics,
    propagate_cov,
    sampled_forward_pass,
)
from .parallel import run_tasks


@dataclass
class SolverConfig:
    """Knobs of the two-level scheme; defaults follow the shipped scenarios."""

    rho: float = 1.0
    alpha_mu: float = 1.0
    alpha_sigma: float = 1.0
    inner_iters: int = 15
    outer_iters: int = 10
    inner_tol: float | None = None          # None: run the fixed iteration count
    outer_tol: float = 1e-4
    averaging_mode: str = "weighted"        # or "paper_exact"
    forward_pass_mode: str = "mean_propagation"   # or "sampled"
    feedback_forward_pass: bool = True
    warm_start_duals: bool = True
    patience: int = 2
    conic_tol: float = 1e-7
    conic_max_iters: int = 50_000
    conic_prox_max_iters: int = 800
    adaptive_conic_tol: bool = True
    final_polish: bool = True
    n_rollout_samples: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.inner_iters < 1 or self.outer_iters < 1:
            raise ValueError("iteration counts must be at least 1")
        if self.outer_tol <= 0 or self.conic_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.inner_tol is not None and self.inner_tol <= 0:
            raise ValueError("inner_tol must be positive when set")
        if self.averaging_mode not in ("weighted", "paper_exact"):
            raise ValueError("averaging_mode must be 'weighted' or 'paper_exact'")
        if self.forward_pass_mode not in ("mean_propagation", "sampled"):
            raise ValueError("forward_pass_mode must be 'mean_propagation' or 'sampled'")


@dataclass
class SteeringScenario:
    """Problem-level data: model, horizon, costs, boundary, and constraints."""

    name: str
    model: DynamicsModel
    t_f: int
    cost_model: "np.ndarray | Callable[[np.ndarray], float]"
    R: np.ndarray
    boundary: Boundary
    obstacles: list[Obstacle] = field(default_factory=list)
    budget: RiskBudget | None = None
    polytope: ControlPolytope | None = None
    truncate_coords: tuple[int, ...] = ()
    truncate_sigmas: float = 3.0
    cost_hessian: Callable[[np.ndarray], np.ndarray] | None = None

    def state_cost(self, x: np.ndarray) -> np.ndarray:
        """True state cost c(x), batched over leading axes."""
        if callable(self.cost_model):
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                return float(self.cost_model(x))
            flat = x.reshape(-1, x.shape[-1])
            return np.array([self.cost_model(row) for row in flat]).reshape(x.shape[:-1])
        Q = np.asarray(self.cost_model, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, Q, x)

    def local_problem(self, cfg: SolverConfig, traj: NominalTrajectory) -> LocalProblem:
        return build_local_problem(
            self.model, self.cost_model, self.R, self.obstacles, self.budget,
            self.boundary, (cfg.alpha_mu, cfg.alpha_sigma), traj,
            polytope=self.polytope, hessian=self.cost_hessian,
        )


@dataclass
class SolveReport:
    """Controller, trajectories, and diagnostics of one solve."""

    law: ControlLaw | None
    mean_traj: np.ndarray | None
    cov_traj: np.ndarray | None
    objective: float
    residual_history: list[np.ndarray]      # per outer iter: (iters, 3) columns
                                            # primal, dual, max constraint violation
    constraint_residuals: float
    status: str
    wall_time: float
    trust_region_history: list[float] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Inner loop
# ---------------------------------------------------------------------------

def admm_solve(
    prob: LocalProblem,
    init: ConsensusState,
    cfg: SolverConfig,
) -> tuple[ConsensusState, np.ndarray]:
    """Run the splitting scheme on one local problem.

    Each iteration solves the three block subproblems in parallel from a
    snapshot of the consensus copy and duals, averages, and ascends the
    duals.  Terminates on the primal-residual tolerance when one is set,
    otherwise after the fixed iteration count.  Returns the final state and
    the residual history with columns (primal, dual, max constraint
    violation of the steering copy).
    """
    state = init
    mean_ws = MeanProx(prob, cfg.rho, prob.polytope)
    cov_ws = CovProx(prob, cfg.rho, tol=cfg.conic_tol, max_iters=cfg.conic_max_iters)
    history = []
    cov_diags = []
    prev_primal = np.inf
    for it in range(cfg.inner_iters):
        t_mu = state.mu_cn - state.lam1
        t_sig = state.Sigma_cn - state.Lam1
        t_mu_cc = state.mu_cn - state.lam2
        t_sig_cc = state.Sigma_cn - state.Lam2
        # inexact proximal evaluations: tighten the conic tolerance with the
        # consensus residual so early iterations stay cheap
        if cfg.adaptive_conic_tol:
            cov_tol = float(np.clip(0.05 * prev_primal, cfg.conic_tol, 1e-3))
        else:
            cov_tol = cfg.conic_tol
        try:
            res_mean, res_cov, res_cc = run_tasks([
                lambda: mean_ws.solve(t_mu),
                lambda: cov_ws.solve(t_sig, tol=cov_tol,
                                     max_iters=cfg.conic_prox_max_iters),
                lambda: chance_prox(prob.constraints, t_mu_cc, t_sig_cc, cfg.rho),
            ])
        except (InfeasibleMeanError, InfeasibleCovarianceError, RecoveryError) as exc:
            raise type(exc)(f"inner iteration {it}: {exc}") from exc
        state.v, state.mu_s = res_mean
        state.K, state.Sigma_s, cov_diag = res_cov
        state.mu_cc, state.Sigma_cc, cc_diag = res_cc
        cov_diags.append(cov_diag)

        mu_cn_prev = state.mu_cn
        Sig_cn_prev = state.Sigma_cn
        consensus_update(state, prob.prox_weights, prob.anchor, cfg.averaging_mode)
        dual_update(state)

        primal = state.primal_residual()
        dual_res = cfg.rho * max(
            float(np.max(np.abs(state.mu_cn - mu_cn_prev), initial=0.0)),
            float(np.linalg.norm(state.Sigma_cn - Sig_cn_prev, axis=(1, 2)).max(initial=0.0)),
        )
        violation = max_violation(prob.constraints, state.mu_s, state.Sigma_s)
        history.append((primal, dual_res, violation))
        prev_primal = primal
        # a tolerance exit must certify the prox accuracy too, not just the
        # consensus gap of a sloppily-evaluated iterate
        if (cfg.inner_tol is not None and primal <= cfg.inner_tol
                and cov_tol <= max(cfg.conic_tol, 0.1 * cfg.inner_tol)):
            break
    hist = np.array(history).reshape(-1, 3)
    state.diagnostics = {"cov": cov_diags}  # type: ignore[attr-defined]
    return state, hist


# ---------------------------------------------------------------------------
# Baseline: one monolithic SDP per local problem
# ---------------------------------------------------------------------------

def _build_baseline_program(prob: LocalProblem) -> tuple[ConeProgram, dict, float]:
    """Assemble mean recursion, covariance LMIs, chance half-planes, and the
    full objective (including proximal terms) into one cone program."""
    n, m, t_f = prob.state_dim, prob.control_dim, prob.horizon
    sd, sdm = svec_dim(n), svec_dim(m)
    a_mu, a_sig = prob.prox_weights
    anchor = prob.anchor

    off_mu = 0
    off_v = (t_f + 1) * n
    off_sig = off_v + t_f * m
    off_u = off_sig + (t_f + 1) * sd
    off_y = off_u + t_f * m * n
    off_sj = off_y + t_f * sdm
    n_sj = t_f + 1 if a_mu > 0 else t_f
    off_ss = off_sj + n_sj
    n_ss = (t_f + 1) if a_sig > 0 else 0
    nv = off_ss + n_ss

    mu_idx = lambda t: slice(off_mu + t * n, off_mu + (t + 1) * n)
    v_idx = lambda t: slice(off_v + t * m, off_v + (t + 1) * m)
    sig_idx = lambda t: slice(off_sig + t * sd, off_sig + (t + 1) * sd)
    u_idx = lambda t: slice(off_u + t * m * n, off_u + (t + 1) * m * n)
    y_idx = lambda t: slice(off_y + t * sdm, off_y + (t + 1) * sdm)

    rows_A, cols_A, vals_A = [], [], []
    b_parts: list[np.ndarray] = []
    cones: list[Cone] = []

    def add_entries(r0, col_slice_or_idx, block):
        blk = np.atleast_2d(block)
        if isinstance(col_slice_or_idx, slice):
            cols = np.arange(col_slice_or_idx.start, col_slice_or_idx.stop)
        else:
            cols = np.atleast_1d(col_slice_or_idx)
        rr, cc = np.nonzero(blk)
        rows_A.append(r0 + rr)
        cols_A.append(cols[cc])
        vals_A.append(blk[rr, cc])

    row0 = 0
    # mean boundary and recursion (zero cone)
    add_entries(row0, mu_idx(0), np.eye(n))
    b_parts.append(prob.boundary.init.mean)
    row0 += n
    for t in range(t_f):
        lin = prob.lin[t]
        add_entries(row0, mu_idx(t + 1), np.eye(n))
        add_entries(row0, mu_idx(t), -lin.A)
        add_entries(row0, v_idx(t), -lin.B)
        b_parts.append(lin.d)
        row0 += n
    add_entries(row0, mu_idx(t_f), np.eye(n))
    b_parts.append(prob.boundary.term.mean)
    row0 += n
    cones.append(Cone("zero", (t_f + 2) * n))

    # input polytope
    if prob.polytope is not None:
        G, bmax = prob.polytope.Gmat, prob.polytope.b_max
        nb = G.shape[0]
        for t in range(t_f):
            add_entries(row0, v_idx(t), G)
            b_parts.append(bmax)
            add_entries(row0 + nb, v_idx(t), -G)
            b_parts.append(bmax)
            row0 += 2 * nb
        cones.append(Cone("nonneg", 2 * nb * t_f))

    # linearized chance constraints
    n_cc = sum(len(group) for group in prob.constraints)
    if n_cc:
        for t, group in enumerate(prob.constraints):
            for con in group:
                add_entries(row0, mu_idx(t), con.w[None, :])
                add_entries(row0, sig_idx(t), svec(con.G)[None, :])
                b_parts.append(np.array([-con.c]))
                row0 += 1
        cones.append(Cone("nonneg", n_cc))

    # covariance structure
    row0 = append_cov_structure(prob, sig_idx, u_idx, y_idx, add_entries, b_parts, cones, row0)

    # mean-cost epigraphs: s >= ||L (mu_t, v_t)||^2 with prox weight folded in
    for t in range(t_f + 1):
        if t < t_f:
            H = np.block([
                [prob.cost.Q[t] + a_mu * np.eye(n), np.zeros((n, m))],
                [np.zeros((m, n)), prob.cost.R],
            ])
            zdim = n + m
        else:
            if a_mu <= 0:
                continue
            H = a_mu * np.eye(n)
            zdim = n
        L = np.linalg.cholesky(H + 1e-12 * np.eye(zdim))
        epi = off_sj + t
        add_entries(row0, np.array([epi]), np.array([[-0.5], [0.5]]))
        if t < t_f:
            add_entries(row0 + 2, mu_idx(t), -L[:, :n])
            add_entries(row0 + 2, v_idx(t), -L[:, n:])
        else:
            add_entries(row0 + 2, mu_idx(t), -L)
        bb = np.zeros(zdim + 2)
        bb[0] = bb[1] = 0.5
        b_parts.append(bb)
        cones.append(Cone("soc", zdim + 2))
        row0 += zdim + 2

    # covariance prox epigraphs: s >= ||svec(Sigma_t)||^2
    if a_sig > 0:
        for t in range(t_f + 1):
            epi = off_ss + t
            add_entries(row0, np.array([epi]), np.array([[-0.5], [0.5]]))
            add_entries(row0 + 2, sig_idx(t), -np.eye(sd))
            bb = np.zeros(sd + 2)
            bb[0] = bb[1] = 0.5
            b_parts.append(bb)
            cones.append(Cone("soc", sd + 2))
            row0 += sd + 2

    A = sp.coo_matrix(
        (np.concatenate(vals_A), (np.concatenate(rows_A), np.concatenate(cols_A))),
        shape=(row0, nv),
    ).tocsc()
    b = np.concatenate(b_parts)

    c = np.zeros(nv)
    const = 0.0
    for t in range(t_f + 1):
        if t < t_f:
            c[mu_idx(t)] = prob.cost.q[t] - a_mu * anchor.xbar[t]
            c[sig_idx(t)] = svec(prob.cost.Q[t]) - a_sig * svec(anchor.Sigma[t])
            c[y_idx(t)] = svec(np.eye(m))
            c[off_sj + t] = 0.5
        else:
            c[mu_idx(t)] = -a_mu * anchor.xbar[t]
            c[sig_idx(t)] = -a_sig * svec(anchor.Sigma[t])
            if a_mu > 0:
                c[off_sj + t] = 0.5
        const += 0.5 * a_mu * float(anchor.xbar[t] @ anchor.xbar[t])
        const += 0.5 * a_sig * float(svec(anchor.Sigma[t]) @ svec(anchor.Sigma[t]))
        if a_sig > 0:
            c[off_ss + t] = 0.5 * a_sig
    idx = {"mu": mu_idx, "v": v_idx, "sig": sig_idx, "u": u_idx}
    return ConeProgram(c=c, A=A, b=b, cones=cones), idx, const


def baseline_solve(prob: LocalProblem, cfg: SolverConfig | None = None) -> SolveReport:
    """Solve one local problem as a single SDP without operator splitting.

    This is the ablation baseline: every constraint must hold simultaneously,
    so a bad linearization that empties the feasible set surfaces as an
    infeasibility certificate instead of a recoverable iterate.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    prog, idx, const = _build_baseline_program(prob)
    ws = ConicWorkspace(prog, tol=cfg.conic_tol, max_iters=cfg.conic_max_iters)
    sol = ws.solve()
    wall = time.perf_counter() - t0
    n, m, t_f = prob.state_dim, prob.control_dim, prob.horizon
    if sol.status == "infeasible":
        return SolveReport(
            law=None, mean_traj=None, cov_traj=None, objective=np.nan,
            residual_history=[], constraint_residuals=np.inf,
            status="infeasible", wall_time=wall,
            diagnostics={"conic": sol.residuals, "iterations": sol.iterations},
        )
    if sol.status not in ("optimal",):
        return SolveReport(
            law=None, mean_traj=None, cov_traj=None, objective=np.nan,
            residual_history=[], constraint_residuals=np.inf,
            status="numeric_error", wall_time=wall,
            diagnostics={"conic": sol.residuals, "conic_status": sol.status},
        )
    from .blocks import _recover_gain

    mu = np.vstack([sol.primal[idx["mu"](t)] for t in range(t_f + 1)])
    v = np.vstack([sol.primal[idx["v"](t)] for t in range(t_f)])
    Sigma = np.empty((t_f + 1, n, n))
    K = np.empty((t_f, m, n))
    for t in range(t_f + 1):
        S = smat(sol.primal[idx["sig"](t)], n)
        if t < t_f:
            U = sol.primal[idx["u"](t)].reshape(m, n)
            K[t], Sigma[t] = _recover_gain(U, S)
        else:
            w, V = np.linalg.eigh(0.5 * (S + S.T))
            Sigma[t] = (V * np.clip(w, 1e-9, None)) @ V.T
    law = ControlLaw(v=v, K=K, ref_mean=mu[:-1])
    return SolveReport(
        law=law, mean_traj=mu, cov_traj=Sigma,
        objective=sol.objective + const,
        residual_history=[],
        constraint_residuals=max_violation(prob.constraints, mu, Sigma),
        status="converged", wall_time=wall,
        diagnostics={"conic": sol.residuals, "iterations": sol.iterations},
    )


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------

def _solution_objective(prob: LocalProblem, mu, v, Sigma, K) -> float:
    return (
        mean_objective(prob.cost, mu, v)
        + cov_objective(prob.cost, Sigma, K)
        + prox_objective(prob.prox_weights, mu, Sigma, prob.anchor)
    )


def outer_solve(
    scenario: SteeringScenario,
    cfg: SolverConfig,
    tau0: NominalTrajectory,
    method: str = "admm",
) -> SolveReport:
    """Successive convexification around the splitting scheme (or the baseline).

    Repeats Taylor expansion, inner solve, and forward pass.  Stops early
    when both the trust-region residual (deviation of the solution from its
    linearization anchor) and the worst linearized-constraint violation fall
    below the outer tolerance; at budget exhaustion the run still counts as
    converged if the final iterate satisfies the constraints.
    """
    if method not in ("admm", "baseline"):
        raise ValueError("method must be 'admm' or 'baseline'")
    t0 = time.perf_counter()
    tau = tau0
    duals = None
    law = None
    mu_sol = Sig_sol = None
    objective = np.nan
    constraint_res = np.inf
    residual_history: list[np.ndarray] = []
    tr_history: list[float] = []
    diagnostics: dict = {"failures": [], "inner": [], "forward_pass_defect": []}
    if method == "baseline":
        diagnostics["baseline_statuses"] = []
    status = "max_iters"
    fail_count = 0
    last_prob = None

    for k in range(cfg.outer_iters):
        prob = scenario.local_problem(cfg, tau)
        if method == "admm":
            init = ConsensusState.from_anchor(tau, cfg.rho)
            if cfg.warm_start_duals and duals is not None:
                init.lam1, init.lam2, init.Lam1, init.Lam2 = (d.copy() for d in duals)
            try:
                state, hist = admm_solve(prob, init, cfg)
            except (InfeasibleMeanError, InfeasibleCovarianceError, RecoveryError) as exc:
                fail_count += 1
                diagnostics["failures"].append({"outer_iter": k, "error": str(exc)})
                if fail_count >= cfg.patience:
                    status = "infeasible"
                    break
                continue
            fail_count = 0
            duals = (state.lam1, state.lam2, state.Lam1, state.Lam2)
            v, K = state.v, state.K
            mu_sol, Sig_sol = state.mu_s, state.Sigma_s
            residual_history.append(hist)
            diagnostics["inner"].append(getattr(state, "diagnostics", {}))
        else:
            rep = baseline_solve(prob, cfg)
            diagnostics["baseline_statuses"].append(rep.status)
            if rep.status != "converged":
                fail_count += 1
                diagnostics["failures"].append({"outer_iter": k, "error": rep.status})
                if rep.status == "infeasible" or fail_count >= cfg.patience:
                    status = rep.status if rep.status == "infeasible" else "numeric_error"
                    break
                continue
            fail_count = 0
            v, K = rep.law.v, rep.law.K
            mu_sol, Sig_sol = rep.mean_traj, rep.cov_traj
            residual_history.append(np.zeros((0, 3)))

        last_prob = prob
        objective = _solution_objective(prob, mu_sol, v, Sig_sol, K)
        constraint_res = max_violation(prob.constraints, mu_sol, Sig_sol)
        tr = max(
            float(np.max(np.abs(mu_sol - tau.xbar))),
            float(np.linalg.norm(Sig_sol - tau.Sigma, axis=(1, 2)).max()),
        )
        tr_history.append(tr)
        law = ControlLaw(v=v, K=K, ref_mean=mu_sol[:-1].copy())

        if cfg.forward_pass_mode == "sampled":
            tau = sampled_forward_pass(
                scenario.model, law,
                GaussianState(scenario.boundary.init.mean, scenario.boundary.init.cov),
                cfg.n_rollout_samples, cfg.seed,
            )
        else:
            tau = forward_pass(
                scenario.model, law, Sig_sol, scenario.boundary.init.mean,
                use_feedback=cfg.feedback_forward_pass,
            )
            diagnostics["forward_pass_defect"].append(tau.dynamics_defect(scenario.model))

        if tr <= cfg.outer_tol and constraint_res <= cfg.outer_tol:
            status = "converged"
            break

    # strip residual consensus error from the report: re-solve the mean
    # subproblem with the chance constraints imposed at the final covariance
    if cfg.final_polish and law is not None and method == "admm" and last_prob is not None:
        polished = polish_mean(last_prob, Sig_sol, tol=cfg.conic_tol)
        diagnostics["polish"] = polished is not None
        if polished is not None:
            v, mu_sol = polished
            law = ControlLaw(v=v, K=law.K, ref_mean=mu_sol[:-1].copy())
            objective = _solution_objective(last_prob, mu_sol, v, Sig_sol, law.K)
            constraint_res = max_violation(last_prob.constraints, mu_sol, Sig_sol)

    if status == "max_iters" and constraint_res <= cfg.outer_tol:
        status = "converged"
    elif status == "converged" and constraint_res > cfg.outer_tol:
        status = "max_iters"
    return SolveReport(
        law=law, mean_traj=mu_sol, cov_traj=Sig_sol, objective=objective,
        residual_history=residual_history, constraint_residuals=constraint_res,
        status=status, wall_time=time.perf_counter() - t0,
        trust_region_history=tr_history, diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# Initial guesses
# ---------------------------------------------------------------------------

def initial_guess(
    scenario: SteeringScenario,
    mode: str = "straight_line",
    provided: NominalTrajectory | None = None,
) -> NominalTrajectory:
    """Dynamically consistent warm start.

    straight_line: interpolate the boundary means, recover controls by
    per-step inverse-dynamics least squares while rolling the nonlinear
    dynamics forward (so consistency holds by construction), and propagate
    the covariance open loop.  provided: validate a caller-supplied
    trajectory instead.
    """
    model = scenario.model
    if mode == "provided":
        if provided is None:
            raise ValueError("provided mode requires a trajectory")
        defect = provided.dynamics_defect(model)
        if defect > 1e-6:
            raise ValueError(
                f"provided trajectory is dynamically inconsistent: max defect {defect:.3e}"
            )
        return provided
    if mode != "straight_line":
        raise ValueError("mode must be 'straight_line' or 'provided'")

    t_f = scenario.t_f
    bnd = scenario.boundary
    n, m = model.state_dim, model.control_dim
    line = np.linspace(bnd.init.mean, bnd.term.mean, t_f + 1)
    xbar = np.empty((t_f + 1, n))
    ubar = np.empty((t_f, m))
    xbar[0] = bnd.init.mean
    trim = model.trim
    for t in range(t_f):
        lin = linearize_dynamics(model, xbar[t], trim)
        drift = model.step(xbar[t], trim)
        ubar[t] = trim + np.linalg.lstsq(lin.B, line[t + 1] - drift, rcond=None)[0]
        xbar[t + 1] = model.step(xbar[t], ubar[t])

    Sigma = np.empty((t_f + 1, n, n))
    Sigma[0] = bnd.init.cov
    zeroK = np.zeros((m, n))
    for t in range(t_f):
        lin = linearize_dynamics(model, xbar[t], ubar[t])
        Sigma[t + 1] = propagate_cov(lin, Sigma[t], zeroK)
    return NominalTrajectory(xbar=xbar, ubar=ubar, Sigma=Sigma)
