"""Assembly of the local convex covariance steering problem.

Given a nominal trajectory, this module collects everything the splitting
scheme and the single-SDP baseline consume: per-step dynamics expansions, the
second-order cost expansion, the linearized chance constraint sets, boundary
conditions, and proximal regularization weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .chance import LinearizedChanceConstraint, Obstacle, RiskBudget, build_constraint_sets
from .models import (
    DynamicsModel,
    GaussianState,
    LinearizedDynamics,
    LinearizationError,
    NominalTrajectory,
    linearize_dynamics,
)


class CostExpansionError(Exception):
    """Non-finite Hessian produced while expanding the state cost."""


@dataclass
class QuadraticCost:
    """Second-order cost data: per-step (Q_t, q_t) and the control weight R."""

    Q: np.ndarray      # (t_f, n, n), PSD
    q: np.ndarray      # (t_f, n)
    R: np.ndarray      # (m, m), PD

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if np.linalg.eigvalsh(0.5 * (self.R + self.R.T)).min() <= 0:
            raise ValueError("control weight R must be positive definite")


@dataclass
class Boundary:
    """Initial and terminal Gaussian boundary conditions."""

    init: GaussianState
    term: GaussianState
    terminal_cov_mode: str = "inequality"   # or "equality"

    def __post_init__(self):
        if self.terminal_cov_mode not in ("inequality", "equality"):
            raise ValueError("terminal_cov_mode must be 'inequality' or 'equality'")


@dataclass
class LocalProblem:
    """One convex subproblem of the successive convexification loop."""

    lin: list[LinearizedDynamics]
    cost: QuadraticCost
    constraints: list[list[LinearizedChanceConstraint]]
    boundary: Boundary
    prox_weights: tuple[float, float]      # (alpha_mu, alpha_sigma)
    anchor: NominalTrajectory
    polytope: "object | None" = None       # optional ControlPolytope from blocks

    def __post_init__(self):
        t_f = self.anchor.horizon
        if len(self.lin) != t_f or len(self.constraints) != t_f + 1:
            raise ValueError("horizon lengths of the local problem are inconsistent")

    @property
    def horizon(self) -> int:
        return self.anchor.horizon

    @property
    def state_dim(self) -> int:
        return self.anchor.xbar.shape[1]

    @property
    def control_dim(self) -> int:
        return self.anchor.ubar.shape[1]


# ---------------------------------------------------------------------------
# Cost expansion
# ---------------------------------------------------------------------------

def _fd_hessian(c: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    n = x.size
    H = np.empty((n, n))
    for i in range(n):
        for j in range(i + 1):
            di = np.zeros(n); di[i] = eps
            dj = np.zeros(n); dj[j] = eps
            val = (c(x + di + dj) - c(x + di - dj) - c(x - di + dj) + c(x - di - dj)) / (4 * eps**2)
            H[i, j] = H[j, i] = val
    return H


def _clamp_psd(M: np.ndarray) -> np.ndarray:
    sym = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(sym)
    w = np.clip(w, 0.0, None)
    return (V * w) @ V.T


def expand_cost(
    cost_model: Callable[[np.ndarray], float] | np.ndarray,
    R: np.ndarray,
    traj: NominalTrajectory,
    hessian: Callable[[np.ndarray], np.ndarray] | None = None,
) -> QuadraticCost:
    """Second-order expansion of the state cost along the trajectory.

    ``cost_model`` is either a scalar function c(x) (Hessian by central
    differences unless ``hessian`` is supplied) or a constant matrix Qhat for
    the quadratic cost x'Qhat x / 2.  Hessians are symmetrized and
    eigenvalue-clamped to PSD so the subproblem stays convex; the linear term
    is anchored at the trajectory, q_t = -Q_t xbar_t.
    """
    t_f = traj.horizon
    n = traj.xbar.shape[1]
    Q = np.empty((t_f, n, n))
    for t in range(t_f):
        if callable(cost_model):
            H = hessian(traj.xbar[t]) if hessian is not None else _fd_hessian(cost_model, traj.xbar[t])
        else:
            H = np.asarray(cost_model, dtype=float)
        if not np.all(np.isfinite(H)):
            raise CostExpansionError(f"non-finite cost Hessian at step {t}")
        Q[t] = _clamp_psd(H)
    q = -np.einsum("tij,tj->ti", Q, traj.xbar[:-1])
    return QuadraticCost(Q=Q, q=q, R=np.asarray(R, dtype=float))


# ---------------------------------------------------------------------------
# Objective pieces
# ---------------------------------------------------------------------------

def mean_objective(cost: QuadraticCost, mu_seq: np.ndarray, v_seq: np.ndarray) -> float:
    """Mean-component cost: sum of mu'Q mu / 2 + q'mu + v'R v / 2 over steps."""
    total = 0.0
    for t in range(len(cost.Q)):
        mu, v = mu_seq[t], v_seq[t]
        total += 0.5 * mu @ cost.Q[t] @ mu + cost.q[t] @ mu + 0.5 * v @ cost.R @ v
    return float(total)


def cov_objective(cost: QuadraticCost, Sigma_seq: np.ndarray, K_seq: np.ndarray) -> float:
    """Steering-component cost: sum of tr(Q Sigma) + tr(R K Sigma K')."""
    total = 0.0
    for t in range(len(cost.Q)):
        S, K = Sigma_seq[t], K_seq[t]
        total += np.trace(cost.Q[t] @ S) + np.trace(cost.R @ K @ S @ K.T)
    return float(total)


def prox_objective(
    weights: tuple[float, float],
    mu_seq: np.ndarray,
    Sigma_seq: np.ndarray,
    anchor: NominalTrajectory,
) -> float:
    """Quadratic pull toward the linearization anchor over the whole horizon."""
    a_mu, a_sigma = weights
    total = 0.0
    for t in range(anchor.horizon + 1):
        total += 0.5 * a_mu * float(np.sum((mu_seq[t] - anchor.xbar[t]) ** 2))
        total += 0.5 * a_sigma * float(np.sum((Sigma_seq[t] - anchor.Sigma[t]) ** 2))
    return float(total)


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------

def build_local_problem(
    model: DynamicsModel,
    cost_model,
    R: np.ndarray,
    obstacles: list[Obstacle],
    budget: RiskBudget | None,
    boundary: Boundary,
    prox_weights: tuple[float, float],
    traj: NominalTrajectory,
    polytope=None,
    hessian=None,
) -> LocalProblem:
    """Taylor-expand dynamics, cost, and constraints about the trajectory."""
    t_f = traj.horizon
    lin = []
    for t in range(t_f):
        try:
            lin.append(linearize_dynamics(model, traj.xbar[t], traj.ubar[t]))
        except LinearizationError as exc:
            raise LinearizationError(f"step {t}: {exc}") from exc
    cost = expand_cost(cost_model, R, traj, hessian=hessian)
    if obstacles:
        if budget is None:
            raise ValueError("obstacles given without a risk budget")
        constraints = build_constraint_sets(obstacles, budget, traj)
    else:
        constraints = [[] for _ in range(t_f + 1)]
    return LocalProblem(
        lin=lin, cost=cost, constraints=constraints, boundary=boundary,
        prox_weights=tuple(prox_weights), anchor=traj, polytope=polytope,
    )
