"""Dynamics model catalog, Taylor expansion, and Gaussian moment propagation.

Catalog models (double integrator, unicycle, quadrotor) are discrete-time
maps obtained by explicit Euler discretization of the continuous dynamics
with the scenario time step.  Each ships an analytic Jacobian; models built
without one fall back to central finite differences inside
:func:`linearize_dynamics`.

All step functions broadcast over leading axes, so whole batches of
Monte-Carlo rollouts advance in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rng import cov_sqrt, initial_draw, noise_tape


class LinearizationError(Exception):
    """Non-finite Jacobian or offset produced while linearizing."""


class DivergenceError(Exception):
    """State became non-finite during a rollout."""


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------

@dataclass
class DynamicsModel:
    """Discrete-time stochastic system x+ = f(x, u) + D(x) w, w ~ N(0, I).

    ``step`` and ``diffusion`` must broadcast over leading batch axes.
    ``jacobian``, when provided, returns the pair (df/dx, df/du) at a point;
    otherwise central finite differences are used.  ``input_matrix`` exposes
    df/du at a reference input for diffusion specs that scale the input
    channel.
    """

    name: str
    state_dim: int
    control_dim: int
    dt: float
    step: Callable[[np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None
    input_matrix: Callable[[np.ndarray], np.ndarray] | None = None
    trim_input: np.ndarray | None = None

    @property
    def noise_dim(self) -> int:
        probe = self.diffusion(np.zeros(self.state_dim))
        return probe.shape[-1]

    @property
    def trim(self) -> np.ndarray:
        return np.zeros(self.control_dim) if self.trim_input is None else self.trim_input


@dataclass
class LinearizedDynamics:
    """Affine expansion x+ ~ A x + B u + d with diffusion D, one time step."""

    A: np.ndarray
    B: np.ndarray
    d: np.ndarray
    D: np.ndarray


@dataclass
class GaussianState:
    """Mean and covariance of a Gaussian state distribution."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        asym = np.linalg.norm(self.cov - self.cov.T)
        if asym > 1e-10:
            raise ValueError(f"covariance asymmetry {asym:.2e} exceeds 1e-10")
        w = np.linalg.eigvalsh(0.5 * (self.cov + self.cov.T))
        if w.min() < -1e-9:
            raise ValueError(f"covariance min eigenvalue {w.min():.2e} below -1e-9")


@dataclass
class ControlLaw:
    """Feedback policy u_t(x) = v_t + K_t (x - ref_mean_t)."""

    v: np.ndarray            # (t_f, m)
    K: np.ndarray            # (t_f, m, n)
    ref_mean: np.ndarray     # (t_f, n)

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.K = np.asarray(self.K, dtype=float)
        self.ref_mean = np.asarray(self.ref_mean, dtype=float)
        if not (len(self.v) == len(self.K) == len(self.ref_mean)):
            raise ValueError("v, K, ref_mean must share the horizon length")

    @property
    def horizon(self) -> int:
        return len(self.v)


@dataclass
class NominalTrajectory:
    """Linearization point (states, controls, covariances) threading the outer loop."""

    xbar: np.ndarray        # (t_f + 1, n)
    ubar: np.ndarray        # (t_f, m)
    Sigma: np.ndarray       # (t_f + 1, n, n)

    def __post_init__(self):
        self.xbar = np.asarray(self.xbar, dtype=float)
        self.ubar = np.asarray(self.ubar, dtype=float)
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        if len(self.xbar) != len(self.ubar) + 1 or len(self.Sigma) != len(self.xbar):
            raise ValueError("trajectory horizon lengths are inconsistent")

    @property
    def horizon(self) -> int:
        return len(self.ubar)

    def dynamics_defect(self, model: DynamicsModel) -> float:
        """Max-abs gap between stored states and a one-step replay of f."""
        pred = model.step(self.xbar[:-1], self.ubar)
        return float(np.max(np.abs(self.xbar[1:] - pred)))


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def _fd_jacobian(f, x, u, eps=1e-6):
    n, m = x.size, u.size
    fx = np.empty((n, n))
    fu = np.empty((n, m))
    for i in range(n):
        dx = np.zeros(n)
        dx[i] = eps
        fx[:, i] = (f(x + dx, u) - f(x - dx, u)) / (2 * eps)
    for j in range(m):
        du = np.zeros(m)
        du[j] = eps
        fu[:, j] = (f(x, u + du) - f(x, u - du)) / (2 * eps)
    return fx, fu


def linearize_dynamics(model: DynamicsModel, xbar: np.ndarray, ubar: np.ndarray) -> LinearizedDynamics:
    """First-order expansion of the dynamics about (xbar, ubar).

    The offset d absorbs f(xbar, ubar) - A xbar - B ubar so the expansion is
    exact at the expansion point.
    """
    xbar = np.asarray(xbar, dtype=float)
    ubar = np.asarray(ubar, dtype=float)
    if model.jacobian is not None:
        A, B = model.jacobian(xbar, ubar)
    else:
        A, B = _fd_jacobian(model.step, xbar, ubar)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise LinearizationError("non-finite Jacobian entries")
    d = model.step(xbar, ubar) - A @ xbar - B @ ubar
    if not np.all(np.isfinite(d)):
        raise LinearizationError("non-finite affine offset")
    return LinearizedDynamics(A=A, B=B, d=d, D=np.atleast_2d(model.diffusion(xbar)))


def propagate_mean(lin: LinearizedDynamics, mu: np.ndarray, v: np.ndarray) -> np.ndarray:
    """One step of the mean recursion A mu + B v + d."""
    return lin.A @ mu + lin.B @ v + lin.d


def propagate_cov(lin: LinearizedDynamics, Sigma: np.ndarray, K: np.ndarray) -> np.ndarray:
    """One step of the closed-loop covariance recursion, symmetrized."""
    M = lin.A + lin.B @ K
    out = M @ Sigma @ M.T + lin.D @ lin.D.T
    return 0.5 * (out + out.T)


def forward_pass(
    model: DynamicsModel,
    law: ControlLaw,
    Sigma_s: np.ndarray,
    x0: np.ndarray,
    use_feedback: bool = True,
) -> NominalTrajectory:
    """Noiseless rollout of the nonlinear dynamics under the control law.

    Covariances are carried over from the solver output Sigma_s rather than
    re-propagated.  With ``use_feedback`` disabled the rollout applies the
    feedforward terms only.
    """
    t_f = law.horizon
    n = model.state_dim
    xbar = np.empty((t_f + 1, n))
    ubar = np.empty((t_f, model.control_dim))
    xbar[0] = x0
    for t in range(t_f):
        u = law.v[t].copy()
        if use_feedback:
            u += law.K[t] @ (xbar[t] - law.ref_mean[t])
        ubar[t] = u
        xbar[t + 1] = model.step(xbar[t], u)
        if not np.all(np.isfinite(xbar[t + 1])):
            raise DivergenceError(f"rollout diverged at step {t + 1}")
    traj = NominalTrajectory(xbar=xbar, ubar=ubar, Sigma=np.asarray(Sigma_s, dtype=float).copy())
    defect = traj.dynamics_defect(model)
    if defect > 1e-9:
        raise DivergenceError(f"forward pass dynamic defect {defect:.2e} exceeds 1e-9")
    return traj


def sampled_forward_pass(
    model: DynamicsModel,
    law: ControlLaw,
    x0_dist: GaussianState,
    n_samples: int,
    seed: int,
) -> NominalTrajectory:
    """Estimate the nominal trajectory from noisy closed-loop rollouts.

    Sample moments replace the analytic recursions; the output is
    deterministic given the seed and independent of how samples are batched.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    t_f = law.horizon
    n, p = model.state_dim, model.noise_dim
    sqrt_cov = cov_sqrt(x0_dist.cov)
    X = np.empty((n_samples, n))
    for i in range(n_samples):
        X[i] = initial_draw(seed, i, x0_dist.mean, sqrt_cov)
    W = np.empty((n_samples, t_f, p))
    for i in range(n_samples):
        W[i] = noise_tape(seed, i, t_f, p)

    xbar = np.empty((t_f + 1, n))
    Sigma = np.empty((t_f + 1, n, n))
    for t in range(t_f + 1):
        xbar[t] = X.mean(axis=0)
        centered = X - xbar[t]
        Sigma[t] = centered.T @ centered / (n_samples - 1)
        if t == t_f:
            break
        U = law.v[t] + (X - law.ref_mean[t]) @ law.K[t].T
        Xnext = model.step(X, U)
        if p:
            Dx = model.diffusion(X)
            Xnext = Xnext + np.einsum("...ij,...j->...i", Dx, W[:, t, :])
        if not np.all(np.isfinite(Xnext)):
            raise DivergenceError(f"sampled rollout diverged at step {t + 1}")
        X = Xnext
    ubar = law.v + np.einsum("tij,tj->ti", law.K, xbar[:-1] - law.ref_mean)
    return NominalTrajectory(xbar=xbar, ubar=ubar, Sigma=Sigma)


# ---------------------------------------------------------------------------
# Catalog: double integrator
# ---------------------------------------------------------------------------

def _zero_diffusion(n):
    def diffusion(x):
        return np.zeros(np.shape(x)[:-1] + (n, 0))
    return diffusion


def double_integrator(dt: float, diffusion=None) -> DynamicsModel:
    """Planar double integrator: state (px, py, vx, vy), control (ax, ay).

    Uses the exact zero-order-hold discretization (closed form for this
    linear system), so acceleration inputs reach the positions within one
    step and an input-shaped diffusion excites positions as well.
    """
    A = np.eye(4)
    A[0, 2] = A[1, 3] = dt
    B = np.zeros((4, 2))
    B[0, 0] = B[1, 1] = 0.5 * dt * dt
    B[2, 0] = B[3, 1] = dt

    def step(x, u):
        return x @ A.T + u @ B.T

    def jacobian(x, u):
        return A.copy(), B.copy()

    def input_matrix(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(B, x.shape[:-1] + B.shape).copy()

    return DynamicsModel(
        name="double_integrator", state_dim=4, control_dim=2, dt=dt,
        step=step, diffusion=diffusion or _zero_diffusion(4),
        jacobian=jacobian, input_matrix=input_matrix,
    )


# ---------------------------------------------------------------------------
# Catalog: unicycle
# ---------------------------------------------------------------------------

def unicycle(dt: float, diffusion=None) -> DynamicsModel:
    """Unicycle robot: state (x, y, heading), control (speed, turn rate)."""

    def step(x, u):
        th = x[..., 2]
        out = np.array(x, dtype=float, copy=True)
        out[..., 0] += dt * u[..., 0] * np.cos(th)
        out[..., 1] += dt * u[..., 0] * np.sin(th)
        out[..., 2] += dt * u[..., 1]
        return out

    def jacobian(x, u):
        th, v = x[2], u[0]
        A = np.eye(3)
        A[0, 2] = -dt * v * np.sin(th)
        A[1, 2] = dt * v * np.cos(th)
        B = np.zeros((3, 2))
        B[0, 0] = dt * np.cos(th)
        B[1, 0] = dt * np.sin(th)
        B[2, 1] = dt
        return A, B

    def input_matrix(x):
        x = np.asarray(x, dtype=float)
        th = x[..., 2]
        B = np.zeros(x.shape[:-1] + (3, 2))
        B[..., 0, 0] = dt * np.cos(th)
        B[..., 1, 0] = dt * np.sin(th)
        B[..., 2, 1] = dt
        return B

    return DynamicsModel(
        name="unicycle", state_dim=3, control_dim=2, dt=dt,
        step=step, diffusion=diffusion or _zero_diffusion(3),
        jacobian=jacobian, input_matrix=input_matrix,
    )


# ---------------------------------------------------------------------------
# Catalog: quadrotor
# ---------------------------------------------------------------------------

_QUAD_MASS = 1.0
_QUAD_GRAVITY = 9.81
_QUAD_INERTIA = np.array([0.01, 0.01, 0.02])


def quadrotor_hover_input() -> np.ndarray:
    """Input (total thrust, zero torques) holding the quadrotor level."""
    return np.array([_QUAD_MASS * _QUAD_GRAVITY, 0.0, 0.0, 0.0])


def _thrust_axis(phi, th, psi):
    """World-frame body-z axis of a ZYX (yaw-pitch-roll) attitude."""
    cphi, sphi = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(th), np.sin(th)
    cpsi, spsi = np.cos(psi), np.sin(psi)
    return np.stack(
        [
            cpsi * sth * cphi + spsi * sphi,
            spsi * sth * cphi - cpsi * sphi,
            cth * cphi,
        ],
        axis=-1,
    )


def quadrotor(dt: float, diffusion=None) -> DynamicsModel:
    """Rigid-body quadrotor with 12 states and 4 inputs.

    State layout: position (3), world velocity (3), ZYX Euler angles
    (roll, pitch, yaw), and body rates (3).  Inputs are total thrust and the
    three body torques.  Parameters: unit mass, gravity 9.81, diagonal
    inertia (0.01, 0.01, 0.02).  Euler-angle kinematics are singular at
    pitch +-pi/2; scenarios must stay clear of that regime.
    """
    m, g = _QUAD_MASS, _QUAD_GRAVITY
    J = _QUAD_INERTIA

    def step(x, u):
        v = x[..., 3:6]
        phi, th, psi = x[..., 6], x[..., 7], x[..., 8]
        om = x[..., 9:12]
        F, tau = u[..., 0], u[..., 1:4]

        r3 = _thrust_axis(phi, th, psi)
        vdot = (F[..., None] / m) * r3
        vdot = vdot - np.array([0.0, 0.0, g])

        cphi, sphi = np.cos(phi), np.sin(phi)
        cth, sth = np.cos(th), np.sin(th)
        tth = sth / cth
        p, q, r = om[..., 0], om[..., 1], om[..., 2]
        angdot = np.stack(
            [
                p + sphi * tth * q + cphi * tth * r,
                cphi * q - sphi * r,
                (sphi * q + cphi * r) / cth,
            ],
            axis=-1,
        )
        Jom = om * J
        omdot = (tau - np.cross(om, Jom)) / J

        out = np.array(x, dtype=float, copy=True)
        out[..., 0:3] += dt * v
        out[..., 3:6] += dt * vdot
        out[..., 6:9] += dt * angdot
        out[..., 9:12] += dt * omdot
        return out

    def jacobian(x, u):
        phi, th, psi = x[6], x[7], x[8]
        p, q, r = x[9], x[10], x[11]
        F = u[0]
        cphi, sphi = np.cos(phi), np.sin(phi)
        cth, sth = np.cos(th), np.sin(th)
        cpsi, spsi = np.cos(psi), np.sin(psi)
        tth = sth / cth

        Act = np.zeros((12, 12))
        Act[0:3, 3:6] = np.eye(3)
        # thrust-axis sensitivity to attitude
        dr3 = np.array(
            [
                [-cpsi * sth * sphi + spsi * cphi, cpsi * cth * cphi, -spsi * sth * cphi + cpsi * sphi],
                [-spsi * sth * sphi - cpsi * cphi, spsi * cth * cphi, cpsi * sth * cphi + spsi * sphi],
                [-cth * sphi, -sth * cphi, 0.0],
            ]
        )
        Act[3:6, 6:9] = (F / m) * dr3
        # Euler-rate kinematics
        T = np.array([[1.0, sphi * tth, cphi * tth], [0.0, cphi, -sphi], [0.0, sphi / cth, cphi / cth]])
        dang = np.zeros((3, 3))
        dang[0, 0] = cphi * tth * q - sphi * tth * r
        dang[0, 1] = (sphi * q + cphi * r) / cth**2
        dang[1, 0] = -sphi * q - cphi * r
        dang[2, 0] = (cphi * q - sphi * r) / cth
        dang[2, 1] = (sphi * q + cphi * r) * sth / cth**2
        Act[6:9, 6:9] = dang
        Act[6:9, 9:12] = T
        # gyroscopic terms, diagonal inertia
        J1, J2, J3 = J
        dom = np.array(
            [
                [0.0, (J3 - J2) * r, (J3 - J2) * q],
                [(J1 - J3) * r, 0.0, (J1 - J3) * p],
                [(J2 - J1) * q, (J2 - J1) * p, 0.0],
            ]
        )
        Act[9:12, 9:12] = -dom / J[:, None]

        Bct = np.zeros((12, 4))
        Bct[3:6, 0] = _thrust_axis(phi, th, psi) / m
        Bct[9:12, 1:4] = np.diag(1.0 / J)
        return np.eye(12) + dt * Act, dt * Bct

    def input_matrix(x):
        """df/du at hover thrust; thrust column follows the attitude."""
        x = np.asarray(x, dtype=float)
        B = np.zeros(x.shape[:-1] + (12, 4))
        r3 = _thrust_axis(x[..., 6], x[..., 7], x[..., 8])
        B[..., 3:6, 0] = r3 / m
        B[..., 9:12, 1:4] = np.diag(1.0 / J)
        return dt * B

    return DynamicsModel(
        name="quadrotor", state_dim=12, control_dim=4, dt=dt,
        step=step, diffusion=diffusion or _zero_diffusion(12),
        jacobian=jacobian, input_matrix=input_matrix,
        trim_input=quadrotor_hover_input(),
    )


_CATALOG = {
    "double_integrator": double_integrator,
    "unicycle": unicycle,
    "quadrotor": quadrotor,
}


def make_model(name: str, dt: float, diffusion=None) -> DynamicsModel:
    """Instantiate a catalog model by id."""
    if name not in _CATALOG:
        raise KeyError(f"unknown model {name!r}; available: {sorted(_CATALOG)}")
    return _CATALOG[name](dt, diffusion)
