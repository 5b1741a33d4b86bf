"""Obstacle constraints, risk allocation, Gaussian tightening, and linearization.

Obstacles are described by signed distance functions h with h(x) <= 0 on the
forbidden set.  A joint risk budget delta is split uniformly across the N
obstacles by the union bound, each per-obstacle constraint is linearized to a
half-plane, tightened through the Gaussian quantile into a deterministic
function g(mu, Sigma), and finally g itself (concave in Sigma) is linearized
about the nominal trajectory so that the tangent overestimates it --- the
linearized constraint is conservative.

Sign convention: a tightened half-plane with coefficients (a, b) bounds the
violation event {a'x + b >= 0}, i.e. the forbidden side of the obstacle after
negating its signed-distance linearization.  Then g(mu, Sigma) <= 0 certifies
P{violation} <= delta'.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DegenerateGradientError(Exception):
    """Obstacle gradient vanished (nominal point at an obstacle center)."""


class PSDViolationError(Exception):
    """Quadratic form a' Sigma a came out significantly negative."""


# ---------------------------------------------------------------------------
# Obstacles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Obstacle:
    """Workspace obstacle acting on a subset of state coordinates.

    shape is one of "circle", "sphere" (center + radius) or "halfspace"
    (normal + offset, forbidden where normal'x + offset <= 0).  ``projection``
    lists the state coordinates the shape lives in.
    """

    shape: str
    projection: tuple[int, ...]
    center: np.ndarray | None = None
    radius: float | None = None
    normal: np.ndarray | None = None
    offset: float | None = None

    def __post_init__(self):
        if self.shape in ("circle", "sphere"):
            object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
            if self.radius is None or self.radius <= 0:
                raise ValueError("circle/sphere obstacle needs radius > 0")
            if len(self.center) != len(self.projection):
                raise ValueError("center dimension must match projection")
        elif self.shape == "halfspace":
            object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float))
            if np.linalg.norm(self.normal) == 0:
                raise ValueError("halfspace normal must be nonzero")
            if len(self.normal) != len(self.projection):
                raise ValueError("normal dimension must match projection")
        else:
            raise ValueError(f"unknown obstacle shape {self.shape!r}")


def signed_distance(obs: Obstacle, x: np.ndarray) -> float:
    """Evaluate h(x): negative inside the forbidden set, positive outside."""
    x = np.asarray(x, dtype=float)
    xp = x[..., list(obs.projection)]
    if obs.shape in ("circle", "sphere"):
        return np.linalg.norm(xp - obs.center, axis=-1) - obs.radius
    return xp @ obs.normal + obs.offset


def linearize_obstacle(obs: Obstacle, xbar: np.ndarray) -> tuple[np.ndarray, float]:
    """Half-plane (a, b) with a = dh/dx and b = h(xbar) - a'xbar.

    The returned coefficients live in the full state space (zero outside the
    obstacle's projected coordinates); the linearized forbidden region is
    {x : a'x + b <= 0}.
    """
    xbar = np.asarray(xbar, dtype=float)
    n = xbar.size
    a = np.zeros(n)
    proj = list(obs.projection)
    if obs.shape in ("circle", "sphere"):
        diff = xbar[proj] - obs.center
        dist = np.linalg.norm(diff)
        if dist < 1e-9:
            raise DegenerateGradientError(
                "nominal point coincides with obstacle center; gradient undefined"
            )
        a[proj] = diff / dist
    else:
        a[proj] = obs.normal
    b = float(signed_distance(obs, xbar) - a @ xbar)
    return a, b


# ---------------------------------------------------------------------------
# Gaussian quantile
# ---------------------------------------------------------------------------

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


def _norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / _SQRT2)


def _norm_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / _SQRT2PI


def gaussian_quantile(p: float) -> float:
    """Inverse standard-normal CDF via rational approximation plus Newton polish."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile argument must lie in (0, 1), got {p}")
    # Acklam's rational approximation, then two Newton corrections on the CDF.
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    p_low, p_high = 0.02425, 1 - 0.02425
    if p < p_low:
        q = math.sqrt(-2 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    elif p <= p_high:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log(1 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    for _ in range(2):
        err = _norm_cdf(x) - p
        x -= err / max(_norm_pdf(x), 1e-300)
    return x


# ---------------------------------------------------------------------------
# Tightened constraints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TightenedHalfplane:
    """Half-plane whose violation event {a'x + b >= 0} has budget delta_prime."""

    a: np.ndarray
    b: float
    delta_prime: float

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        if np.linalg.norm(self.a) == 0:
            raise ValueError("half-plane coefficient a must be nonzero")
        if not 0.0 < self.delta_prime < 0.5:
            raise ValueError("delta_prime must lie in (0, 0.5)")


@dataclass
class LinearizedChanceConstraint:
    """Affine surrogate gbar(mu, Sigma) = c + w'mu + trace(G Sigma')."""

    c: float
    w: np.ndarray
    G: np.ndarray

    def value(self, mu: np.ndarray, Sigma: np.ndarray) -> float:
        return float(self.c + self.w @ mu + np.sum(self.G * Sigma))


@dataclass(frozen=True)
class RiskBudget:
    """Joint risk delta split uniformly over N constraints by the union bound."""

    delta: float
    n_constraints: int

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.n_constraints < 1:
            raise ValueError("need at least one constraint")
        if self.delta_prime >= 0.5:
            raise ValueError(
                "per-constraint risk delta/N must be below 0.5 for the tightening "
                "to be concave in Sigma"
            )

    @property
    def delta_prime(self) -> float:
        return self.delta / self.n_constraints

    @classmethod
    def from_per_constraint(cls, delta_prime: float, n_constraints: int) -> "RiskBudget":
        return cls(delta=delta_prime * n_constraints, n_constraints=n_constraints)


def tightened_constraint_value(hp: TightenedHalfplane, mu: np.ndarray, Sigma: np.ndarray) -> float:
    """g(mu, Sigma) = a'mu + b + quantile(1 - delta') sqrt(a' Sigma a)."""
    quad = float(hp.a @ Sigma @ hp.a)
    if quad < -1e-12:
        raise PSDViolationError(f"a' Sigma a = {quad:.3e} is negative beyond tolerance")
    quad = max(quad, 0.0)
    return float(hp.a @ mu + hp.b + gaussian_quantile(1.0 - hp.delta_prime) * math.sqrt(quad))


def linearize_tightened(
    hp: TightenedHalfplane, mubar: np.ndarray, Sigmabar: np.ndarray
) -> LinearizedChanceConstraint:
    """Tangent of g at (mubar, Sigmabar); overestimates g since g is concave in Sigma.

    When a' Sigmabar a is numerically zero the Sigma gradient is undefined and
    the constraint falls back to the plain half-plane on the mean (G = 0).
    """
    mubar = np.asarray(mubar, dtype=float)
    Sigmabar = np.asarray(Sigmabar, dtype=float)
    quant = gaussian_quantile(1.0 - hp.delta_prime)
    quad = float(hp.a @ Sigmabar @ hp.a)
    w = hp.a.copy()
    if quad <= 1e-12:
        G = np.zeros((mubar.size, mubar.size))
    else:
        G = quant * np.outer(hp.a, hp.a) / (2.0 * math.sqrt(quad))
        G = 0.5 * (G + G.T)
    g0 = tightened_constraint_value(hp, mubar, Sigmabar)
    c = g0 - float(w @ mubar) - float(np.sum(G * Sigmabar))
    return LinearizedChanceConstraint(c=c, w=w, G=G)


def build_constraint_sets(
    obstacles: list[Obstacle],
    budget: RiskBudget,
    traj,
) -> list[list[LinearizedChanceConstraint]]:
    """Linearized chance constraints per time step along a nominal trajectory.

    Constraints are imposed at the interior steps t = 1 .. t_f - 1 only; the
    endpoints are pinned by the boundary conditions.  Entry t of the returned
    list holds the constraints active at step t (empty at the endpoints).
    """
    if budget.n_constraints != len(obstacles):
        raise ValueError(
            f"risk budget covers {budget.n_constraints} constraints, "
            f"got {len(obstacles)} obstacles"
        )
    t_f = traj.horizon
    sets: list[list[LinearizedChanceConstraint]] = [[] for _ in range(t_f + 1)]
    for t in range(1, t_f):
        for i, obs in enumerate(obstacles):
            try:
                a, b = linearize_obstacle(obs, traj.xbar[t])
                hp = TightenedHalfplane(a=-a, b=-b, delta_prime=budget.delta_prime)
                sets[t].append(linearize_tightened(hp, traj.xbar[t], traj.Sigma[t]))
            except (DegenerateGradientError, PSDViolationError) as exc:
                raise type(exc)(f"obstacle {i} at step {t}: {exc}") from exc
    return sets


def max_violation(
    sets: list[list[LinearizedChanceConstraint]],
    mu_seq: np.ndarray,
    Sigma_seq: np.ndarray,
) -> float:
    """Largest positive gbar over all constraints; 0 when all are satisfied."""
    worst = 0.0
    for t, group in enumerate(sets):
        for con in group:
            worst = max(worst, con.value(mu_seq[t], Sigma_seq[t]))
    return worst
