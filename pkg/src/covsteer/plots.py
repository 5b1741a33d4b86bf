"""Figure rendering for solve and evaluation reports.

Only the CLI report path imports this module, keeping the solver core free of
plotting dependencies.  Figures are written to files (Agg backend); nothing
is shown interactively.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Circle, Ellipse

from .solver import SolveReport, SteeringScenario


def _position_axes(scenario: SteeringScenario) -> tuple[int, int]:
    """Pick the two plotted coordinates: the first obstacle projection if any."""
    for obs in scenario.obstacles:
        if len(obs.projection) >= 2:
            return obs.projection[0], obs.projection[1]
    return 0, 1


def _draw_obstacles(ax, scenario: SteeringScenario, ix: int, iy: int):
    for obs in scenario.obstacles:
        if obs.shape in ("circle", "sphere") and set((ix, iy)) <= set(obs.projection):
            px = obs.projection.index(ix)
            py = obs.projection.index(iy)
            ax.add_patch(Circle((obs.center[px], obs.center[py]), obs.radius,
                                facecolor="0.82", edgecolor="0.3", zorder=1))


def _cov_ellipse(ax, mean, cov2, n_std=2.0, **kwargs):
    w, V = np.linalg.eigh(cov2)
    w = np.clip(w, 0.0, None)
    angle = np.degrees(np.arctan2(V[1, -1], V[0, -1]))
    ax.add_patch(Ellipse(mean, 2 * n_std * np.sqrt(w[-1]), 2 * n_std * np.sqrt(w[0]),
                         angle=angle, **kwargs))


def plot_solution(scenario: SteeringScenario, report: SolveReport, path) -> None:
    """Mean trajectory with covariance ellipses over the obstacle map."""
    fig, ax = plt.subplots(figsize=(6.5, 5.5))
    ix, iy = _position_axes(scenario)
    _draw_obstacles(ax, scenario, ix, iy)
    if report.mean_traj is not None:
        mu = report.mean_traj
        for t in range(0, len(mu), max(len(mu) // 25, 1)):
            cov2 = report.cov_traj[t][np.ix_([ix, iy], [ix, iy])]
            _cov_ellipse(ax, (mu[t, ix], mu[t, iy]), cov2,
                         facecolor="tab:blue", alpha=0.15, edgecolor="tab:blue", zorder=2)
        ax.plot(mu[:, ix], mu[:, iy], "-o", color="tab:blue", ms=2.5, lw=1.2, zorder=3,
                label="mean trajectory")
    bnd = scenario.boundary
    ax.plot(*bnd.init.mean[[ix, iy]], "s", color="tab:green", label="start")
    ax.plot(*bnd.term.mean[[ix, iy]], "*", color="tab:red", ms=12, label="goal")
    ax.set_xlabel(f"state[{ix}]")
    ax.set_ylabel(f"state[{iy}]")
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8)
    ax.set_title(f"{scenario.name}: {report.status}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_residuals(report: SolveReport, path) -> None:
    """Primal/dual residuals and constraint violation across inner iterations."""
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    offset = 0
    for k, hist in enumerate(report.residual_history):
        if len(hist) == 0:
            continue
        xs = offset + np.arange(len(hist))
        ax.semilogy(xs, np.maximum(hist[:, 0], 1e-16), color="tab:blue",
                    label="primal" if k == 0 else None)
        ax.semilogy(xs, np.maximum(hist[:, 1], 1e-16), color="tab:orange",
                    label="dual" if k == 0 else None)
        ax.semilogy(xs, np.maximum(hist[:, 2], 1e-16), color="tab:red", ls="--",
                    label="violation" if k == 0 else None)
        offset += len(hist)
        ax.axvline(offset - 0.5, color="0.8", lw=0.8)
    ax.set_xlabel("inner iteration (outer boundaries marked)")
    ax.set_ylabel("residual")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_samples(scenario: SteeringScenario, mc_report, solve_report: SolveReport | None, path) -> None:
    """Sampled closed-loop paths (dashed) over the obstacle map and mean plan."""
    fig, ax = plt.subplots(figsize=(6.5, 5.5))
    ix, iy = _position_axes(scenario)
    _draw_obstacles(ax, scenario, ix, iy)
    for k in range(mc_report.sample_trajectories.shape[0]):
        traj = mc_report.sample_trajectories[k]
        color = "tab:red" if mc_report.unsafe_trials[k] else "0.55"
        ax.plot(traj[:, ix], traj[:, iy], "--", lw=0.7, color=color, zorder=2)
    if solve_report is not None and solve_report.mean_traj is not None:
        mu = solve_report.mean_traj
        ax.plot(mu[:, ix], mu[:, iy], "-", color="tab:blue", lw=1.6, zorder=3, label="mean plan")
        ax.legend(loc="best", fontsize=8)
    ax.set_xlabel(f"state[{ix}]")
    ax.set_ylabel(f"state[{iy}]")
    ax.set_aspect("equal")
    ax.set_title(
        f"{scenario.name}: safety {mc_report.safety_prob:.3f} over {mc_report.n_trials} trials"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
