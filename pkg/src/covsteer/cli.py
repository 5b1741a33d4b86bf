"""Command-line interface: solve, eval, study, baseline.

Exit codes are a stable contract: 0 converged, 2 infeasible, 3 numeric
failure, 4 bad input.  Every command writes its reports as JSON/CSV into the
output directory and, unless --no-plot is given, renders the matching figures
next to them.  COVSTEER_THREADS caps the worker count.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import io as cio
from .eval import compare, evaluate
from .models import DivergenceError
from .parallel import parallel_map
from .solver import SolveReport, initial_guess, outer_solve

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_NUMERIC = 3
EXIT_BAD_INPUT = 4

_STATUS_EXIT = {"converged": EXIT_OK, "infeasible": EXIT_INFEASIBLE,
                "max_iters": EXIT_NUMERIC, "numeric_error": EXIT_NUMERIC}


def _fail(msg: str, code: int):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _load(scenario_path, lax):
    try:
        return cio.load_scenario(scenario_path, strict=not lax)
    except (cio.ScenarioError, OSError) as exc:
        _fail(str(exc), EXIT_BAD_INPUT)


def _safety_target(spec: cio.ScenarioSpec, scenario) -> float | None:
    if scenario.budget is None:
        return None
    convention = spec.data["risk"]["convention"]
    if convention == "joint":
        return 1.0 - scenario.budget.delta
    return 1.0 - scenario.budget.delta_prime


def _solve_pipeline(spec, scenario, cfg, out, method, init_traj, plot):
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        if init_traj is not None:
            provided = cio.read_trajectory_artifact(init_traj)
            tau0 = initial_guess(
                scenario, mode="provided",
                provided=_traj_from_artifact(provided, scenario),
            )
        else:
            tau0 = initial_guess(scenario)
        report = outer_solve(scenario, cfg, tau0, method=method)
    except (DivergenceError, FloatingPointError) as exc:
        _fail(f"numeric failure during solve: {exc}", EXIT_NUMERIC)
    except ValueError as exc:
        _fail(str(exc), EXIT_BAD_INPUT)

    shash = spec.scenario_hash()
    cio.write_json(cio.solve_report_dict(report, shash, cfg), out / "solve_report.json")
    cio.write_json({"wall_time_s": report.wall_time,
                    "total_s": time.perf_counter() - t0}, out / "timing.json")
    cio.write_residuals_csv(out / "residuals.csv", report)
    if report.law is not None:
        cio.write_trajectory_artifact(
            out / "trajectory.csv", report.mean_traj, report.cov_traj, report.law,
            meta={"format_version": cio.FORMAT_VERSION, "scenario_hash": shash,
                  "name": spec.name, "model": spec.data["model"],
                  "dt": spec.data["dt"], "t_f": spec.data["t_f"]},
        )
    if plot:
        from . import plots

        plots.plot_residuals(report, out / "residuals.png")
        if report.mean_traj is not None:
            plots.plot_solution(scenario, report, out / "trajectory.png")
    click.echo(f"{spec.name}: {report.status} "
               f"(objective {report.objective:.6g}, "
               f"constraint residual {report.constraint_residuals:.3g})")
    return report


def _traj_from_artifact(artifact, scenario):
    from .models import NominalTrajectory

    mu, cov, law = artifact["mean_traj"], artifact["cov_traj"], artifact["law"]
    ubar = law.v + np.einsum("tij,tj->ti", law.K, mu[:-1] - law.ref_mean)
    return NominalTrajectory(xbar=mu, ubar=ubar, Sigma=cov)


_COMMON = [
    click.option("--scenario", "scenario_path", required=True,
                 type=click.Path(exists=True, dir_okay=False), help="Scenario JSON file."),
    click.option("--out", "out_dir", default="out", type=click.Path(file_okay=False),
                 help="Output directory."),
    click.option("--seed", type=int, default=None, help="Override the scenario seed."),
    click.option("--inner-iters", type=int, default=None),
    click.option("--outer-iters", type=int, default=None),
    click.option("--rho", type=float, default=None),
    click.option("--averaging", type=click.Choice(["paper", "weighted"]), default=None),
    click.option("--delta-convention", type=click.Choice(["joint", "per-constraint"]),
                 default=None, help="Reinterpret the scenario risk value."),
    click.option("--lax", is_flag=True, help="Warn on unknown scenario keys instead of failing."),
    click.option("--no-plot", is_flag=True, help="Skip figure rendering."),
]


def _with_common(fn):
    for option in reversed(_COMMON):
        fn = option(fn)
    return fn


def _overrides(kw):
    return {
        "seed": kw.get("seed"), "inner_iters": kw.get("inner_iters"),
        "outer_iters": kw.get("outer_iters"), "rho": kw.get("rho"),
        "averaging": kw.get("averaging"), "delta_convention": kw.get("delta_convention"),
    }


@click.group()
def main():
    """Chance-constrained covariance steering solver."""


@main.command()
@_with_common
@click.option("--baseline", "use_baseline", is_flag=True,
              help="Solve each local problem as a single SDP (ablation baseline).")
@click.option("--init-traj", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Warm-start trajectory artifact instead of the straight line.")
def solve(scenario_path, out_dir, lax, no_plot, use_baseline, init_traj, **kw):
    """Synthesize a steering controller for a scenario."""
    spec = _load(scenario_path, lax)
    try:
        scn, cfg = cio.build_scenario(spec, _overrides(kw))
    except (cio.ScenarioError, ValueError) as exc:
        _fail(str(exc), EXIT_BAD_INPUT)
    report = _solve_pipeline(spec, scn, cfg, Path(out_dir),
                             "baseline" if use_baseline else "admm", init_traj, not no_plot)
    sys.exit(_STATUS_EXIT.get(report.status, EXIT_NUMERIC))


@main.command()
@_with_common
@click.option("--init-traj", type=click.Path(exists=True, dir_okay=False), default=None)
def baseline(scenario_path, out_dir, lax, no_plot, init_traj, **kw):
    """Alias for solve --baseline."""
    spec = _load(scenario_path, lax)
    try:
        scn, cfg = cio.build_scenario(spec, _overrides(kw))
    except (cio.ScenarioError, ValueError) as exc:
        _fail(str(exc), EXIT_BAD_INPUT)
    report = _solve_pipeline(spec, scn, cfg, Path(out_dir), "baseline", init_traj, not no_plot)
    sys.exit(_STATUS_EXIT.get(report.status, EXIT_NUMERIC))


@main.command("eval")
@_with_common
@click.option("--law", "law_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Trajectory artifact holding the control law.")
@click.option("--trials", type=int, default=200, show_default=True)
def eval_cmd(scenario_path, out_dir, lax, no_plot, law_path, trials, **kw):
    """Monte-Carlo evaluation of a synthesized control law."""
    spec = _load(scenario_path, lax)
    try:
        scn, cfg = cio.build_scenario(spec, _overrides(kw))
        artifact = cio.read_trajectory_artifact(law_path)
    except (cio.ScenarioError, ValueError, OSError) as exc:
        _fail(str(exc), EXIT_BAD_INPUT)
    law = artifact["law"]
    if law is None or law.v.shape[1] != scn.model.control_dim \
            or law.ref_mean.shape[1] != scn.model.state_dim:
        _fail("control law dimensions do not match the scenario model", EXIT_INFEASIBLE)
    seed = kw.get("seed") if kw.get("seed") is not None else spec.seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    report = evaluate(scn, law, trials, seed, safety_target=_safety_target(spec, scn))
    summary = compare(report, None)
    cio.write_json(cio.mc_report_dict(report, summary, spec.scenario_hash()),
                   out / "eval_report.json")
    cio.write_json({"total_s": time.perf_counter() - t0}, out / "timing.json")
    cio.write_samples_csv(out / "samples.csv", report)
    if not no_plot:
        from . import plots

        plots.plot_samples(scn, report, None, out / "samples.png")
    click.echo(f"{spec.name}: safety {report.safety_prob:.4f}, "
               f"estimated cost {report.est_cost:.6g} over {trials} trials")
    sys.exit(EXIT_OK)


@main.command()
@_with_common
@click.option("--n-envs", type=int, default=10, show_default=True)
@click.option("--trials", type=int, default=200, show_default=True)
@click.option("--perturb", "perturb_json", default='{"center_std": 0.1, "radius_std": 0.0}',
              show_default=True, help="Perturbation document (JSON string or @file).")
def study(scenario_path, out_dir, lax, no_plot, n_envs, trials, perturb_json, **kw):
    """Randomized-environment study: perturb, solve, and evaluate n environments."""
    spec = _load(scenario_path, lax)
    try:
        if perturb_json.startswith("@"):
            perturbation = json.loads(Path(perturb_json[1:]).read_text())
        else:
            perturbation = json.loads(perturb_json)
    except (json.JSONDecodeError, OSError) as exc:
        _fail(f"bad perturbation document: {exc}", EXIT_BAD_INPUT)
    seed = kw.get("seed") if kw.get("seed") is not None else spec.seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run_env(env_index):
        env_spec = cio.perturb_scenario(spec, perturbation, seed, env_index)
        try:
            scn, cfg = cio.build_scenario(env_spec, _overrides(kw))
            tau0 = initial_guess(scn)
            t0 = time.perf_counter()
            report = outer_solve(scn, cfg, tau0)
            solve_s = time.perf_counter() - t0
            if report.law is None:
                return {"env": env_index, "status": report.status}
            mc = evaluate(scn, report.law, trials, seed,
                          optimizer_cost=report.objective,
                          safety_target=_safety_target(env_spec, scn))
            return {
                "env": env_index, "status": report.status,
                "optimizer_cost": report.objective, "estimated_cost": mc.est_cost,
                "safety_prob": mc.safety_prob, "solve_time_s": solve_s,
                "constraint_residuals": report.constraint_residuals,
            }
        except Exception as exc:  # noqa: BLE001 - study must survive env failures
            return {"env": env_index, "status": "error", "error": str(exc)}

    rows = parallel_map(run_env, list(range(n_envs)))
    ok = [r for r in rows if r.get("safety_prob") is not None]
    aggregate = {
        "format_version": cio.FORMAT_VERSION,
        "n_envs": n_envs,
        "n_solved": len(ok),
        "per_env": rows,
        "mean": {
            key: float(np.mean([r[key] for r in ok])) if ok else None
            for key in ("optimizer_cost", "estimated_cost", "safety_prob", "solve_time_s")
        },
    }
    cio.write_json(cio._jsonify(aggregate), out / "study_report.json")
    with open(out / "study.csv", "w") as fh:
        fh.write("env,status,optimizer_cost,estimated_cost,safety_prob,solve_time_s\n")
        for r in rows:
            fh.write(",".join(str(r.get(k, "")) for k in
                              ("env", "status", "optimizer_cost", "estimated_cost",
                               "safety_prob", "solve_time_s")) + "\n")
    click.echo(f"study: {len(ok)}/{n_envs} environments solved; "
               f"mean safety {aggregate['mean']['safety_prob']}")
    sys.exit(EXIT_OK if ok else EXIT_NUMERIC)


if __name__ == "__main__":
    main()
