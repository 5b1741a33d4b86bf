"""Scenario documents, trajectory artifacts, and report serialization.

Scenario files are JSON (schema v1) with a scalar-times-identity shorthand
for matrices ("0.1*I").  Trajectory artifacts are CSV with a commented
metadata header and 17-significant-digit floats, so a write/read round trip
is lossless.  Report JSON is written with sorted keys and no volatile fields
(timings live in a sibling file), so identical runs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import jsonschema

from .blocks import ControlPolytope
from .chance import Obstacle, RiskBudget
from .local import Boundary
from .models import ControlLaw, DynamicsModel, GaussianState, make_model
from .solver import SolveReport, SolverConfig, SteeringScenario

FORMAT_VERSION = 1


class ScenarioError(Exception):
    """Scenario document failed validation."""


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

_MATRIX = {
    "oneOf": [
        {"type": "string", "pattern": r"^([0-9.eE+-]+\*)?I$"},
        {"type": "number"},
        {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
    ]
}

_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["format_version", "model", "dt", "t_f", "boundary", "cost"],
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "name": {"type": "string"},
        "model": {"enum": ["double_integrator", "unicycle", "quadrotor"]},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "t_f": {"type": "integer", "minimum": 1},
        "boundary": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mu_ic", "sigma_ic", "mu_tc", "sigma_tc"],
            "properties": {
                "mu_ic": {"type": "array", "items": {"type": "number"}},
                "sigma_ic": _MATRIX,
                "mu_tc": {"type": "array", "items": {"type": "number"}},
                "sigma_tc": _MATRIX,
                "terminal_cov_mode": {"enum": ["inequality", "equality"]},
                "truncate_coords": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "truncate_sigmas": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "obstacles": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["shape", "projection"],
                "properties": {
                    "shape": {"enum": ["circle", "sphere", "halfspace"]},
                    "projection": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    "center": {"type": "array", "items": {"type": "number"}},
                    "radius": {"type": "number", "exclusiveMinimum": 0},
                    "normal": {"type": "array", "items": {"type": "number"}},
                    "offset": {"type": "number"},
                },
            },
        },
        "risk": {
            "type": "object",
            "additionalProperties": False,
            "required": ["value", "convention"],
            "properties": {
                "value": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "convention": {"enum": ["joint", "per_constraint"]},
            },
        },
        "cost": {
            "type": "object",
            "additionalProperties": False,
            "required": ["Q", "R"],
            "properties": {"Q": _MATRIX, "R": _MATRIX},
        },
        "diffusion": {
            "type": "object",
            "additionalProperties": False,
            "required": ["type"],
            "properties": {
                "type": {"enum": ["none", "scaled_identity", "input", "matrix"]},
                "scale": {"type": "number", "minimum": 0},
                "matrix": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
            },
        },
        "control_polytope": {
            "type": "object",
            "additionalProperties": False,
            "required": ["G", "b_max"],
            "properties": {
                "G": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                "b_max": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rho": {"type": "number", "exclusiveMinimum": 0},
                "alpha_mu": {"type": "number", "minimum": 0},
                "alpha_sigma": {"type": "number", "minimum": 0},
                "inner_iters": {"type": "integer", "minimum": 1},
                "outer_iters": {"type": "integer", "minimum": 1},
                "inner_tol": {"type": ["number", "null"]},
                "outer_tol": {"type": "number", "exclusiveMinimum": 0},
                "averaging_mode": {"enum": ["weighted", "paper_exact"]},
                "forward_pass_mode": {"enum": ["mean_propagation", "sampled"]},
                "feedback_forward_pass": {"type": "boolean"},
                "warm_start_duals": {"type": "boolean"},
                "patience": {"type": "integer", "minimum": 1},
                "conic_tol": {"type": "number", "exclusiveMinimum": 0},
                "conic_max_iters": {"type": "integer", "minimum": 1},
                "conic_prox_max_iters": {"type": "integer", "minimum": 1},
                "adaptive_conic_tol": {"type": "boolean"},
                "final_polish": {"type": "boolean"},
                "n_rollout_samples": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
    },
}

_MODEL_DIMS = {"double_integrator": (4, 2), "unicycle": (3, 2), "quadrotor": (12, 4)}


@dataclass
class ScenarioSpec:
    """Validated scenario document plus its canonical hash."""

    data: dict
    path: str | None = None

    @property
    def name(self) -> str:
        return self.data.get("name", "scenario")

    @property
    def seed(self) -> int:
        return int(self.data.get("seed", 0))

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def scenario_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def parse_matrix(spec, dim: int, what: str = "matrix") -> np.ndarray:
    """Parse "0.1*I" / scalar / nested-list matrix shorthand."""
    if isinstance(spec, str):
        text = spec.strip()
        if text == "I":
            return np.eye(dim)
        if text.endswith("*I"):
            return float(text[:-2]) * np.eye(dim)
        raise ScenarioError(f"{what}: unrecognized matrix shorthand {spec!r}")
    if isinstance(spec, (int, float)):
        return float(spec) * np.eye(dim)
    M = np.asarray(spec, dtype=float)
    if M.shape != (dim, dim):
        raise ScenarioError(f"{what}: expected shape ({dim}, {dim}), got {M.shape}")
    return M


def _strip_unknown(data, schema, path="$"):
    """Remove keys not in the schema, warning per removal (lax mode)."""
    if not isinstance(data, dict) or schema.get("type") != "object":
        return data
    props = schema.get("properties", {})
    for key in list(data):
        if key not in props:
            warnings.warn(f"ignoring unknown key {path}.{key}")
            del data[key]
        else:
            sub = props[key]
            if sub.get("type") == "object":
                _strip_unknown(data[key], sub, f"{path}.{key}")
            elif sub.get("type") == "array" and isinstance(data[key], list):
                item_schema = sub.get("items", {})
                for i, item in enumerate(data[key]):
                    _strip_unknown(item, item_schema, f"{path}.{key}[{i}]")
    return data


def load_scenario(path, strict: bool = True) -> ScenarioSpec:
    """Load and validate a scenario JSON document.

    Unknown keys are rejected in strict mode and dropped with a warning
    otherwise.  Validation errors carry the JSON pointer path of the
    offending element.
    """
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
    return validate_scenario(data, strict=strict, path=str(path))


def validate_scenario(data: dict, strict: bool = True, path: str | None = None) -> ScenarioSpec:
    if not strict:
        data = _strip_unknown(dict(data), _SCHEMA)
    try:
        jsonschema.validate(data, _SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ScenarioError(f"{exc.json_path}: {exc.message}") from exc
    n, m = _MODEL_DIMS[data["model"]]
    bnd = data["boundary"]
    for key in ("mu_ic", "mu_tc"):
        if len(bnd[key]) != n:
            raise ScenarioError(f"$.boundary.{key}: expected length {n}, got {len(bnd[key])}")
    for i, obs in enumerate(data.get("obstacles", [])):
        if any(c >= n for c in obs["projection"]):
            raise ScenarioError(f"$.obstacles[{i}].projection: coordinate out of range for n={n}")
        if obs["shape"] in ("circle", "sphere"):
            if "center" not in obs or "radius" not in obs:
                raise ScenarioError(f"$.obstacles[{i}]: circle/sphere needs center and radius")
            if len(obs["center"]) != len(obs["projection"]):
                raise ScenarioError(f"$.obstacles[{i}].center: length must match projection")
        else:
            if "normal" not in obs or "offset" not in obs:
                raise ScenarioError(f"$.obstacles[{i}]: halfspace needs normal and offset")
    if data.get("obstacles") and "risk" not in data:
        raise ScenarioError("$.risk: required when obstacles are present")
    if "control_polytope" in data:
        for j, row in enumerate(data["control_polytope"]["G"]):
            if len(row) != m:
                raise ScenarioError(f"$.control_polytope.G[{j}]: expected {m} columns")
    return ScenarioSpec(data=data, path=path)


def save_scenario(spec: ScenarioSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(spec.data, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Building runtime objects from a spec
# ---------------------------------------------------------------------------

def _make_diffusion(data: dict, model: DynamicsModel):
    spec = data.get("diffusion", {"type": "none"})
    n = model.state_dim
    kind = spec["type"]
    if kind == "none":
        return None
    if kind == "scaled_identity":
        D = spec.get("scale", 1.0) * np.eye(n)
    elif kind == "matrix":
        D = np.asarray(spec["matrix"], dtype=float)
        if D.shape[0] != n:
            raise ScenarioError(f"$.diffusion.matrix: expected {n} rows, got {D.shape[0]}")
    else:  # input
        scale = spec.get("scale", 1.0)
        return lambda x: scale * model.input_matrix(x)
    return lambda x, _D=D: np.broadcast_to(_D, np.shape(x)[:-1] + _D.shape)


def build_scenario(
    spec: ScenarioSpec,
    overrides: dict | None = None,
) -> tuple[SteeringScenario, SolverConfig]:
    """Instantiate the model, boundary, obstacles, and solver configuration."""
    data = spec.data
    overrides = overrides or {}
    n, m = _MODEL_DIMS[data["model"]]
    model = make_model(data["model"], float(data["dt"]))
    diff = _make_diffusion(data, model)
    if diff is not None:
        model.diffusion = diff

    bnd_data = data["boundary"]
    boundary = Boundary(
        init=GaussianState(np.asarray(bnd_data["mu_ic"], dtype=float),
                           parse_matrix(bnd_data["sigma_ic"], n, "$.boundary.sigma_ic")),
        term=GaussianState(np.asarray(bnd_data["mu_tc"], dtype=float),
                           parse_matrix(bnd_data["sigma_tc"], n, "$.boundary.sigma_tc")),
        terminal_cov_mode=bnd_data.get("terminal_cov_mode", "inequality"),
    )

    obstacles = []
    for obs in data.get("obstacles", []):
        if obs["shape"] in ("circle", "sphere"):
            obstacles.append(Obstacle(
                shape=obs["shape"], projection=tuple(obs["projection"]),
                center=np.asarray(obs["center"], dtype=float), radius=float(obs["radius"]),
            ))
        else:
            obstacles.append(Obstacle(
                shape="halfspace", projection=tuple(obs["projection"]),
                normal=np.asarray(obs["normal"], dtype=float), offset=float(obs["offset"]),
            ))

    budget = None
    if obstacles:
        risk = dict(data["risk"])
        if "delta_convention" in overrides and overrides["delta_convention"] is not None:
            risk["convention"] = {"joint": "joint", "per-constraint": "per_constraint",
                                  "per_constraint": "per_constraint"}[overrides["delta_convention"]]
        if risk["convention"] == "joint":
            budget = RiskBudget(delta=float(risk["value"]), n_constraints=len(obstacles))
        else:
            budget = RiskBudget.from_per_constraint(float(risk["value"]), len(obstacles))

    polytope = None
    if "control_polytope" in data:
        polytope = ControlPolytope(
            Gmat=np.asarray(data["control_polytope"]["G"], dtype=float),
            b_max=np.asarray(data["control_polytope"]["b_max"], dtype=float),
        )

    scenario = SteeringScenario(
        name=spec.name,
        model=model,
        t_f=int(data["t_f"]),
        cost_model=parse_matrix(data["cost"]["Q"], n, "$.cost.Q"),
        R=parse_matrix(data["cost"]["R"], m, "$.cost.R"),
        boundary=boundary,
        obstacles=obstacles,
        budget=budget,
        polytope=polytope,
        truncate_coords=tuple(bnd_data.get("truncate_coords", [])),
        truncate_sigmas=float(bnd_data.get("truncate_sigmas", 3.0)),
    )

    cfg_kwargs = dict(data.get("solver", {}))
    cfg_kwargs.setdefault("seed", spec.seed)
    for key in ("rho", "inner_iters", "outer_iters", "seed"):
        if overrides.get(key) is not None:
            cfg_kwargs[key] = overrides[key]
    if overrides.get("averaging") is not None:
        cfg_kwargs["averaging_mode"] = {"paper": "paper_exact", "weighted": "weighted"}[
            overrides["averaging"]
        ]
    return scenario, SolverConfig(**cfg_kwargs)


# ---------------------------------------------------------------------------
# Trajectory artifact CSV
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_trajectory_artifact(
    path,
    mean_traj: np.ndarray,
    cov_traj: np.ndarray,
    law: ControlLaw | None,
    meta: dict,
) -> None:
    """Write states, covariances, and control parameters as delimited text."""
    t_f1, n = mean_traj.shape
    m = law.v.shape[1] if law is not None else 0
    header = ["t"]
    header += [f"mu_{i}" for i in range(n)]
    header += [f"Sigma_{i}_{j}" for i in range(n) for j in range(n)]
    header += [f"v_{i}" for i in range(m)]
    header += [f"K_{i}_{j}" for i in range(m) for j in range(n)]
    with open(path, "w", newline="") as fh:
        fh.write(f"# covsteer-trajectory format_version={FORMAT_VERSION}\n")
        fh.write("# meta=" + json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n")
        fh.write(",".join(header) + "\n")
        for t in range(t_f1):
            row = [str(t)]
            row += [_fmt(v) for v in mean_traj[t]]
            row += [_fmt(v) for v in cov_traj[t].ravel()]
            if law is not None and t < t_f1 - 1:
                row += [_fmt(v) for v in law.v[t]]
                row += [_fmt(v) for v in law.K[t].ravel()]
            else:
                row += [""] * (m + m * n)
            fh.write(",".join(row) + "\n")


def read_trajectory_artifact(path) -> dict:
    """Read a trajectory artifact back into arrays; inverse of the writer."""
    meta = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# meta="):
            meta = json.loads(line[len("# meta="):])
        elif line.startswith("#") or not line.strip():
            continue
        else:
            body.append(line)
    header = body[0].split(",")
    n = sum(1 for h in header if h.startswith("mu_"))
    m = sum(1 for h in header if h.startswith("v_"))
    rows = [line.split(",") for line in body[1:]]
    t_f = len(rows) - 1
    mean_traj = np.empty((t_f + 1, n))
    cov_traj = np.empty((t_f + 1, n, n))
    v = np.empty((t_f, m))
    K = np.empty((t_f, m, n))
    for t, row in enumerate(rows):
        vals = row[1:]
        mean_traj[t] = [float(x) for x in vals[:n]]
        cov_traj[t] = np.array([float(x) for x in vals[n : n + n * n]]).reshape(n, n)
        if t < t_f and m:
            off = n + n * n
            v[t] = [float(x) for x in vals[off : off + m]]
            K[t] = np.array([float(x) for x in vals[off + m : off + m + m * n]]).reshape(m, n)
    law = ControlLaw(v=v, K=K, ref_mean=mean_traj[:-1].copy()) if m else None
    return {"mean_traj": mean_traj, "cov_traj": cov_traj, "law": law, "meta": meta}


# ---------------------------------------------------------------------------
# Report JSON
# ---------------------------------------------------------------------------

def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonify(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else repr(x)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def solve_report_dict(report: SolveReport, scenario_hash: str, cfg: SolverConfig) -> dict:
    """Deterministic JSON payload for a solve; timings are excluded on purpose."""
    from dataclasses import asdict

    payload = {
        "format_version": FORMAT_VERSION,
        "scenario_hash": scenario_hash,
        "status": report.status,
        "objective": report.objective,
        "constraint_residuals": report.constraint_residuals,
        "trust_region_history": report.trust_region_history,
        "residual_history": [h.tolist() for h in report.residual_history],
        "config": asdict(cfg),
        "diagnostics": report.diagnostics,
        "mean_traj": report.mean_traj,
        "cov_traj": report.cov_traj,
        "law": None if report.law is None else {
            "v": report.law.v, "K": report.law.K, "ref_mean": report.law.ref_mean,
        },
    }
    return _jsonify(payload)


def mc_report_dict(report, comparison: dict, scenario_hash: str) -> dict:
    return _jsonify({
        "format_version": FORMAT_VERSION,
        "scenario_hash": scenario_hash,
        "n_trials": report.n_trials,
        "seed": report.seed,
        "safety_prob": report.safety_prob,
        "est_cost": report.est_cost,
        "optimizer_cost": report.optimizer_cost,
        "safety_target": report.safety_target,
        "unsafe_trial_indices": np.nonzero(report.unsafe_trials)[0],
        "failed_trial_indices": np.nonzero(report.failed_trials)[0],
        "comparison": comparison,
    })


def write_json(payload: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_samples_csv(path, report) -> None:
    """Sampled closed-loop trajectories in long form for external plotting."""
    samples = report.sample_trajectories
    kept, steps, n = samples.shape
    with open(path, "w", newline="") as fh:
        fh.write(f"# covsteer-samples format_version={FORMAT_VERSION}\n")
        fh.write("trial,t," + ",".join(f"x_{i}" for i in range(n)) + ",unsafe\n")
        for k in range(kept):
            for t in range(steps):
                row = [str(k), str(t)]
                row += [_fmt(v) for v in samples[k, t]]
                row.append(str(int(report.unsafe_trials[k])))
                fh.write(",".join(row) + "\n")


def write_residuals_csv(path, report: SolveReport) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# covsteer-residuals format_version={FORMAT_VERSION}\n")
        fh.write("outer_iter,inner_iter,primal,dual,violation\n")
        for k, hist in enumerate(report.residual_history):
            for i, (p, d, v) in enumerate(hist):
                fh.write(f"{k},{i},{_fmt(p)},{_fmt(d)},{_fmt(v)}\n")


# ---------------------------------------------------------------------------
# Randomized-environment studies
# ---------------------------------------------------------------------------

def perturb_scenario(spec: ScenarioSpec, perturbation: dict, seed: int, env_index: int) -> ScenarioSpec:
    """Perturb obstacle geometry with Gaussian noise from a per-env stream.

    The perturbation document is explicit input: center_std (per coordinate)
    and radius_std.  Radii are clipped below at 1e-3.  env 0 with zero stds
    reproduces the base scenario exactly.
    """
    center_std = float(perturbation.get("center_std", 0.0))
    radius_std = float(perturbation.get("radius_std", 0.0))
    data = json.loads(json.dumps(spec.data))  # deep copy
    gen = np.random.Generator(np.random.Philox(counter=[0, 0, 0, 3], key=[seed, env_index]))
    for obs in data.get("obstacles", []):
        if obs["shape"] in ("circle", "sphere"):
            center = np.asarray(obs["center"], dtype=float)
            center = center + center_std * gen.standard_normal(center.shape)
            radius = max(float(obs["radius"]) + radius_std * gen.standard_normal(), 1e-3)
            obs["center"] = [float(c) for c in center]
            obs["radius"] = radius
    name = data.get("name", "scenario")
    data["name"] = f"{name}_env{env_index}"
    return validate_scenario(data)
