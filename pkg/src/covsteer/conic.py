"""First-order conic solver for standard-form problems over products of cones.

Solves
    minimize    c'x
    subject to  A x + s = b,    s in K,
where K is an ordered product of zero, nonnegative, second-order, and
positive-semidefinite cones.  The algorithm embeds the primal-dual pair in a
homogeneous self-dual system and applies operator splitting: each iteration
alternates one sparse linear solve (factorized once) with projections onto the
cone product.  Infeasibility and unboundedness certificates fall out of the
embedding.

PSD blocks are stored in scaled symmetric vectorization (off-diagonals times
sqrt(2)) so the Frobenius inner product of matrices equals the dot product of
their vectorizations and cone projections stay isometric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class ConicError(Exception):
    """Numeric failure inside the conic solver."""


# ---------------------------------------------------------------------------
# Symmetric vectorization
# ---------------------------------------------------------------------------

_TRIL_CACHE: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _tril(k: int):
    """Cached lower-triangle indices and sqrt(2) scale vector for side k."""
    if k not in _TRIL_CACHE:
        rows, cols = np.tril_indices(k)
        scale = np.where(rows == cols, 1.0, np.sqrt(2.0))
        _TRIL_CACHE[k] = (rows, cols, scale)
    return _TRIL_CACHE[k]


def svec_dim(k: int) -> int:
    """Length of the scaled vectorization of a k x k symmetric matrix."""
    return k * (k + 1) // 2


def svec(M: np.ndarray) -> np.ndarray:
    """Scaled symmetric vectorization; isometric for the Frobenius norm."""
    k = M.shape[-1]
    rows, cols, scale = _tril(k)
    return M[..., rows, cols] * scale


def smat(x: np.ndarray, k: int | None = None) -> np.ndarray:
    """Inverse of :func:`svec`; accepts batched input with trailing svec axis."""
    if k is None:
        k = int(round((np.sqrt(8 * x.shape[-1] + 1) - 1) / 2))
    rows, cols, scale = _tril(k)
    M = np.zeros(x.shape[:-1] + (k, k))
    vals = x / scale
    M[..., rows, cols] = vals
    M[..., cols, rows] = vals
    return M


# ---------------------------------------------------------------------------
# Cone projections
# ---------------------------------------------------------------------------

def project_psd(M: np.ndarray) -> np.ndarray:
    """Frobenius-nearest PSD matrix: clamp negative eigenvalues to zero."""
    sym = 0.5 * (M + np.swapaxes(M, -1, -2))
    try:
        w, V = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - pathological input
        raise ConicError(f"eigendecomposition failed in PSD projection: {exc}") from exc
    w = np.clip(w, 0.0, None)
    out = (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def project_soc(v: np.ndarray) -> np.ndarray:
    """Project onto the second-order cone {(t, x) : ||x||_2 <= t}."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size < 2:
        raise ValueError("second-order cone point must be a vector (t, x) with dim >= 2")
    t, x = v[0], v[1:]
    nx = np.linalg.norm(x)
    if nx <= t:
        return v.copy()
    if nx <= -t:
        return np.zeros_like(v)
    alpha = 0.5 * (nx + t)
    out = np.empty_like(v)
    out[0] = alpha
    out[1:] = alpha * x / nx
    return out


def _project_soc_batch(V: np.ndarray) -> np.ndarray:
    """Vectorized SOC projection over rows of V (each row one cone point)."""
    t = V[:, 0]
    x = V[:, 1:]
    nx = np.linalg.norm(x, axis=1)
    out = V.copy()
    inside = nx <= t
    polar = (~inside) & (nx <= -t)
    boundary = ~(inside | polar)
    out[polar] = 0.0
    if np.any(boundary):
        alpha = 0.5 * (nx[boundary] + t[boundary])
        out[boundary, 0] = alpha
        denom = np.where(nx[boundary] > 0, nx[boundary], 1.0)
        out[boundary, 1:] = x[boundary] * (alpha / denom)[:, None]
    return out


# ---------------------------------------------------------------------------
# Problem data
# ---------------------------------------------------------------------------

_CONE_KINDS = ("zero", "nonneg", "soc", "psd")


@dataclass(frozen=True)
class Cone:
    """One cone block: kind in {zero, nonneg, soc, psd}; for psd, dim is the side."""

    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in _CONE_KINDS:
            raise ValueError(f"unknown cone kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("cone dim must be positive")
        if self.kind == "soc" and self.dim < 2:
            raise ValueError("soc cone needs dim >= 2")

    @property
    def slack_dim(self) -> int:
        return svec_dim(self.dim) if self.kind == "psd" else self.dim


@dataclass
class ConeProgram:
    """Standard-form conic problem: min c'x subject to Ax + s = b, s in cones."""

    c: np.ndarray
    A: sp.spmatrix
    b: np.ndarray
    cones: list[Cone]

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.A = sp.csc_matrix(self.A)
        m, n = self.A.shape
        if self.c.size != n:
            raise ValueError(f"c has length {self.c.size}, expected {n}")
        if self.b.size != m:
            raise ValueError(f"b has length {self.b.size}, expected {m}")
        total = sum(cone.slack_dim for cone in self.cones)
        if total != m:
            raise ValueError(f"cone dims sum to {total}, expected slack dimension {m}")

    @property
    def num_vars(self) -> int:
        return self.A.shape[1]

    @property
    def num_constraints(self) -> int:
        return self.A.shape[0]


@dataclass
class ConeSolution:
    """Solver output: primal/dual iterates, status, and final residuals."""

    primal: np.ndarray
    dual: np.ndarray
    slack: np.ndarray
    status: str
    residuals: tuple[float, float, float]
    iterations: int
    objective: float

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


# ---------------------------------------------------------------------------
# Cone bookkeeping for batched projections
# ---------------------------------------------------------------------------

class _ConeIndex:
    """Precomputed index arrays grouping equal-size cone blocks for batching."""

    def __init__(self, cones: list[Cone]):
        zero_idx, nonneg_idx = [], []
        soc_groups: dict[int, list[np.ndarray]] = {}
        psd_groups: dict[int, list[np.ndarray]] = {}
        offset = 0
        self.row_group = np.empty(sum(c.slack_dim for c in cones), dtype=np.int64)
        gid = 0
        for cone in cones:
            d = cone.slack_dim
            idx = np.arange(offset, offset + d)
            if cone.kind == "zero":
                zero_idx.append(idx)
                self.row_group[idx] = gid + np.arange(d)
                gid += d
            elif cone.kind == "nonneg":
                nonneg_idx.append(idx)
                self.row_group[idx] = gid + np.arange(d)
                gid += d
            elif cone.kind == "soc":
                soc_groups.setdefault(cone.dim, []).append(idx)
                self.row_group[idx] = gid
                gid += 1
            else:
                psd_groups.setdefault(cone.dim, []).append(idx)
                self.row_group[idx] = gid
                gid += 1
            offset += d
        self.n_groups = gid
        self.zero_idx = np.concatenate(zero_idx) if zero_idx else np.empty(0, dtype=int)
        self.nonneg_idx = (
            np.concatenate(nonneg_idx) if nonneg_idx else np.empty(0, dtype=int)
        )
        self.soc_groups = {d: np.vstack(v) for d, v in soc_groups.items()}
        self.psd_groups = {k: np.vstack(v) for k, v in psd_groups.items()}

    def project_dual(self, y: np.ndarray) -> np.ndarray:
        """Project onto the dual cone K*: zero rows free, the rest self-dual."""
        out = y.copy()
        if self.nonneg_idx.size:
            out[self.nonneg_idx] = np.clip(out[self.nonneg_idx], 0.0, None)
        for idx in self.soc_groups.values():
            out[idx] = _project_soc_batch(out[idx])
        for k, idx in self.psd_groups.items():
            mats = smat(out[idx], k)
            w, V = np.linalg.eigh(mats)
            np.clip(w, 0.0, None, out=w)
            proj = (V * w[:, None, :]) @ np.swapaxes(V, -1, -2)
            out[idx] = svec(proj)
        return out

    def max_cone_violation(self, s: np.ndarray) -> float:
        """How far s is from K (max over blocks); zero blocks measured as |s|."""
        viol = 0.0
        if self.zero_idx.size:
            viol = max(viol, float(np.max(np.abs(s[self.zero_idx]))))
        if self.nonneg_idx.size:
            viol = max(viol, float(max(0.0, -np.min(s[self.nonneg_idx]))))
        for idx in self.soc_groups.values():
            t = s[idx][:, 0]
            nx = np.linalg.norm(s[idx][:, 1:], axis=1)
            viol = max(viol, float(np.max(np.clip(nx - t, 0.0, None), initial=0.0)))
        for k, idx in self.psd_groups.items():
            w = np.linalg.eigvalsh(smat(s[idx], k))
            viol = max(viol, float(max(0.0, -np.min(w))))
        return viol


# ---------------------------------------------------------------------------
# Workspace: equilibration, factorization, iteration
# ---------------------------------------------------------------------------

class ConicWorkspace:
    """Reusable solver state for one equality operator A.

    The quasi-definite system [[I, A'], [A, -I]] is factorized once at
    construction and reused across iterations and across repeated solves.  The
    objective vector may be swapped with :meth:`set_objective` (the structure
    and factorization are unaffected), which is how proximal subproblems with
    iteration-varying linear terms reuse one workspace.

    Instances are not thread safe; run concurrent solves on separate instances.
    """

    def __init__(
        self,
        prog: ConeProgram,
        tol: float = 1e-7,
        max_iters: int = 50_000,
        alpha: float = 1.5,
        check_every: int = 10,
        ruiz_iters: int = 10,
        eps_infeas: float = 1e-4,
        aa_memory: int = 0,
    ):
        self.tol = float(tol)
        self.eps_infeas = float(eps_infeas)
        self.aa_memory = int(aa_memory)
        self.max_iters = int(max_iters)
        self.alpha = float(alpha)
        self.check_every = int(check_every)
        self.cones = list(prog.cones)
        self.index = _ConeIndex(self.cones)
        self.m, self.n = prog.A.shape
        self.A_orig = sp.csc_matrix(prog.A)
        self._normA = float(np.sqrt((self.A_orig.data ** 2).sum()))
        self.b_orig = prog.b.copy()
        self.c_orig = prog.c.copy()

        self._equilibrate(ruiz_iters)
        self._factorize()
        self.set_objective(self.c_orig)
        self._set_b(self.b_orig)
        self._last_uv: tuple[np.ndarray, np.ndarray] | None = None

    # -- scaling ------------------------------------------------------------

    def _equilibrate(self, ruiz_iters: int):
        """Cone-block-uniform Ruiz equilibration of A."""
        m, n = self.m, self.n
        d = np.ones(m)
        e = np.ones(n)
        Aw = self.A_orig.copy().astype(float)
        group = self.index.row_group
        n_groups = self.index.n_groups
        for _ in range(ruiz_iters):
            absA = abs(Aw)
            rnorm = np.asarray(absA.max(axis=1).todense()).ravel()
            gmax = np.zeros(n_groups)
            np.maximum.at(gmax, group, rnorm)
            dr = 1.0 / np.sqrt(np.clip(gmax[group], 1e-12, None))
            dr[gmax[group] <= 1e-12] = 1.0
            cnorm = np.asarray(absA.max(axis=0).todense()).ravel()
            dc = 1.0 / np.sqrt(np.clip(cnorm, 1e-12, None))
            dc[cnorm <= 1e-12] = 1.0
            Aw = sp.diags(dr) @ Aw @ sp.diags(dc)
            d *= dr
            e *= dc
            if np.max(np.abs(dr - 1.0), initial=0.0) < 1e-3 and np.max(
                np.abs(dc - 1.0), initial=0.0
            ) < 1e-3:
                break
        self.d = d
        self.e = e
        self.A_sc = sp.csc_matrix(Aw)

    def _set_b(self, b: np.ndarray):
        self.b_orig = np.asarray(b, dtype=float).copy()
        db = self.d * self.b_orig
        self.rho_b = 1.0 / max(float(np.linalg.norm(db)), 1.0)
        self.b_sc = self.rho_b * db
        self._q = None

    def set_objective(self, c: np.ndarray):
        """Replace the linear objective; keeps the cached factorization."""
        self.c_orig = np.asarray(c, dtype=float).copy()
        ec = self.e * self.c_orig
        self.rho_c = 1.0 / max(float(np.linalg.norm(ec)), 1.0)
        self.c_sc = self.rho_c * ec
        self._q = None

    # -- linear algebra -----------------------------------------------------

    def _factorize(self):
        n, m = self.n, self.m
        S = sp.bmat(
            [[sp.identity(n), self.A_sc.T], [self.A_sc, -sp.identity(m)]],
            format="csc",
        )
        try:
            self._lu = spla.splu(S, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise ConicError(f"factorization of the conic KKT system failed: {exc}") from exc

    def _solve_M(self, wx: np.ndarray, wy: np.ndarray):
        """Solve [[I, A'], [-A, I]] z = (wx, wy) via the quasi-definite system."""
        rhs = np.concatenate([wx, -wy])
        z = self._lu.solve(rhs)
        return z[: self.n], z[self.n :]

    def _refresh_q(self):
        qx, qy = self._solve_M(self.c_sc, self.b_sc)
        self._q = (qx, qy)
        self._q_denom = 1.0 + float(self.c_sc @ qx + self.b_sc @ qy)

    def _solve_IQ(self, g: np.ndarray) -> np.ndarray:
        """Solve (I + Q) h = g for the homogeneous embedding operator Q."""
        if self._q is None:
            self._refresh_q()
        n, m = self.n, self.m
        px, py = self._solve_M(g[:n], g[n : n + m])
        qx, qy = self._q
        htau = (g[-1] + self.c_sc @ px + self.b_sc @ py) / self._q_denom
        h = np.empty_like(g)
        h[:n] = px - htau * qx
        h[n : n + m] = py - htau * qy
        h[-1] = htau
        return h

    # -- iterate transforms ---------------------------------------------------

    def _unscale(self, xs, ys, ss):
        x = self.e * xs / self.rho_b
        y = self.d * ys / self.rho_c
        s = ss / (self.d * self.rho_b)
        return x, y, s

    def _residuals(self, x, y, s):
        b, c, A = self.b_orig, self.c_orig, self.A_orig
        pres = np.linalg.norm(A @ x + s - b) / (1.0 + np.linalg.norm(b))
        dres = np.linalg.norm(A.T @ y + c) / (1.0 + np.linalg.norm(c))
        pobj = float(c @ x)
        dobj = float(-b @ y)
        gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        return pres, dres, gap, pobj

    def _certificate(self, u: np.ndarray, v: np.ndarray):
        """Test the scaled iterate for infeasibility/unboundedness evidence.

        Quality measures are dimensionless: the infeasibility residual
        ||A'y|| / ||A|| is compared against the normalized negativity
        (-b'y) / ||b|| of a unit-norm candidate y in the dual cone, and
        symmetrically for unboundedness rays.  Callers gate on tau having
        collapsed, which distinguishes certificate convergence from ordinary
        optimal-point convergence.
        """
        n, m = self.n, self.m
        nA = max(self._normA, 1e-12)
        nb = max(float(np.linalg.norm(self.b_orig)), 1e-12)
        nc = max(float(np.linalg.norm(self.c_orig)), 1e-12)

        yr = self.d * u[n : n + m] / self.rho_c
        ny = float(np.linalg.norm(yr))
        if ny > 1e-12:
            y_n = yr / ny
            neg = -float(self.b_orig @ y_n) / nb
            if neg > 1e-8:
                quality = (np.linalg.norm(self.A_orig.T @ y_n) / nA) / neg
                if quality <= self.eps_infeas:
                    y = yr / max(-float(self.b_orig @ yr), 1e-300)
                    return "infeasible", (0.0, np.full(n, np.nan), y, np.full(m, np.nan),
                                          (np.inf, 0.0, np.inf), np.nan)
        xr = self.e * u[:n] / self.rho_b
        sr = v[n : n + m] / (self.d * self.rho_b)
        nx = float(np.linalg.norm(xr))
        if nx > 1e-12:
            x_n = xr / nx
            s_n = sr / nx
            neg = -float(self.c_orig @ x_n) / nc
            if neg > 1e-8:
                quality = (np.linalg.norm(self.A_orig @ x_n + s_n) / nA) / neg
                if quality <= self.eps_infeas:
                    scale = max(-float(self.c_orig @ xr), 1e-300)
                    return "unbounded", (0.0, xr / scale, np.full(m, np.nan), sr / scale,
                                         (0.0, np.inf, np.inf), -np.inf)
        return None

    # -- main loop ------------------------------------------------------------

    def _step(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """One operator-splitting iteration: linear solve then cone projection."""
        n, m = self.n, self.m
        util = self._solve_IQ(u + v)
        util = self.alpha * util + (1.0 - self.alpha) * u
        arg = util - v
        unew = arg.copy()
        unew[n : n + m] = self.index.project_dual(arg[n : n + m])
        if unew[-1] < 0.0:
            unew[-1] = 0.0
        return unew, unew - arg

    def solve(
        self,
        warm_start: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
        tol: float | None = None,
        max_iters: int | None = None,
    ) -> ConeSolution:
        """Run the operator-splitting iteration until optimality or certificate.

        Restarted Anderson acceleration extrapolates the iterate pair; the
        residual is monitored and the memory cleared (reverting to the best
        iterate) whenever an extrapolation degrades it, so the safeguarded
        sequence inherits the convergence of the plain iteration.
        """
        tol = self.tol if tol is None else float(tol)
        max_iters = self.max_iters if max_iters is None else int(max_iters)
        n, m = self.n, self.m
        N = n + m + 1

        u = np.zeros(N)
        v = np.zeros(N)
        if warm_start is not None:
            x0, y0, s0 = warm_start
            u[:n] = self.rho_b * x0 / self.e
            u[n : n + m] = self.rho_c * y0 / self.d
            u[-1] = 1.0
            v[n : n + m] = self.rho_b * self.d * s0
        elif self._last_uv is not None:
            u[:] = self._last_uv[0]
            v[:] = self._last_uv[1]
        else:
            u[-1] = 1.0
            v[-1] = 1.0

        best = None
        status = "max_iters"
        iters = max_iters
        z = np.concatenate([u, v])
        znorm_ref = max(float(np.linalg.norm(z)), 1.0)
        mem = self.aa_memory
        Tz_hist: list[np.ndarray] = []
        f_hist: list[np.ndarray] = []
        best_res = np.inf
        best_z = z.copy()
        for k in range(1, max_iters + 1):
            u, v = self._step(z[:N], z[N:])
            Tz = np.concatenate([u, v])
            f = Tz - z
            fnorm = float(np.linalg.norm(f))
            if fnorm < best_res:
                best_res = fnorm
                best_z = Tz.copy()
            if mem > 1:
                if fnorm > 1e3 * best_res + 1e-30:
                    # diverging extrapolation: restart from the best point
                    Tz_hist.clear()
                    f_hist.clear()
                    z = best_z.copy()
                    best_res = np.inf
                    continue
                Tz_hist.append(Tz)
                f_hist.append(f)
                if len(f_hist) > mem:
                    Tz_hist.pop(0)
                    f_hist.pop(0)
                if len(f_hist) >= 2:
                    dF = np.column_stack([f_hist[i + 1] - f_hist[i]
                                          for i in range(len(f_hist) - 1)])
                    dT = np.column_stack([Tz_hist[i + 1] - Tz_hist[i]
                                          for i in range(len(Tz_hist) - 1)])
                    G = dF.T @ dF
                    G[np.diag_indices_from(G)] += 1e-12 * (np.trace(G) + 1e-30)
                    try:
                        gamma = np.linalg.solve(G, dF.T @ f)
                        z = Tz - dT @ gamma
                    except np.linalg.LinAlgError:
                        z = Tz
                else:
                    z = Tz
                # the embedding is positively homogeneous: renormalize drifted iterates
                zn = float(np.linalg.norm(z))
                if zn > 1e2 * znorm_ref or (zn < 1e-2 * znorm_ref and zn > 0):
                    z *= znorm_ref / zn
                    Tz_hist.clear()
                    f_hist.clear()
            else:
                z = Tz

            if k % self.check_every == 0 or k == max_iters:
                u, v = best_z[:N].copy(), best_z[N:].copy()
                tau = u[-1]
                if tau > 1e-11:
                    x, y, s = self._unscale(u[:n] / tau, u[n : n + m] / tau, v[n : n + m] / tau)
                    pres, dres, gap, pobj = self._residuals(x, y, s)
                    score = max(pres, dres, gap)
                    if best is None or score < best[0]:
                        best = (score, x, y, s, (pres, dres, gap), pobj, k)
                    if pres <= tol and dres <= tol and gap <= tol:
                        status = "optimal"
                        iters = k
                        break
                # tau collapsing (relative to its unit initialization) signals
                # the certificate regime of the embedding
                if tau <= 1e-3:
                    cert = self._certificate(u, v)
                    if cert is not None:
                        status, payload = cert
                        iters = k
                        best = payload + (k,)
                        break

        self._last_uv = (u.copy(), v.copy())
        if best is None:
            tau = max(u[-1], 1e-11)
            x, y, s = self._unscale(u[:n] / tau, u[n : n + m] / tau, v[n : n + m] / tau)
            pres, dres, gap, pobj = self._residuals(x, y, s)
            best = (max(pres, dres, gap), x, y, s, (pres, dres, gap), pobj, max_iters)
        _, x, y, s, res, pobj, _ = best
        return ConeSolution(
            primal=x, dual=y, slack=s, status=status,
            residuals=res, iterations=iters, objective=pobj,
        )


def solve_cone_program(
    prog: ConeProgram,
    tol: float = 1e-7,
    max_iters: int = 50_000,
    warm_start: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> ConeSolution:
    """One-shot solve of a cone program; see :class:`ConicWorkspace` for reuse."""
    ws = ConicWorkspace(prog, tol=tol, max_iters=max_iters)
    return ws.solve(warm_start=warm_start)


# ---------------------------------------------------------------------------
# Plain-text exchange format (debug dump for cross-checking external solvers)
# ---------------------------------------------------------------------------

def dump_cone_program(prog: ConeProgram, path) -> None:
    """Write a cone program as plain text: dims, cone list, c, b, COO triplets."""
    A = sp.coo_matrix(prog.A)
    with open(path, "w") as fh:
        fh.write("coneprogram v1\n")
        fh.write(f"dims {prog.num_constraints} {prog.num_vars}\n")
        fh.write(f"cones {len(prog.cones)}\n")
        for cone in prog.cones:
            fh.write(f"{cone.kind} {cone.dim}\n")
        fh.write("c " + " ".join(f"{v:.17g}" for v in prog.c) + "\n")
        fh.write("b " + " ".join(f"{v:.17g}" for v in prog.b) + "\n")
        fh.write(f"A {A.nnz}\n")
        for i, j, val in zip(A.row, A.col, A.data):
            fh.write(f"{i} {j} {val:.17g}\n")


def load_cone_program(path) -> ConeProgram:
    """Read a cone program written by :func:`dump_cone_program`."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "coneprogram v1":
            raise ValueError(f"unrecognized cone program header: {header!r}")
        m, n = map(int, fh.readline().split()[1:])
        n_cones = int(fh.readline().split()[1])
        cones = []
        for _ in range(n_cones):
            kind, dim = fh.readline().split()
            cones.append(Cone(kind, int(dim)))
        c = np.array([float(t) for t in fh.readline().split()[1:]])
        b = np.array([float(t) for t in fh.readline().split()[1:]])
        nnz = int(fh.readline().split()[1])
        rows = np.empty(nnz, dtype=int)
        cols = np.empty(nnz, dtype=int)
        vals = np.empty(nnz)
        for k in range(nnz):
            i, j, val = fh.readline().split()
            rows[k], cols[k], vals[k] = int(i), int(j), float(val)
        A = sp.coo_matrix((vals, (rows, cols)), shape=(m, n)).tocsc()
        return ConeProgram(c=c, A=A, b=b, cones=cones)
