"""Proximal subproblems, consensus averaging, and dual ascent.

The splitting scheme keeps three copies of the mean/covariance decision
variables: a steering copy split into a mean subproblem (equality-constrained
QP) and a covariance subproblem (SDP via the U = K Sigma substitution), and a
chance-constraint copy updated by Dykstra projections.  Averaging ties them to
a consensus copy and the duals ascend on the consensus gaps.  All three block
updates read only the previous consensus state, so they may run in parallel
and produce identical results in any execution order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .conic import Cone, ConeProgram, ConicWorkspace, smat, svec, svec_dim
from .local import LocalProblem
from .models import NominalTrajectory, propagate_cov
from .parallel import parallel_map


class InfeasibleMeanError(Exception):
    """Boundary conditions unreachable in the mean subproblem."""


class InfeasibleCovarianceError(Exception):
    """The covariance subproblem's conic relaxation is infeasible."""


class RecoveryError(Exception):
    """Feedback gain recovery K = U Sigma^-1 failed."""


_PD_MARGIN = 1e-8


# ---------------------------------------------------------------------------
# State containers
# ---------------------------------------------------------------------------

@dataclass
class ConsensusState:
    """All variable copies and duals of the splitting scheme, full horizon."""

    v: np.ndarray           # (t_f, m) feedforward
    mu_s: np.ndarray        # (t_f+1, n) steering mean copy
    K: np.ndarray           # (t_f, m, n) feedback gains
    Sigma_s: np.ndarray     # (t_f+1, n, n) steering covariance copy
    mu_cc: np.ndarray
    Sigma_cc: np.ndarray
    mu_cn: np.ndarray
    Sigma_cn: np.ndarray
    lam1: np.ndarray        # duals for mu_s = mu_cn
    lam2: np.ndarray        # duals for mu_cc = mu_cn
    Lam1: np.ndarray        # duals for Sigma_s = Sigma_cn
    Lam2: np.ndarray        # duals for Sigma_cc = Sigma_cn
    rho: float

    @classmethod
    def from_anchor(cls, traj: NominalTrajectory, rho: float) -> "ConsensusState":
        """Anchor-copied primals and zero duals."""
        t_f = traj.horizon
        n = traj.xbar.shape[1]
        m = traj.ubar.shape[1]
        mu = traj.xbar.copy()
        Sig = traj.Sigma.copy()
        return cls(
            v=traj.ubar.copy(),
            mu_s=mu.copy(), K=np.zeros((t_f, m, n)), Sigma_s=Sig.copy(),
            mu_cc=mu.copy(), Sigma_cc=Sig.copy(),
            mu_cn=mu.copy(), Sigma_cn=Sig.copy(),
            lam1=np.zeros((t_f + 1, n)), lam2=np.zeros((t_f + 1, n)),
            Lam1=np.zeros((t_f + 1, n, n)), Lam2=np.zeros((t_f + 1, n, n)),
            rho=float(rho),
        )

    def primal_residual(self) -> float:
        """max of the four consensus gaps (inf-norm on means, Frobenius on covs)."""
        r = max(
            float(np.max(np.abs(self.mu_s - self.mu_cn), initial=0.0)),
            float(np.max(np.abs(self.mu_cc - self.mu_cn), initial=0.0)),
        )
        gap_s = np.linalg.norm(self.Sigma_s - self.Sigma_cn, axis=(1, 2))
        gap_cc = np.linalg.norm(self.Sigma_cc - self.Sigma_cn, axis=(1, 2))
        return max(r, float(gap_s.max(initial=0.0)), float(gap_cc.max(initial=0.0)))


@dataclass(frozen=True)
class ControlPolytope:
    """Linear input constraints -b_max <= G u <= b_max (e.g. wheel speeds)."""

    Gmat: np.ndarray
    b_max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Gmat", np.atleast_2d(np.asarray(self.Gmat, dtype=float)))
        object.__setattr__(self, "b_max", np.asarray(self.b_max, dtype=float).ravel())
        if np.any(self.b_max <= 0):
            raise ValueError("polytope bounds must be positive")
        if self.Gmat.shape[0] != self.b_max.size:
            raise ValueError("G row count must match b_max length")


@dataclass
class CovRelaxationVars:
    """Raw SDP variables of the covariance block: U_t = K_t Sigma_t and the
    cost epigraph Y_t."""

    U: np.ndarray   # (t_f, m, n)
    Y: np.ndarray   # (t_f, m, m)


# ---------------------------------------------------------------------------
# Mean subproblem
# ---------------------------------------------------------------------------

class MeanProx:
    """Proximal mean-steering subproblem for one local problem.

    Without input constraints this is an equality-constrained QP solved
    through one sparse symmetric-indefinite factorization, reused for every
    prox target.  With a control polytope the quadratic is lifted to a cone
    program (nonnegative cones for the input bounds) on a cached workspace.
    """

    def __init__(self, prob: LocalProblem, rho: float, polytope: ControlPolytope | None = None):
        self.prob = prob
        self.rho = float(rho)
        self.polytope = polytope
        self.t_f = prob.horizon
        self.n = prob.state_dim
        self.m = prob.control_dim
        self.n_mu = (self.t_f + 1) * self.n
        self.n_var = self.n_mu + self.t_f * self.m
        if polytope is None:
            self._build_kkt()
        else:
            self._build_conic()

    def _mu_idx(self, t):
        return slice(t * self.n, (t + 1) * self.n)

    def _v_idx(self, t):
        return slice(self.n_mu + t * self.m, self.n_mu + (t + 1) * self.m)

    def _constraint_data(self):
        """Rows of C xi = h: initial pin, dynamics, terminal pin."""
        n, m, t_f = self.n, self.m, self.t_f
        rows = []
        h = [self.prob.boundary.init.mean]
        C0 = sp.lil_matrix((n, self.n_var))
        C0[:, : n] = np.eye(n)
        rows.append(C0)
        for t in range(t_f):
            lin = self.prob.lin[t]
            Ct = sp.lil_matrix((n, self.n_var))
            Ct[:, self._mu_idx(t + 1)] = np.eye(n)
            Ct[:, self._mu_idx(t)] = -lin.A
            Ct[:, self._v_idx(t)] = -lin.B
            rows.append(Ct)
            h.append(lin.d)
        Cf = sp.lil_matrix((n, self.n_var))
        Cf[:, self._mu_idx(t_f)] = np.eye(n)
        rows.append(Cf)
        h.append(self.prob.boundary.term.mean)
        return sp.vstack(rows, format="csc"), np.concatenate(h)

    def _hessian_blocks(self):
        cost = self.prob.cost
        H = sp.lil_matrix((self.n_var, self.n_var))
        for t in range(self.t_f + 1):
            Qt = cost.Q[t] if t < self.t_f else np.zeros((self.n, self.n))
            H[self._mu_idx(t), self._mu_idx(t)] = Qt + self.rho * np.eye(self.n)
        for t in range(self.t_f):
            H[self._v_idx(t), self._v_idx(t)] = cost.R
        return H.tocsc()

    def _linear_term(self, target):
        f = np.zeros(self.n_var)
        for t in range(self.t_f + 1):
            f[self._mu_idx(t)] = -self.rho * target[t]
            if t < self.t_f:
                f[self._mu_idx(t)] += self.prob.cost.q[t]
        return f

    def _build_kkt(self):
        H = self._hessian_blocks()
        C, h = self._constraint_data()
        self._C, self._h = C, h
        n_con = C.shape[0]
        KKT = sp.bmat([[H, C.T], [C, None]], format="csc")
        try:
            self._lu = spla.splu(KKT, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise InfeasibleMeanError(f"mean KKT system is singular: {exc}") from exc
        self._n_con = n_con

    def _build_conic(self):
        n, m, t_f = self.n, self.m, self.t_f
        C, h = self._constraint_data()
        self._C, self._h = C, h
        G, bmax = self.polytope.Gmat, self.polytope.b_max
        n_bounds = G.shape[0]
        # decision vector: xi then per-step epigraph scalars
        n_epi = t_f + 1
        nv = self.n_var + n_epi
        rows = [sp.hstack([C, sp.csc_matrix((C.shape[0], n_epi))], format="csc")]
        b = [h]
        cones = [Cone("zero", C.shape[0])]
        poly = sp.lil_matrix((2 * n_bounds * t_f, nv))
        pb = np.empty(2 * n_bounds * t_f)
        for t in range(t_f):
            r0 = 2 * n_bounds * t
            poly[r0 : r0 + n_bounds, self._v_idx(t)] = G
            poly[r0 + n_bounds : r0 + 2 * n_bounds, self._v_idx(t)] = -G
            pb[r0 : r0 + 2 * n_bounds] = np.concatenate([bmax, bmax])
        rows.append(poly.tocsc())
        b.append(pb)
        cones.append(Cone("nonneg", 2 * n_bounds * t_f))
        # per-step quadratic epigraphs: s_t >= || L_t z_t ||^2
        self._L = []
        for t in range(t_f + 1):
            if t < t_f:
                Hblk = np.block([
                    [self.prob.cost.Q[t] + self.rho * np.eye(n), np.zeros((n, m))],
                    [np.zeros((m, n)), self.prob.cost.R],
                ])
                zdim = n + m
            else:
                Hblk = self.rho * np.eye(n)
                zdim = n
            L = np.linalg.cholesky(Hblk + 1e-12 * np.eye(zdim))
            self._L.append(L)
            soc = sp.lil_matrix((zdim + 2, nv))
            sb = np.zeros(zdim + 2)
            epi = self.n_var + t
            soc[0, epi] = -0.5
            soc[1, epi] = 0.5
            sb[0] = sb[1] = 0.5
            if t < t_f:
                soc[2:, self._mu_idx(t)] = -L[:, :n]
                soc[2:, self._v_idx(t)] = -L[:, n:]
            else:
                soc[2:, self._mu_idx(t)] = -L
            rows.append(soc.tocsc())
            b.append(sb)
            cones.append(Cone("soc", zdim + 2))
        A = sp.vstack(rows, format="csc")
        bvec = np.concatenate(b)
        c = np.zeros(nv)
        c[self.n_var :] = 0.5
        self._conic_nv = nv
        # polytope rows kept for the active-set polish after each conic solve
        poly_all = sp.lil_matrix((2 * n_bounds * t_f, self.n_var))
        pb_all = np.empty(2 * n_bounds * t_f)
        for t in range(t_f):
            r0 = 2 * n_bounds * t
            poly_all[r0 : r0 + n_bounds, self._v_idx(t)] = G
            poly_all[r0 + n_bounds : r0 + 2 * n_bounds, self._v_idx(t)] = -G
            pb_all[r0 : r0 + 2 * n_bounds] = np.concatenate([bmax, bmax])
        self._poly = sp.csr_matrix(poly_all)
        self._poly_b = pb_all
        self._ws = ConicWorkspace(ConeProgram(c=c, A=A, b=bvec, cones=cones), tol=1e-6)

    def solve(self, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Minimize the mean cost plus (rho/2)||mu - target||^2 over feasible means."""
        target = np.asarray(target, dtype=float)
        if self.polytope is None:
            rhs = np.concatenate([-self._linear_term(target), self._h])
            sol = self._lu.solve(rhs)
            xi = sol[: self.n_var]
            defect = np.max(np.abs(self._C @ xi - self._h))
            if not np.isfinite(defect) or defect > 1e-8 * (1.0 + np.max(np.abs(self._h))):
                raise InfeasibleMeanError(
                    f"boundary conditions unreachable (constraint defect {defect:.2e})"
                )
        else:
            f = self._linear_term(target)
            c = np.zeros(self._conic_nv)
            c[: self.n_var] = f
            c[self.n_var :] = 0.5
            self._ws.set_objective(c)
            sol_c = self._ws.solve(max_iters=8000)
            if sol_c.status == "infeasible":
                raise InfeasibleMeanError("mean subproblem with input bounds is infeasible")
            xi = self._active_set_polish(sol_c.primal[: self.n_var], f)
        mu = xi[: self.n_mu].reshape(self.t_f + 1, self.n)
        v = xi[self.n_mu :].reshape(self.t_f, self.m)
        return v, mu

    def _active_set_polish(self, xi: np.ndarray, f: np.ndarray) -> np.ndarray:
        """Refine the conic solution by one-shot equality solves on its active set.

        The conic pass determines which input bounds bind; re-solving the KKT
        system with those rows pinned restores the recursion and boundary
        conditions to factorization accuracy.
        """
        H = self._hessian_blocks()
        slack = self._poly_b - self._poly @ xi
        active = slack <= 1e-5 * (1.0 + np.abs(self._poly_b))
        best = xi
        for _ in range(6):
            C_act = sp.vstack([self._C, self._poly[np.nonzero(active)[0]]], format="csc")
            h_act = np.concatenate([self._h, self._poly_b[active]])
            KKT = sp.bmat([[H, C_act.T], [C_act, None]], format="csc")
            try:
                lu = spla.splu(KKT, permc_spec="MMD_AT_PLUS_A")
            except RuntimeError:
                return best
            sol = lu.solve(np.concatenate([-f, h_act]))
            cand = sol[: self.n_var]
            if not np.all(np.isfinite(cand)):
                return best
            viol = self._poly @ cand - self._poly_b
            worst = float(viol.max(initial=0.0))
            defect = float(np.max(np.abs(self._C @ cand - self._h)))
            if defect <= 1e-8 * (1.0 + np.max(np.abs(self._h))):
                best = cand
            if worst <= 1e-9:
                return best
            active |= viol > 1e-9
        return best


def mean_prox(
    prob: LocalProblem,
    target: np.ndarray,
    rho: float,
    polytope: ControlPolytope | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One-shot mean subproblem solve; see :class:`MeanProx` for reuse."""
    return MeanProx(prob, rho, polytope).solve(target)


# ---------------------------------------------------------------------------
# Covariance subproblem
# ---------------------------------------------------------------------------

def _matrix_sqrt(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _recover_gain(U: np.ndarray, S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """K = U Sigma^-1 with a noise floor: directions whose eigenvalue sits at
    solver-noise level get zero feedback instead of amplified garbage.

    Returns (K, Sigma_clamped) with Sigma eigenvalues floored at 1e-9."""
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    Sigma = (V * np.clip(w, 1e-9, None)) @ V.T
    floor = max(1e-9, 1e-6 * float(w.max(initial=0.0)))
    inv_w = np.where(w >= floor, 1.0 / np.clip(w, floor, None), 0.0)
    K = U @ (V * inv_w) @ V.T
    return K, Sigma


def _sym_basis(k: int) -> np.ndarray:
    """Unit symmetric matrices matching the svec basis of side k."""
    rows, cols = np.tril_indices(k)
    mats = np.zeros((len(rows), k, k))
    for idx, (i, j) in enumerate(zip(rows, cols)):
        if i == j:
            mats[idx, i, j] = 1.0
        else:
            mats[idx, i, j] = mats[idx, j, i] = 1.0 / np.sqrt(2.0)
    return mats


def append_cov_structure(prob, sig_idx, u_idx, y_idx, add_entries, b_parts, cones, row0):
    """Append the covariance-block constraints shared by the prox and the baseline.

    Emits, in order: the initial-covariance pin, the terminal covariance
    (equality or ordering), the relaxed-recursion LMIs, the feedback-cost
    epigraph LMIs, and positive-definiteness margins.  Index callables map a
    time step to the column range of svec(Sigma_t), vec(U_t), svec(Y_t).
    Returns the next free row.
    """
    n = prob.state_dim
    m = prob.control_dim
    t_f = prob.horizon
    sd, sdm = svec_dim(n), svec_dim(m)
    basis_n = _sym_basis(n)
    basis_m = _sym_basis(m)
    Rh = _matrix_sqrt(prob.cost.R)
    bnd = prob.boundary

    add_entries(row0, sig_idx(0), np.eye(sd))
    b_parts.append(svec(bnd.init.cov))
    cones.append(Cone("zero", sd))
    row0 += sd

    add_entries(row0, sig_idx(t_f), np.eye(sd))
    b_parts.append(svec(bnd.term.cov))
    cones.append(Cone("zero", sd) if bnd.terminal_cov_mode == "equality" else Cone("psd", n))
    row0 += sd

    sd2 = svec_dim(2 * n)
    for t in range(t_f):
        lin = prob.lin[t]
        cols_sig = np.empty((sd, sd2))
        cols_sig_next = np.empty((sd, sd2))
        for k in range(sd):
            E = basis_n[k]
            M = np.zeros((2 * n, 2 * n))
            AE = lin.A @ E
            M[:n, n:] = AE
            M[n:, :n] = AE.T
            M[n:, n:] = E
            cols_sig[k] = -svec(M)
            M2 = np.zeros((2 * n, 2 * n))
            M2[:n, :n] = E
            cols_sig_next[k] = -svec(M2)
        add_entries(row0, sig_idx(t), cols_sig.T)
        add_entries(row0, sig_idx(t + 1), cols_sig_next.T)
        cols_u = np.empty((m * n, sd2))
        for i in range(m):
            for j in range(n):
                M = np.zeros((2 * n, 2 * n))
                M[:n, n + j] += lin.B[:, i]
                M[n + j, :n] += lin.B[:, i]
                cols_u[i * n + j] = -svec(M)
        add_entries(row0, u_idx(t), cols_u.T)
        M0 = np.zeros((2 * n, 2 * n))
        M0[:n, :n] = -(lin.D @ lin.D.T)
        b_parts.append(svec(M0))
        cones.append(Cone("psd", 2 * n))
        row0 += sd2

    sdmix = svec_dim(m + n)
    for t in range(t_f):
        cols_y = np.empty((sdm, sdmix))
        for k in range(sdm):
            M = np.zeros((m + n, m + n))
            M[:m, :m] = basis_m[k]
            cols_y[k] = -svec(M)
        add_entries(row0, y_idx(t), cols_y.T)
        cols_sig = np.empty((sd, sdmix))
        for k in range(sd):
            M = np.zeros((m + n, m + n))
            M[m:, m:] = basis_n[k]
            cols_sig[k] = -svec(M)
        add_entries(row0, sig_idx(t), cols_sig.T)
        cols_u = np.empty((m * n, sdmix))
        for i in range(m):
            for j in range(n):
                M = np.zeros((m + n, m + n))
                M[:m, m + j] += Rh[:, i]
                M[m + j, :m] += Rh[:, i]
                cols_u[i * n + j] = -svec(M)
        add_entries(row0, u_idx(t), cols_u.T)
        b_parts.append(np.zeros(sdmix))
        cones.append(Cone("psd", m + n))
        row0 += sdmix

    for t in range(1, t_f + 1):
        add_entries(row0, sig_idx(t), -np.eye(sd))
        b_parts.append(svec(-_PD_MARGIN * np.eye(n)))
        cones.append(Cone("psd", n))
        row0 += sd
    return row0


class CovProx:
    """Proximal covariance-steering subproblem as a cone program.

    The quadratic covariance recursion is relaxed to a linear matrix
    inequality through the substitution U_t = K_t Sigma_t and a Schur
    complement; the feedback cost enters through epigraph blocks
    [[Y, R^1/2 U], [U' R^1/2, Sigma]] >= 0.  The program structure is fixed
    per local problem; prox targets only move the linear objective, so one
    factorization and warm starts serve every ADMM iteration.
    """

    def __init__(self, prob: LocalProblem, rho: float, tol: float = 1e-7,
                 max_iters: int = 50_000):
        self.prob = prob
        self.rho = float(rho)
        self.t_f = prob.horizon
        self.n = prob.state_dim
        self.m = prob.control_dim
        self._build(tol, max_iters)

    # variable layout --------------------------------------------------------

    def _sig_idx(self, t):
        sd = svec_dim(self.n)
        return slice(t * sd, (t + 1) * sd)

    def _u_idx(self, t):
        sd = svec_dim(self.n)
        base = (self.t_f + 1) * sd
        return slice(base + t * self.m * self.n, base + (t + 1) * self.m * self.n)

    def _y_idx(self, t):
        sd = svec_dim(self.n)
        sdm = svec_dim(self.m)
        base = (self.t_f + 1) * sd + self.t_f * self.m * self.n
        return slice(base + t * sdm, base + (t + 1) * sdm)

    def _s_idx(self, t):
        sd = svec_dim(self.n)
        sdm = svec_dim(self.m)
        base = (self.t_f + 1) * sd + self.t_f * self.m * self.n + self.t_f * sdm
        return base + t

    # assembly ----------------------------------------------------------------

    def _build(self, tol, max_iters):
        n, m, t_f = self.n, self.m, self.t_f
        sd, sdm = svec_dim(n), svec_dim(m)
        nv = (t_f + 1) * sd + t_f * m * n + t_f * sdm + (t_f + 1)
        self.n_var = nv

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

        row0 = append_cov_structure(
            self.prob, self._sig_idx, self._u_idx, self._y_idx,
            add_entries, b_parts, cones, 0,
        )

        # prox epigraphs: s_t >= ||svec(Sigma_t)||^2
        for t in range(t_f + 1):
            add_entries(row0, self._s_idx(t), np.array([[-0.5], [0.5]]))
            add_entries(row0 + 2, self._sig_idx(t), -np.eye(sd))
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
        self._c_base = np.zeros(nv)
        for t in range(t_f):
            self._c_base[self._sig_idx(t)] = svec(self.prob.cost.Q[t])
            self._c_base[self._y_idx(t)] = svec(np.eye(m))
        for t in range(t_f + 1):
            self._c_base[self._s_idx(t)] = 0.5 * self.rho
        self._ws = ConicWorkspace(
            ConeProgram(c=self._c_base.copy(), A=A, b=b, cones=cones),
            tol=tol, max_iters=max_iters,
        )

    def solve(self, target: np.ndarray, tol: float | None = None,
              max_iters: int | None = None) -> tuple[np.ndarray, np.ndarray, dict]:
        """Minimize the steering cost plus (rho/2) sum ||Sigma_t - target_t||_F^2.

        Returns recovered gains K, the covariance sequence, and diagnostics
        with the conic status, objective value, and the relaxation replay gap.
        ``tol`` overrides the workspace tolerance for this call (inexact
        proximal evaluations early in the consensus loop).
        """
        target = np.asarray(target, dtype=float)
        c = self._c_base.copy()
        const = 0.0
        for t in range(self.t_f + 1):
            sv = svec(0.5 * (target[t] + target[t].T))
            c[self._sig_idx(t)] -= self.rho * sv
            const += 0.5 * self.rho * float(sv @ sv)
        self._ws.set_objective(c)
        if max_iters is not None and self._ws._last_uv is None:
            max_iters = None  # cold start: let the first solve run to tolerance
        sol = self._ws.solve(tol=tol, max_iters=max_iters)
        if sol.status == "infeasible":
            raise InfeasibleCovarianceError("covariance subproblem relaxation is infeasible")
        usable = np.all(np.isfinite(sol.primal)) and sol.residuals[0] <= 1e-2
        if not usable:
            # a truncated or failed solve must not poison the consensus loop;
            # act as the identity prox on the (PSD-projected) target instead
            Sigma = np.empty((self.t_f + 1, self.n, self.n))
            for t in range(self.t_f + 1):
                w, V = np.linalg.eigh(0.5 * (target[t] + target[t].T))
                Sigma[t] = (V * np.clip(w, 1e-9, None)) @ V.T
            K = np.zeros((self.t_f, self.m, self.n))
            diag = {"status": "fallback", "iterations": sol.iterations,
                    "objective": np.nan, "replay_gap": np.inf, "relaxation_tight": False}
            return K, Sigma, diag
        Sigma = np.empty((self.t_f + 1, self.n, self.n))
        K = np.empty((self.t_f, self.m, self.n))
        for t in range(self.t_f + 1):
            S = smat(sol.primal[self._sig_idx(t)], self.n)
            if t < self.t_f:
                U = sol.primal[self._u_idx(t)].reshape(self.m, self.n)
                K[t], Sigma[t] = _recover_gain(U, S)
            else:
                w, V = np.linalg.eigh(0.5 * (S + S.T))
                Sigma[t] = (V * np.clip(w, 1e-9, None)) @ V.T
        if not np.all(np.isfinite(K)):
            raise RecoveryError("non-finite feedback gains recovered")
        # replay check: how tight is the LMI relaxation along the recursion
        replay_gap = 0.0
        S = Sigma[0]
        for t in range(self.t_f):
            S = propagate_cov(self.prob.lin[t], S, K[t])
            replay_gap = max(replay_gap, float(np.linalg.norm(Sigma[t + 1] - S)))
        diag = {
            "status": sol.status,
            "iterations": sol.iterations,
            "objective": sol.objective + const,
            "replay_gap": replay_gap,
            "relaxation_tight": replay_gap <= 1e-4 * (1.0 + float(np.linalg.norm(Sigma[-1]))),
        }
        return K, Sigma, diag


def cov_prox(prob: LocalProblem, target: np.ndarray, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """One-shot covariance subproblem solve; see :class:`CovProx` for reuse."""
    K, Sigma, _ = CovProx(prob, rho).solve(target)
    return K, Sigma


def polish_mean(
    prob: LocalProblem,
    Sigma_seq: np.ndarray,
    tol: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray] | None:
    """Re-solve the mean subproblem with chance constraints imposed directly.

    With the covariance sequence held fixed, every linearized chance
    constraint is an ordinary half-plane on the mean, so the mean problem
    (cost, proximal pull to the anchor, dynamics, boundary, input bounds)
    is one small cone program solved to high accuracy.  Used to strip the
    residual consensus error from the reported trajectory; returns None when
    the constrained mean problem is infeasible (bad linearization).
    """
    n, m, t_f = prob.state_dim, prob.control_dim, prob.horizon
    a_mu = prob.prox_weights[0]
    helper = MeanProx.__new__(MeanProx)
    helper.prob = prob
    helper.rho = 0.0
    helper.t_f, helper.n, helper.m = t_f, n, m
    helper.n_mu = (t_f + 1) * n
    helper.n_var = helper.n_mu + t_f * m
    C, h = helper._constraint_data()

    n_epi = t_f + 1 if a_mu > 0 else t_f
    nv = helper.n_var + n_epi
    rows = [sp.hstack([C, sp.csc_matrix((C.shape[0], n_epi))], format="csc")]
    b_parts = [h]
    cones = [Cone("zero", C.shape[0])]

    n_cc = sum(len(group) for group in prob.constraints)
    if n_cc:
        cc = sp.lil_matrix((n_cc, nv))
        cb = np.empty(n_cc)
        r = 0
        for t, group in enumerate(prob.constraints):
            for con in group:
                cc[r, helper._mu_idx(t)] = con.w
                cb[r] = -con.c - float(np.sum(con.G * Sigma_seq[t]))
                r += 1
        rows.append(cc.tocsc())
        b_parts.append(cb)
        cones.append(Cone("nonneg", n_cc))

    if prob.polytope is not None:
        G, bmax = prob.polytope.Gmat, prob.polytope.b_max
        nb = G.shape[0]
        poly = sp.lil_matrix((2 * nb * t_f, nv))
        pb = np.empty(2 * nb * t_f)
        for t in range(t_f):
            r0 = 2 * nb * t
            poly[r0 : r0 + nb, helper._v_idx(t)] = G
            poly[r0 + nb : r0 + 2 * nb, helper._v_idx(t)] = -G
            pb[r0 : r0 + 2 * nb] = np.concatenate([bmax, bmax])
        rows.append(poly.tocsc())
        b_parts.append(pb)
        cones.append(Cone("nonneg", 2 * nb * t_f))

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
        soc = sp.lil_matrix((zdim + 2, nv))
        sb = np.zeros(zdim + 2)
        epi = helper.n_var + t
        soc[0, epi] = -0.5
        soc[1, epi] = 0.5
        sb[0] = sb[1] = 0.5
        if t < t_f:
            soc[2:, helper._mu_idx(t)] = -L[:, :n]
            soc[2:, helper._v_idx(t)] = -L[:, n:]
        else:
            soc[2:, helper._mu_idx(t)] = -L
        rows.append(soc.tocsc())
        b_parts.append(sb)
        cones.append(Cone("soc", zdim + 2))

    c = np.zeros(nv)
    for t in range(t_f + 1):
        if t < t_f:
            c[helper._mu_idx(t)] = prob.cost.q[t] - a_mu * prob.anchor.xbar[t]
            c[helper.n_var + t] = 0.5
        else:
            c[helper._mu_idx(t)] = -a_mu * prob.anchor.xbar[t]
            if a_mu > 0:
                c[helper.n_var + t] = 0.5
    A = sp.vstack(rows, format="csc")
    prog = ConeProgram(c=c, A=A, b=np.concatenate(b_parts), cones=cones)
    ws = ConicWorkspace(prog, tol=tol, max_iters=20_000)
    sol = ws.solve()
    if sol.status != "optimal":
        return None
    mu = sol.primal[: helper.n_mu].reshape(t_f + 1, n)
    v = sol.primal[helper.n_mu : helper.n_var].reshape(t_f, m)
    return v, mu


# ---------------------------------------------------------------------------
# Chance-constraint projection
# ---------------------------------------------------------------------------

def _project_halfspaces_dykstra(y0, normals, offsets, max_sweeps=200, tol=1e-10):
    """Dykstra's corrected cyclic projections onto an intersection of halfspaces."""
    x = y0.copy()
    if len(normals) == 1:
        u, cc = normals[0], offsets[0]
        viol = u @ x + cc
        if viol > 0:
            x = x - viol / (u @ u) * u
        return x, True
    corrections = [np.zeros_like(y0) for _ in normals]
    for _ in range(max_sweeps):
        x_prev = x.copy()
        for i, (u, cc) in enumerate(zip(normals, offsets)):
            w = x + corrections[i]
            viol = u @ w + cc
            xn = w - viol / (u @ u) * u if viol > 0 else w
            corrections[i] = w - xn
            x = xn
        if np.max(np.abs(x - x_prev)) < tol:
            return x, True
    return x, False


def chance_prox(
    constraints: list[list],
    mu_target: np.ndarray,
    Sigma_target: np.ndarray,
    rho: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Project each step's (mu, Sigma) onto its linearized chance-constraint set.

    The penalty weight rho cancels out of a pure projection, so it only
    appears for signature symmetry with the other blocks.  Steps are
    independent and processed in parallel; symmetric matrices are handled in
    scaled vectorization so symmetry is preserved exactly.  When Dykstra does
    not converge (e.g. an empty intersection after a bad linearization) the
    best iterate is returned and flagged in the diagnostics.
    """
    t_f = len(constraints) - 1
    n = mu_target.shape[1]

    def project_step(t):
        group = constraints[t]
        mu_t = mu_target[t]
        Sig_t = 0.5 * (Sigma_target[t] + Sigma_target[t].T)
        if not group:
            return mu_t.copy(), Sig_t, True
        y0 = np.concatenate([mu_t, svec(Sig_t)])
        normals = [np.concatenate([con.w, svec(con.G)]) for con in group]
        offsets = [con.c for con in group]
        y, ok = _project_halfspaces_dykstra(y0, normals, offsets)
        return y[:n], smat(y[n:], n), ok

    results = parallel_map(project_step, list(range(t_f + 1)))
    mu_cc = np.stack([r[0] for r in results])
    Sigma_cc = np.stack([r[1] for r in results])
    not_converged = [t for t, r in enumerate(results) if not r[2]]
    diag = {"dykstra_converged": not not_converged, "unconverged_steps": not_converged}
    return mu_cc, Sigma_cc, diag


# ---------------------------------------------------------------------------
# Consensus and duals
# ---------------------------------------------------------------------------

def consensus_update(
    state: ConsensusState,
    prox_weights: tuple[float, float],
    anchor: NominalTrajectory,
    mode: str = "weighted",
) -> None:
    """Second ADMM block: refresh the consensus copy in place.

    ``paper_exact`` is the plain average of the steering and chance copies.
    ``weighted`` is the exact minimizer of the augmented Lagrangian including
    the proximal regularizer and the duals; with zero weights and opposite
    duals it reduces to the plain average.
    """
    if mode == "paper_exact":
        state.mu_cn = 0.5 * (state.mu_s + state.mu_cc)
        state.Sigma_cn = 0.5 * (state.Sigma_s + state.Sigma_cc)
    elif mode == "weighted":
        a_mu, a_sig = prox_weights
        rho = state.rho
        state.mu_cn = (
            a_mu * anchor.xbar + rho * (state.mu_s + state.lam1)
            + rho * (state.mu_cc + state.lam2)
        ) / (a_mu + 2.0 * rho)
        Sig = (
            a_sig * anchor.Sigma + rho * (state.Sigma_s + state.Lam1)
            + rho * (state.Sigma_cc + state.Lam2)
        ) / (a_sig + 2.0 * rho)
        state.Sigma_cn = 0.5 * (Sig + np.swapaxes(Sig, 1, 2))
    else:
        raise ValueError(f"unknown averaging mode {mode!r}")


def dual_update(state: ConsensusState) -> None:
    """Dual ascent on the consensus gaps, in place; matrix duals stay symmetric."""
    rho = state.rho
    state.lam1 = state.lam1 + rho * (state.mu_s - state.mu_cn)
    state.lam2 = state.lam2 + rho * (state.mu_cc - state.mu_cn)
    L1 = state.Lam1 + rho * (state.Sigma_s - state.Sigma_cn)
    L2 = state.Lam2 + rho * (state.Sigma_cc - state.Sigma_cn)
    state.Lam1 = 0.5 * (L1 + np.swapaxes(L1, 1, 2))
    state.Lam2 = 0.5 * (L2 + np.swapaxes(L2, 1, 2))
