"""Constrained Gauss-Newton SQP for estimation problems over (x, w) trajectories.

Decision vector (multiple-shooting layout)::

    v = [x_0, w_0, x_1, w_1, ..., x_{N-1}, w_{N-1}, x_N]

Dynamics and optional pins on ``x_0`` / ``x_N`` are explicit equality
constraints of every QP subproblem. Finite box bounds on states,
disturbances and fitting errors enter through a logarithmic barrier in a
primal-dual interior-point scheme; the barrier parameter is reduced
geometrically. Steps are globalized by backtracking on an l1 merit function
with a second-order correction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cost import EstimateTrajectory, total_cost
from .system_model import ConstraintSets, DataBatch

__all__ = [
    "ToleranceConfig",
    "ProblemSpec",
    "SolveReport",
    "SolverError",
    "solve",
    "kkt_residual",
    "default_initializer",
    "warm_start_from",
    "CONVERGED",
    "MAX_ITER",
    "INFEASIBLE",
]

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

# interior-point constants
_KAPPA_EPS = 10.0       # barrier subproblem accuracy, relative to mu
_KAPPA_SIGMA = 1e10     # dual safeguard
_ARMIJO = 1e-4
_ALPHA_MIN = 1e-12
_PUSH = 1e-2            # initial push into the interior of boxes
_RESTORE_VIOLATION = 1e-6


@dataclass(frozen=True)
class ToleranceConfig:
    tol_kkt: float = 1e-8
    tol_feas: float = 1e-8
    max_iter: int = 200
    mu_init: float = 1.0
    mu_factor: float = 0.2
    mu_final: float = 1e-9

    def to_dict(self):
        return dict(self.__dict__)


class SolverError(RuntimeError):
    """A solve ended without convergence; the report is attached."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """One estimation NLP: full, truncated (``tau > 0``) or pinned.

    ``tau`` is the absolute index of ``data``'s first sample; it only labels
    the returned trajectory.
    """

    data: DataBatch
    model: object
    sets: ConstraintSets
    weights: object
    pin_initial: np.ndarray | None = None
    pin_terminal: np.ndarray | None = None
    tau: int = 0

    def __post_init__(self):
        m = self.model
        if self.data.u.shape[1] != m.m or self.data.y.shape[1] != m.p:
            raise ValueError("data dimensions do not match the model")
        if self.weights.q != m.q or self.weights.p != m.p:
            raise ValueError("weight dimensions do not match the model")
        dims = (self.sets.X.dim, self.sets.U.dim, self.sets.W.dim, self.sets.V.dim)
        if dims != (m.n, m.m, m.q, m.p):
            raise ValueError("constraint set dimensions do not match the model")
        for name in ("pin_initial", "pin_terminal"):
            pin = getattr(self, name)
            if pin is not None:
                pin = np.atleast_1d(np.asarray(pin, dtype=float))
                if pin.shape != (m.n,):
                    raise ValueError(f"{name} must have shape ({m.n},)")
                if not self.sets.X.contains(pin):
                    raise ValueError(f"{name} lies outside X")
                object.__setattr__(self, name, pin)

    @property
    def N(self):
        return self.data.T


@dataclass(eq=False)
class SolveReport:
    trajectory: EstimateTrajectory
    objective: float
    kkt_residual: float
    iterations: int
    status: str
    constraint_violation: float = 0.0
    barrier: float = 0.0
    merit_history: list = field(default_factory=list)

    @property
    def converged(self):
        return self.status == CONVERGED

    def to_dict(self):
        t = self.trajectory
        return {
            "status": self.status,
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "constraint_violation": self.constraint_violation,
            "start": t.start,
            "x": t.x.tolist(),
            "w": t.w.tolist(),
        }


class _NLP:
    """Index bookkeeping and derivative assembly for one ProblemSpec."""

    def __init__(self, spec):
        self.spec = spec
        model, data = spec.model, spec.data
        N, n, q, p = spec.N, model.n, model.q, model.p
        self.N, self.n, self.q, self.p = N, n, q, p
        self.model = model
        self.u, self.y = data.u, data.y
        nz = n + q
        self.nv = N * nz + n
        self.xidx = np.arange(N + 1)[:, None] * nz + np.arange(n)
        self.widx = np.arange(N)[:, None] * nz + n + np.arange(q)
        w = spec.weights
        self.Q = w.Q
        self.Wr = np.empty((N + 1, p, p))
        self.Wr[:N] = w.R
        self.Wr[N] = w.G if w.filtering else 0.0
        self.LW = np.empty((N + 1, p, p))
        self.LW[:N] = w.LR
        self.LW[N] = w.LG if w.filtering else 0.0

        self.pins = [(self.xidx[0], spec.pin_initial)] if spec.pin_initial is not None else []
        if spec.pin_terminal is not None:
            self.pins.append((self.xidx[N], spec.pin_terminal))
        self.neq = N * n + n * len(self.pins)

        # direct bounds on variables: c = sign * (v[idx] - bound) >= 0
        idx, bnd, sgn = [], [], []
        for box, vidx in ((spec.sets.X, self.xidx), (spec.sets.W, self.widx)):
            for k in range(box.dim):
                for b, s in ((box.lower[k], 1.0), (box.upper[k], -1.0)):
                    if np.isfinite(b) and vidx.shape[0]:
                        idx.append(vidx[:, k])
                        bnd.append(np.full(vidx.shape[0], b))
                        sgn.append(np.full(vidx.shape[0], s))
        self.d_idx = np.concatenate(idx).astype(int) if idx else np.zeros(0, int)
        self.d_bnd = np.concatenate(bnd) if bnd else np.zeros(0)
        self.d_sgn = np.concatenate(sgn) if sgn else np.zeros(0)
        # fitting-error bounds: c = sign * (r[j, k] - bound) >= 0, r = y - h(x)
        jj, kk, bnd, sgn = [], [], [], []
        V = spec.sets.V
        for k in range(p):
            for b, s in ((V.lower[k], 1.0), (V.upper[k], -1.0)):
                if np.isfinite(b):
                    jj.append(np.arange(N + 1))
                    kk.append(np.full(N + 1, k))
                    bnd.append(np.full(N + 1, b))
                    sgn.append(np.full(N + 1, s))
        self.o_j = np.concatenate(jj).astype(int) if jj else np.zeros(0, int)
        self.o_k = np.concatenate(kk).astype(int) if kk else np.zeros(0, int)
        self.o_bnd = np.concatenate(bnd) if bnd else np.zeros(0)
        self.o_sgn = np.concatenate(sgn) if sgn else np.zeros(0)
        self.nd = self.d_idx.size
        self.nin = self.nd + self.o_j.size

        # static sparsity patterns
        self._H_rows, self._H_cols = self._hessian_pattern()
        self._A_rows, self._A_cols, self._A_pin_vals = self._jacobian_pattern()

    # packing -----------------------------------------------------------
    def pack(self, traj):
        if traj.x.shape != (self.N + 1, self.n) or traj.w.shape != (self.N, self.q):
            raise ValueError("initial trajectory does not match the problem dimensions")
        v = np.empty(self.nv)
        v[self.xidx] = traj.x
        v[self.widx] = traj.w
        return v

    def unpack(self, v):
        return v[self.xidx], v[self.widx]

    def trajectory(self, v):
        x, w = self.unpack(v)
        return EstimateTrajectory(x.copy(), w.copy(), self.spec.tau)

    # function values ---------------------------------------------------
    def residual(self, x):
        return self.y - self.model.h(x, self.u)

    def objective(self, v):
        x, w = self.unpack(v)
        r = self.residual(x)
        e = np.einsum("jk,jkl->jl", r, self.LW)
        return float(np.sum((w @ self.spec.weights.LQ) ** 2) + np.sum(e * e))

    def eq_constraints(self, v):
        x, w = self.unpack(v)
        c = [(x[1:] - self.model.f(x[:-1], self.u[:-1], w)).ravel()]
        for ix, pin in self.pins:
            c.append(v[ix] - pin)
        return np.concatenate(c)

    def in_constraints(self, v, x=None):
        if self.nin == 0:
            return np.zeros(0)
        cd = self.d_sgn * (v[self.d_idx] - self.d_bnd)
        if self.o_j.size == 0:
            return cd
        if x is None:
            x = v[self.xidx]
        r = self.residual(x)
        co = self.o_sgn * (r[self.o_j, self.o_k] - self.o_bnd)
        return np.concatenate([cd, co])

    # derivatives -------------------------------------------------------
    def _hessian_pattern(self):
        X, W = self.xidx, self.widx
        rx = np.broadcast_to(X[:, :, None], (self.N + 1, self.n, self.n))
        cx = np.broadcast_to(X[:, None, :], (self.N + 1, self.n, self.n))
        rw = np.broadcast_to(W[:, :, None], (self.N, self.q, self.q))
        cw = np.broadcast_to(W[:, None, :], (self.N, self.q, self.q))
        return np.concatenate([rx.ravel(), rw.ravel()]), np.concatenate([cx.ravel(), cw.ravel()])

    def _jacobian_pattern(self):
        N, n, q, X, W = self.N, self.n, self.q, self.xidx, self.widx
        drow = np.arange(N * n).reshape(N, n)
        rows = [drow.ravel(),
                np.broadcast_to(drow[:, :, None], (N, n, n)).ravel(),
                np.broadcast_to(drow[:, :, None], (N, n, q)).ravel()]
        cols = [X[1:].ravel(),
                np.broadcast_to(X[:-1, None, :], (N, n, n)).ravel(),
                np.broadcast_to(W[:, None, :], (N, n, q)).ravel()]
        off = N * n
        for ix, _ in self.pins:
            rows.append(off + np.arange(n))
            cols.append(ix)
            off += n
        return np.concatenate(rows), np.concatenate(cols), np.ones(n * len(self.pins))

    def evaluate(self, v, lam=None):
        N, model = self.N, self.model
        x, w = self.unpack(v)
        u = self.u
        r = self.residual(x)
        Hx = model.h_jac(x, u)
        WrHx = np.einsum("jkl,jln->jkn", self.Wr, Hx)
        e = np.einsum("jk,jkl->jl", r, self.LW)
        J = float(np.sum((w @ self.spec.weights.LQ) ** 2) + np.sum(e * e))
        grad = np.zeros(self.nv)
        grad[self.xidx] = -2.0 * np.einsum("jkn,jk->jn", WrHx, r)
        grad[self.widx] = 2.0 * w @ self.Q
        Hxx = 2.0 * np.einsum("jkn,jkm->jnm", Hx, WrHx)
        if lam is not None and N > 0:
            Fxx = model.f_xx(x[:-1], u[:-1], w)
            if Fxx is not None:
                # Lagrangian curvature of x_{j+1} - f(x_j) = 0, kept positive semidefinite
                Hxx[:N] -= np.einsum("ji,jinm->jnm", lam[: N * self.n].reshape(N, self.n), Fxx)
                ev, V = np.linalg.eigh(Hxx)
                Hxx = np.einsum("jnk,jk,jmk->jnm", V, np.maximum(ev, 0.0), V)
        Hww = np.broadcast_to(2.0 * self.Q, (N, self.q, self.q))
        H = sp.csc_matrix(
            (np.concatenate([Hxx.ravel(), Hww.ravel()]), (self._H_rows, self._H_cols)),
            shape=(self.nv, self.nv),
        )
        ceq = self.eq_constraints(v)
        if N > 0:
            fx, fw = model.f_jac(x[:-1], u[:-1], w)
            avals = np.concatenate([np.ones(N * self.n), -fx.ravel(), -fw.ravel(), self._A_pin_vals])
        else:
            avals = self._A_pin_vals
        A = sp.csc_matrix((avals, (self._A_rows, self._A_cols)), shape=(self.neq, self.nv))
        cin = np.zeros(0)
        G = sp.csc_matrix((0, self.nv))
        if self.nin:
            cd = self.d_sgn * (v[self.d_idx] - self.d_bnd)
            rows = [np.arange(self.nd)]
            cols = [self.d_idx]
            vals = [self.d_sgn]
            cin = cd
            if self.o_j.size:
                co = self.o_sgn * (r[self.o_j, self.o_k] - self.o_bnd)
                cin = np.concatenate([cd, co])
                no = self.o_j.size
                rows.append(np.repeat(self.nd + np.arange(no), self.n))
                cols.append(self.xidx[self.o_j].ravel())
                vals.append((-self.o_sgn[:, None] * Hx[self.o_j, self.o_k, :]).ravel())
            G = sp.csc_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.nin, self.nv),
            )
        if not (np.isfinite(J) and np.all(np.isfinite(grad)) and np.all(np.isfinite(ceq))):
            raise FloatingPointError("non-finite function values during solve")
        return _Eval(J, grad, H, ceq, A, cin, G)

    # initialization ----------------------------------------------------
    def make_interior(self, v):
        """Move a point strictly inside all finite bounds."""
        v = v.copy()
        sets = self.spec.sets
        for box, vidx in ((sets.X, self.xidx), (sets.W, self.widx)):
            if box.has_finite_bounds and vidx.size:
                lo, hi = _pushed_bounds(box)
                v[vidx] = np.clip(v[vidx], lo, hi)
        V = sets.V
        if V.has_finite_bounds:
            lo, hi = _pushed_bounds(V)
            for _ in range(5):
                x = v[self.xidx]
                r = self.residual(x)
                target = np.clip(r, lo, hi)
                if np.all(target == r):
                    break
                Hx = self.model.h_jac(x, self.u)
                dx = np.einsum("jnk,jk->jn", np.linalg.pinv(Hx), r - target)
                v[self.xidx] = x + dx
        return v


def _pushed_bounds(box):
    lo, hi = box.lower.copy(), box.upper.copy()
    width = hi - lo
    fl, fh = np.isfinite(lo), np.isfinite(hi)
    pl = np.where(fl, _PUSH * np.maximum(1.0, np.abs(np.where(fl, lo, 0.0))), 0.0)
    ph = np.where(fh, _PUSH * np.maximum(1.0, np.abs(np.where(fh, hi, 0.0))), 0.0)
    both = fl & fh
    pl = np.where(both, np.minimum(pl, 0.5 * _PUSH * width + 0.0), pl)
    ph = np.where(both, np.minimum(ph, 0.5 * _PUSH * width + 0.0), ph)
    # degenerate boxes cannot be entered; the barrier start fails later
    return lo + pl, hi - ph


@dataclass
class _Eval:
    J: float
    grad: np.ndarray
    H: sp.spmatrix
    ceq: np.ndarray
    A: sp.spmatrix
    cin: np.ndarray
    G: sp.spmatrix


def _inf_norm(a):
    return float(np.max(np.abs(a))) if a.size else 0.0


class _KKTSolver:
    """Sparse LU of the KKT matrix with regularization and iterative refinement.

    The factorized matrix carries a small primal regularization (larger when
    the first attempt is singular); solutions are refined against the
    unregularized matrix so the regularization does not bias the step.
    """

    def __init__(self, K_upper, A):
        nv, neq = K_upper.shape[0], A.shape[0]
        self.K = sp.bmat([[K_upper, A.T], [A, None]], format="csc") if neq else K_upper.tocsc()
        delta, delta_c = 1e-10, 0.0
        for _ in range(8):
            reg = [delta] * nv + [-delta_c] * neq
            try:
                self.lu = spla.splu((self.K + sp.diags(reg)).tocsc())
                return
            except RuntimeError:
                delta *= 100.0
                delta_c = max(delta_c * 100.0, 1e-12)
        raise np.linalg.LinAlgError("KKT matrix could not be factorized")

    def solve(self, rhs, refine=3):
        sol = self.lu.solve(rhs)
        for _ in range(refine):
            res = rhs - self.K @ sol
            if not np.all(np.isfinite(res)):
                break
            sol = sol + self.lu.solve(res)
        return sol


def default_initializer(spec):
    """Deterministic starting trajectory for a ProblemSpec.

    ``x_0`` is the pinned initial state if present, otherwise the least-squares
    inversion of the first measurement when ``h`` has full column rank, and
    the model's prior otherwise. The remaining states follow the dynamics with
    ``w = 0``; a terminal pin overrides ``x_N``.
    """
    model, data, N = spec.model, spec.data, spec.N
    if spec.pin_initial is not None:
        x0 = spec.pin_initial.copy()
    else:
        x0 = model.x_prior.astype(float).copy()
        u0, y0 = data.u[0], data.y[0]
        if np.linalg.matrix_rank(model.h_jac(x0, u0)) == model.n:
            for _ in range(20):
                r = y0 - model.h(x0, u0)
                dx = np.linalg.lstsq(model.h_jac(x0, u0), r, rcond=None)[0]
                x0 = x0 + dx
                if np.max(np.abs(dx)) <= 1e-14 * (1.0 + np.max(np.abs(x0))):
                    break
    x = np.empty((N + 1, model.n))
    x[0] = x0
    w = np.zeros((N, model.q))
    for j in range(N):
        x[j + 1] = model.f(x[j], data.u[j], w[j])
    if not np.all(np.isfinite(x)):
        x[:] = x0
    if spec.pin_terminal is not None:
        x[N] = spec.pin_terminal
    return EstimateTrajectory(x, w, spec.tau)


def warm_start_from(overlap, spec):
    """Initializer that reuses ``overlap`` where its absolute indices fall inside ``spec``.

    Indices before the overlap come from :func:`default_initializer`; the tail
    after the last copied state is extended by simulation with ``w = 0``.
    """
    base = default_initializer(spec)
    lo = max(spec.tau, overlap.start)
    hi = min(spec.tau + spec.N, overlap.start + overlap.N)
    if lo > hi:
        return base
    x, w = base.x.copy(), base.w.copy()
    a, b = lo - spec.tau, hi - spec.tau
    oa = lo - overlap.start
    x[a : b + 1] = overlap.x[oa : oa + b - a + 1]
    if b > a:
        w[a:b] = overlap.w[oa : oa + b - a]
    model, data = spec.model, spec.data
    for j in range(b, spec.N):
        w[j] = 0.0
        x[j + 1] = model.f(x[j], data.u[j], w[j])
    return EstimateTrajectory(x, w, spec.tau)


def _kkt_parts(ev, lam, z):
    stat = ev.grad + ev.A.T @ lam
    if ev.cin.size:
        stat = stat - ev.G.T @ z
    return _inf_norm(stat), _inf_norm(ev.ceq)


def _report(nlp, v, status, iterations, kkt, mu, history):
    v = v.copy()
    for ix, pin in nlp.pins:
        # equality holds to roundoff; report the pins bit-exactly
        v[ix] = pin
    traj = nlp.trajectory(v)
    cin = nlp.in_constraints(v)
    viol = max(_inf_norm(nlp.eq_constraints(v)), float(np.max(-cin, initial=0.0)))
    obj = total_cost(nlp.spec.weights, traj, nlp.spec.data, nlp.spec.model)
    return SolveReport(traj, obj, kkt, iterations, status, viol, mu, history)


def _restore(nlp, v, max_iter=100):
    """Reduce the equality violation while staying strictly interior.

    Returns the new point and its violation. A violation that stays above
    ``_RESTORE_VIOLATION`` signals an infeasible problem.
    """
    for mu in (1e-2, 1e-4, 1e-6, 1e-8):
        if nlp.nin == 0:
            mu = 0.0
        for _ in range(max_iter):
            ev = nlp.evaluate(v)
            viol = _inf_norm(ev.ceq)
            if viol <= 1e-12:
                return v, viol
            M = (ev.A.T @ ev.A).tocsc()
            g = ev.A.T @ ev.ceq
            if nlp.nin:
                M = M + (ev.G.T @ sp.diags(mu / ev.cin**2) @ ev.G)
                g = g - mu * (ev.G.T @ (1.0 / ev.cin))
            M = M + 1e-8 * sp.identity(nlp.nv, format="csc")
            try:
                d = -spla.splu(M.tocsc()).solve(g)
            except RuntimeError:
                break
            if not np.all(np.isfinite(d)):
                break

            alpha = _max_step(ev.cin, ev.G @ d, 0.99) if nlp.nin else 1.0
            psi0 = _restoration_merit(nlp, v, ev.cin, mu)
            slope = float(g @ d)
            accepted = False
            while alpha > 1e-10:
                vt = v + alpha * d
                ct = nlp.in_constraints(vt)
                if ct.size == 0 or np.all(ct > 0):
                    if _restoration_merit(nlp, vt, ct, mu) <= psi0 + _ARMIJO * alpha * slope:
                        accepted = True
                        break
                alpha *= 0.5
            if not accepted:
                break
            v = vt
        if nlp.nin == 0:
            break
    return v, _inf_norm(nlp.eq_constraints(v))


def _restoration_merit(nlp, v, cin, mu):
    ce = nlp.eq_constraints(v)
    val = 0.5 * float(ce @ ce)
    if cin.size:
        val -= mu * float(np.sum(np.log(cin)))
    return val


def _max_step(c, dc, frac):
    neg = dc < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-frac * c[neg] / dc[neg])))


def solve(spec, init=None, tol=None):
    """Solve the estimation NLP described by ``spec``.

    Parameters
    ----------
    spec : ProblemSpec
    init : EstimateTrajectory, optional
        Starting point; :func:`default_initializer` when omitted.
    tol : ToleranceConfig, optional

    Returns
    -------
    SolveReport
        ``status`` is ``"converged"``, ``"max_iter"`` (best iterate returned)
        or ``"infeasible"``.
    """
    tol = tol or ToleranceConfig()
    nlp = _NLP(spec)
    v = nlp.pack(init if init is not None else default_initializer(spec))
    v = nlp.make_interior(v)
    history = []

    has_bounds = nlp.nin > 0
    mu = tol.mu_init if has_bounds else 0.0
    cin = nlp.in_constraints(v)
    if has_bounds and np.any(cin <= 0):
        return _report(nlp, v, INFEASIBLE, 0, np.inf, mu, history)
    z = mu / cin if has_bounds else np.zeros(0)
    lam = np.zeros(nlp.neq)
    nu = 0.0
    restorations = 0
    status, kkt, it = MAX_ITER, np.inf, 0

    for it in range(tol.max_iter + 1):
        ev = nlp.evaluate(v, lam)
        stat, feas = _kkt_parts(ev, lam, z)
        comp = _inf_norm(ev.cin * z) if has_bounds else 0.0
        kkt = max(stat, feas, comp)
        if stat <= tol.tol_kkt and feas <= tol.tol_feas and comp <= tol.tol_kkt and mu <= tol.mu_final:
            status = CONVERGED
            break
        if has_bounds:
            while mu > tol.mu_final and max(stat, feas, _inf_norm(ev.cin * z - mu)) <= _KAPPA_EPS * mu:
                mu *= tol.mu_factor
                # penalty from early, far-off iterates would stall later stages
                nu = 0.0
        if it == tol.max_iter:
            break

        # Newton step on the barrier subproblem
        K = ev.H
        grad_phi = ev.grad
        if has_bounds:
            sigma = z / ev.cin
            K = K + ev.G.T @ sp.diags(sigma) @ ev.G
            grad_phi = ev.grad - mu * (ev.G.T @ (1.0 / ev.cin))
        lu = _KKTSolver(K.tocsc(), ev.A)
        rhs = np.concatenate([-grad_phi, -ev.ceq])
        sol = lu.solve(rhs)
        d, lam_plus = sol[: nlp.nv], sol[nlp.nv :]
        if has_bounds:
            Gd = ev.G @ d
            dz = mu / ev.cin - z - sigma * Gd
            frac = max(0.99, 1.0 - mu)
            alpha_max = _max_step(ev.cin, Gd, frac)
            alpha_z = _max_step(z, dz, frac)
        else:
            alpha_max, alpha_z = 1.0, 1.0

        nu = max(nu, 1.1 * _inf_norm(lam_plus) + 1e-8)
        l1 = float(np.sum(np.abs(ev.ceq)))

        def merit(vv, cc, ce):
            val = nlp.objective(vv) + nu * float(np.sum(np.abs(ce)))
            if has_bounds:
                val -= mu * float(np.sum(np.log(cc)))
            return val

        phi0 = merit(v, ev.cin, ev.ceq)
        slope = float(grad_phi @ d) - nu * l1
        slack = 10.0 * np.finfo(float).eps * (1.0 + abs(phi0))
        alpha = alpha_max
        accepted, vt, phit = False, None, None
        first = True
        while alpha >= _ALPHA_MIN:
            vt = v + alpha * d
            ct = nlp.in_constraints(vt)
            if not has_bounds or np.all(ct > 0):
                cet = nlp.eq_constraints(vt)
                phit = merit(vt, ct, cet)
                if phit <= phi0 + _ARMIJO * alpha * slope + slack:
                    accepted = True
                    break
                if first and _inf_norm(cet) > 0:
                    # second-order correction against the Maratos effect
                    c_soc = alpha * ev.ceq + cet
                    sol_c = lu.solve(np.concatenate([-grad_phi, -c_soc]))
                    d_c = sol_c[: nlp.nv]
                    a_c = _max_step(ev.cin, ev.G @ d_c, max(0.99, 1.0 - mu)) if has_bounds else 1.0
                    vc = v + a_c * d_c
                    cc = nlp.in_constraints(vc)
                    if not has_bounds or np.all(cc > 0):
                        cec = nlp.eq_constraints(vc)
                        phic = merit(vc, cc, cec)
                        if phic <= phi0 + _ARMIJO * alpha * slope + slack:
                            vt, phit, accepted = vc, phic, True
                            break
            first = False
            alpha *= 0.5

        if not accepted:
            if feas > _RESTORE_VIOLATION and restorations < 3:
                restorations += 1
                v, viol = _restore(nlp, v)
                if viol > _RESTORE_VIOLATION:
                    log.info("feasibility restoration stalled at violation %.3e", viol)
                    return _report(nlp, v, INFEASIBLE, it + 1, kkt, mu, history)
                lam = np.zeros(nlp.neq)
                if has_bounds:
                    z = mu / nlp.in_constraints(v)
                continue
            log.info("line search failed at iteration %d (kkt %.3e)", it, kkt)
            break

        history.append((mu, nu, phi0, phit))
        v = vt
        lam = lam + alpha * (lam_plus - lam) if alpha < 1.0 else lam_plus
        if has_bounds:
            z = z + alpha_z * dz
            ct = nlp.in_constraints(v)
            z = np.clip(z, mu / (_KAPPA_SIGMA * ct), _KAPPA_SIGMA * mu / ct)

    return _report(nlp, v, status, it, kkt, mu, history)


def kkt_residual(spec, traj):
    """First-order optimality error of a trajectory without given multipliers.

    Equality and bound multipliers are fitted by least squares on the
    stationarity condition, with the complementarity products ``z * slack``
    added to the fitted residual; negative bound multipliers are then clipped
    to zero. Returns the largest of the stationarity residual, equality
    violation, bound violation and complementarity.
    """
    nlp = _NLP(spec)
    v = nlp.pack(traj)
    ev = nlp.evaluate(v)
    viol = float(np.max(-ev.cin, initial=0.0))
    nin = ev.cin.size
    M = sp.hstack([ev.A.T, -ev.G.T], format="csc") if nin else ev.A.T.tocsc()
    ncol = M.shape[1]
    lam, z = np.zeros(nlp.neq), np.zeros(nin)
    if ncol:
        pen = np.concatenate([np.zeros(nlp.neq), np.maximum(ev.cin, 0.0) ** 2])
        MtM = (M.T @ M + sp.diags(pen + 1e-14)).tocsc()
        lu = spla.splu(MtM)
        mult = lu.solve(-(M.T @ ev.grad))
        for _ in range(2):
            mult = mult + lu.solve(-(M.T @ (ev.grad + M @ mult)) - pen * mult)
        lam, z = mult[: nlp.neq], np.maximum(mult[nlp.neq :], 0.0)
    stat = ev.grad + ev.A.T @ lam
    if nin:
        stat = stat - ev.G.T @ z
    comp = _inf_norm(z * ev.cin) if nin else 0.0
    return max(_inf_norm(stat), _inf_norm(ev.ceq), viol, comp)
