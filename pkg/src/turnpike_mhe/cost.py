"""Quadratic estimation objective and its first derivatives.

Stage cost ``|w|_Q^2 + |y - h(x, u)|_R^2`` and terminal cost
``|y - h(x, u)|_G^2`` (filtering form) or zero (prediction form).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "CostWeights",
    "EstimateTrajectory",
    "stage_cost",
    "terminal_cost",
    "total_cost",
    "cost_gradient",
    "weighted_sq_norm",
]

FILTERING = "filtering"
PREDICTION = "prediction"


def _spd(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise ValueError(f"{name} must be symmetric")
    try:
        L = scipy.linalg.cholesky(M, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{name} must be positive definite") from exc
    return M, L


class CostWeights:
    """Weights of the quadratic objective.

    Parameters
    ----------
    Q : array_like, (q, q)
        Disturbance weight.
    R : array_like, (p, p)
        Fitting-error weight for stages ``0 .. T-1``.
    G : array_like, (p, p), optional
        Terminal fitting-error weight. Defaults to ``R``.
    terminal_mode : {"filtering", "prediction"}
        ``"prediction"`` drops the terminal cost.
    """

    def __init__(self, Q, R, G=None, terminal_mode=FILTERING):
        if terminal_mode not in (FILTERING, PREDICTION):
            raise ValueError(f"unknown terminal_mode {terminal_mode!r}")
        self.Q, self.LQ = _spd(Q, "Q")
        self.R, self.LR = _spd(R, "R")
        self.G, self.LG = _spd(self.R if G is None else G, "G")
        if self.G.shape != self.R.shape:
            raise ValueError("G and R must have the same shape")
        self.terminal_mode = terminal_mode
        self.lam_max_Q = float(np.linalg.eigvalsh(self.Q)[-1])
        self.lam_max_R = float(np.linalg.eigvalsh(self.R)[-1])
        self.lam_max_G = float(np.linalg.eigvalsh(self.G)[-1])

    @classmethod
    def identity(cls, q, p, terminal_mode=FILTERING):
        return cls(np.eye(q), np.eye(p), np.eye(p), terminal_mode)

    @property
    def q(self):
        return self.Q.shape[0]

    @property
    def p(self):
        return self.R.shape[0]

    @property
    def filtering(self):
        return self.terminal_mode == FILTERING

    def scaled(self, factor):
        return CostWeights(self.Q * factor, self.R * factor, self.G * factor, self.terminal_mode)

    def to_dict(self):
        return {"Q": self.Q.tolist(), "R": self.R.tolist(), "G": self.G.tolist(),
                "terminal_mode": self.terminal_mode}

    @classmethod
    def from_dict(cls, d):
        return cls(d["Q"], d["R"], d.get("G"), d.get("terminal_mode", FILTERING))

    def fingerprint(self):
        return repr((self.Q.tolist(), self.R.tolist(), self.G.tolist(), self.terminal_mode))

    def __repr__(self):
        return f"CostWeights(Q={self.Q.tolist()}, R={self.R.tolist()}, G={self.G.tolist()}, {self.terminal_mode})"


def weighted_sq_norm(r, L):
    """``r^T M r`` for ``M = L L^T``, evaluated as ``|L^T r|^2`` along the last axis."""
    e = np.asarray(r, dtype=float) @ L
    return np.sum(e * e, axis=-1)


@dataclass(frozen=True, eq=False)
class EstimateTrajectory:
    """States ``x[0..N]`` and disturbances ``w[0..N-1]``.

    ``start`` is the absolute time index of ``x[0]``.
    """

    x: np.ndarray
    w: np.ndarray
    start: int = 0

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w.reshape(x.shape[0] - 1, -1) if w.size else np.zeros((x.shape[0] - 1, 0))
        if w.shape[0] != x.shape[0] - 1:
            raise ValueError(f"inconsistent lengths: {x.shape[0]} states, {w.shape[0]} disturbances")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w)

    @property
    def N(self):
        return self.x.shape[0] - 1

    @property
    def z(self):
        """Stacked ``(x_j, w_j)`` with ``w = 0`` appended at the last index."""
        w = np.vstack([self.w, np.zeros((1, self.w.shape[1]))])
        return np.hstack([self.x, w])

    def dynamics_residual(self, model, data):
        """``max_j |x[j+1] - f(x[j], u[j], w[j])|_inf``."""
        if self.N == 0:
            return 0.0
        u = data.u[: self.N]
        return float(np.max(np.abs(self.x[1:] - model.f(self.x[:-1], u, self.w))))

    def is_feasible(self, model, data, tol=1e-8):
        return self.dynamics_residual(model, data) <= tol


def _check_pair(weights, model, x, w, u, y):
    if x.shape[-1] != model.n or y.shape[-1] != model.p or u.shape[-1] != model.m:
        raise ValueError("dimension mismatch between point, data and model")
    if w is not None and w.shape[-1] != weights.q:
        raise ValueError("dimension mismatch between disturbance and Q")
    if y.shape[-1] != weights.p:
        raise ValueError("dimension mismatch between output and R")


def stage_cost(weights, x, w, d, model):
    """``|w|_Q^2 + |y - h(x, u)|_R^2`` for a data pair ``d = (u, y)``."""
    u, y = (np.atleast_1d(np.asarray(a, dtype=float)) for a in d)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    _check_pair(weights, model, x, w, u, y)
    r = y - model.h(x, u)
    return float(weighted_sq_norm(w, weights.LQ) + weighted_sq_norm(r, weights.LR))


def terminal_cost(weights, x, d, model):
    u, y = (np.atleast_1d(np.asarray(a, dtype=float)) for a in d)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _check_pair(weights, model, x, None, u, y)
    if not weights.filtering:
        return 0.0
    return float(weighted_sq_norm(y - model.h(x, u), weights.LG))


def _check_traj(traj, data):
    if traj.N != data.T:
        raise ValueError(f"trajectory covers {traj.N + 1} points, data {data.T + 1}")


def total_cost(weights, traj, data, model):
    """Sum of stage costs over ``j < N`` plus the terminal cost at ``N``."""
    _check_traj(traj, data)
    N = traj.N
    r = data.y - model.h(traj.x, data.u)
    J = np.sum(weighted_sq_norm(traj.w, weights.LQ)) + np.sum(weighted_sq_norm(r[:N], weights.LR))
    if weights.filtering:
        J += weighted_sq_norm(r[N], weights.LG)
    return float(J)


def cost_gradient(weights, traj, data, model):
    """Analytic gradient of :func:`total_cost`; returns ``(grad_x, grad_w)``."""
    _check_traj(traj, data)
    N = traj.N
    r = data.y - model.h(traj.x, data.u)
    Hx = model.h_jac(traj.x, data.u)
    Wr = np.empty((N + 1, weights.p, weights.p))
    Wr[:N] = weights.R
    Wr[N] = weights.G if weights.filtering else 0.0
    gx = -2.0 * np.einsum("jpn,jpk,jk->jn", Hx, Wr, r)
    gw = 2.0 * traj.w @ weights.Q
    if not (np.all(np.isfinite(gx)) and np.all(np.isfinite(gw))):
        raise FloatingPointError("non-finite cost gradient")
    return gx, gw
