"""Performance of candidate estimates relative to the optimal full-record cost."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .cost import EstimateTrajectory, total_cost, weighted_sq_norm

__all__ = [
    "PerfReport",
    "perf_report",
    "sne",
    "sigma",
    "performance_bound",
    "linear_growth_constants",
    "averaged_performance",
    "box_quadratic_max",
    "averaged_bound_excess",
]

#: vertex enumeration limit for quadratic maxima over boxes
MAX_VERTEX_DIM = 8


@dataclass(frozen=True)
class PerfReport:
    J_candidate: float
    V_T: float
    gap: float
    gap_relative: float
    averaged: float
    bound: float | None = None
    sne: float | None = None

    def to_dict(self):
        return asdict(self)


def sne(x_hat, x_true):
    """Sum over time of the Euclidean state errors."""
    x_hat, x_true = np.asarray(x_hat, float), np.asarray(x_true, float)
    if x_hat.shape != x_true.shape:
        raise ValueError(f"shape mismatch {x_hat.shape} vs {x_true.shape}")
    return float(np.sum(np.linalg.norm(x_hat - x_true, axis=-1)))


def _as_traj(candidate):
    if isinstance(candidate, EstimateTrajectory):
        return candidate
    x, w = candidate
    return EstimateTrajectory(np.asarray(x, float), np.asarray(w, float))


def perf_report(candidate, reference, data, weights, model, true_states=None, bound=None,
                feas_tol=1e-6):
    """Cost of ``candidate`` against the optimal value in ``reference``.

    ``candidate`` is an EstimateTrajectory or an ``(x, w)`` pair and must
    satisfy the dynamics to ``feas_tol``.
    """
    traj = _as_traj(candidate)
    if traj.N != reference.trajectory.N or traj.N != data.T:
        raise ValueError(f"horizon mismatch: candidate {traj.N}, reference {reference.trajectory.N}, data {data.T}")
    res = traj.dynamics_residual(model, data)
    if res > feas_tol:
        raise ValueError(f"candidate violates the dynamics by {res:.3e}")
    J = total_cost(weights, traj, data, model)
    V = float(reference.objective)
    gap = J - V
    return PerfReport(
        J_candidate=J,
        V_T=V,
        gap=gap,
        gap_relative=gap / max(V, 1e-12),
        averaged=J / data.T if data.T else J,
        bound=bound,
        sne=None if true_states is None else sne(traj.x, true_states),
    )


def sigma(s, envelope):
    """``2 * beta(s / 2)`` for the fitted envelope."""
    return 2.0 * envelope.c * envelope.rho ** (np.asarray(s, dtype=float) / 2.0)


def _sigma_terms(N, envelope, L_f, L_h, weights):
    s2 = float(sigma(N, envelope)) ** 2
    s1 = ((1.0 + L_f) ** 2 * weights.lam_max_Q**2 + L_h**2 * weights.lam_max_R**2) * s2
    s2_term = L_h**2 * weights.lam_max_G**2 * s2
    return s1, s2_term


def performance_bound(epsilon, N, T, envelope, L_f, L_h, weights, V_T):
    """Upper bound on the cost of the stitched estimate.

    ``(1 + eps) V_T + (1 + eps) / eps * (T s1(N) + s2(N))`` where ``s1`` and
    ``s2`` scale the squared envelope term ``sigma(N)**2`` by Lipschitz
    constants and the largest weight eigenvalues.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    s1, s2 = _sigma_terms(N, envelope, L_f, L_h, weights)
    return (1.0 + epsilon) * V_T + (1.0 + epsilon) / epsilon * (T * s1 + s2)


def averaged_bound_excess(epsilon, N, envelope, L_f, L_h, weights, A):
    """Allowed excess of the averaged cost over the averaged optimum."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    s1, _ = _sigma_terms(N, envelope, L_f, L_h, weights)
    return epsilon * A + (1.0 + epsilon) / epsilon * s1


def box_quadratic_max(box, M):
    """``max v^T M v`` over a compact box; ``M`` positive semidefinite."""
    if not box.is_compact:
        raise ValueError("quadratic maximum needs a compact box")
    if box.dim > MAX_VERTEX_DIM:
        raise ValueError(f"vertex enumeration limited to dimension {MAX_VERTEX_DIM}")
    # a convex function attains its maximum over a polytope at a vertex
    V = box.vertices()
    L = np.linalg.cholesky(M)
    return float(np.max(weighted_sq_norm(V, L)))


def linear_growth_constants(sets, weights, model=None):
    """``(A, B)`` with ``V_T <= A T + B`` for data generated inside ``W`` and ``V``."""
    C_Q = box_quadratic_max(sets.W, weights.Q)
    C_R = box_quadratic_max(sets.V, weights.R)
    C_G = box_quadratic_max(sets.V, weights.G)
    return C_Q + C_R, C_G


def averaged_performance(candidate, reference, data, weights, model):
    """``(J / T, V_T / T)``."""
    if data.T < 1:
        raise ValueError("averaging needs T >= 1")
    J = total_cost(weights, _as_traj(candidate), data, model)
    return J / data.T, float(reference.objective) / data.T
