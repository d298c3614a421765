"""Turnpike diagnostics: gap profiles against a reference solution,
exponential envelope fits, excursion counts and endpoint-sensitivity probes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .solver import INFEASIBLE, ProblemSpec, SolverError, ToleranceConfig, solve
from .estimators import WindowSolution, _checked, _solve_many, fie_reference

__all__ = [
    "GapProfile",
    "EnvelopeFit",
    "SensitivityProbe",
    "ScanResult",
    "gap_profile",
    "fit_envelope",
    "excursion_count",
    "sensitivity_probe",
    "turnpike_scan",
    "RHO_GRID",
]

log = logging.getLogger(__name__)

#: candidate decay rates for envelope fits
RHO_GRID = np.round(np.arange(1, 1000) * 1e-3, 3)

SIDES = ("left", "right", "two-sided")


@dataclass(frozen=True, eq=False)
class GapProfile:
    """Gaps ``g[j]`` between a window solution and the reference at ``tau + j``.

    ``weights = (a_left, a_right)`` scale the two arcs of the envelope; both
    are 1 for turnpike profiles.
    """

    tau: int
    N: int
    T: int
    gaps: np.ndarray
    weights: tuple = (1.0, 1.0)

    def __post_init__(self):
        g = np.asarray(self.gaps, dtype=float)
        if g.shape != (self.N + 1,):
            raise ValueError(f"profile for N={self.N} needs {self.N + 1} gaps, got {g.shape}")
        if np.any(g < 0) or not np.all(np.isfinite(g)):
            raise ValueError("gaps must be finite and non-negative")
        object.__setattr__(self, "gaps", g)

    @property
    def natural_side(self):
        """Arc structure expected from the window position."""
        if self.tau == 0:
            return "right"
        if self.tau == self.T - self.N:
            return "left"
        return "two-sided"

    @property
    def midpoint_gap(self):
        return float(self.gaps[self.N // 2])


def gap_profile(window, reference):
    """Profile of ``|z_window[j] - z_ref[tau + j]|`` for ``j = 0 .. N``.

    Both sides use ``w = 0`` at the window's last index, so the last gap
    compares states only.
    """
    tau, N = window.tau, window.N
    ref = reference.trajectory
    if tau < ref.start or tau + N > ref.start + ref.N:
        raise IndexError(f"window [{tau}, {tau + N}] not inside reference [{ref.start}, {ref.start + ref.N}]")
    traj = window.trajectory
    a = tau - ref.start
    zw = traj.z
    zr = np.hstack([ref.x[a : a + N + 1], np.vstack([ref.w[a : a + N], np.zeros((1, ref.w.shape[1]))])])
    if zw.shape != zr.shape:
        raise ValueError("window and reference dimensions differ")
    return GapProfile(tau, N, ref.start + ref.N, np.linalg.norm(zw - zr, axis=1))


@dataclass(frozen=True)
class EnvelopeFit:
    """Exponential upper envelope ``beta(s) = c * rho**s``."""

    c: float
    rho: float
    side: str
    residual: float = 0.0
    n_points: int = 0
    form: str = "exponential"

    def beta(self, s):
        return self.c * np.power(self.rho, np.asarray(s, dtype=float))

    def bound(self, N, side=None, weights=(1.0, 1.0)):
        """Envelope values over ``j = 0 .. N`` for the given side-form."""
        j = np.arange(N + 1)
        a_l, a_r = _arc_weights(side or self.side, weights)
        return a_l * self.beta(j) + a_r * self.beta(N - j)

    def to_dict(self):
        return {"form": self.form, "c": self.c, "rho": self.rho, "side": self.side,
                "residual": self.residual, "n_points": self.n_points}


def _arc_weights(side, weights):
    a_l, a_r = weights
    if side == "left":
        return a_l, 0.0
    if side == "right":
        return 0.0, a_r
    if side == "two-sided":
        return a_l, a_r
    raise ValueError(f"unknown side {side!r}")


def fit_envelope(profiles, side="auto", rho_grid=RHO_GRID):
    """Smallest exponential envelope that dominates every profile point.

    Each profile is bounded by ``c * (a_l * rho**j + a_r * rho**(N - j))``
    where the arc weights follow ``side`` (``"auto"`` picks each profile's
    natural side). For every ``rho`` on the grid ``c`` is the least value
    that dominates all points; the ``rho`` with the smallest summed envelope
    over the fitted points wins.
    """
    profiles = list(profiles)
    if not profiles:
        raise ValueError("no profiles to fit")
    logg, loga_l, loga_r, jj, NN = [], [], [], [], []
    sides = set()
    for p in profiles:
        s = p.natural_side if side == "auto" else side
        sides.add(s)
        a_l, a_r = _arc_weights(s, p.weights)
        j = np.arange(p.N + 1)
        with np.errstate(divide="ignore"):
            logg.append(np.log(p.gaps))
            loga_l.append(np.full(j.size, np.log(a_l)))
            loga_r.append(np.full(j.size, np.log(a_r)))
        jj.append(j)
        NN.append(np.full(j.size, p.N))
    logg, loga_l, loga_r = map(np.concatenate, (logg, loga_l, loga_r))
    jj, NN = np.concatenate(jj), np.concatenate(NN)
    fit_side = sides.pop() if len(sides) == 1 else "mixed"
    pos = np.isfinite(logg)
    npts = int(jj.size)
    if not np.any(pos):
        return EnvelopeFit(0.0, 0.5, fit_side, 0.0, npts)
    lr = np.log(np.asarray(rho_grid, dtype=float))[:, None]
    # log of the arc basis at every (rho, point)
    with np.errstate(invalid="ignore"):
        logb = np.logaddexp(loga_l + jj * lr, loga_r + (NN - jj) * lr)
    if np.any(np.isneginf(logb[:, pos])):
        raise ValueError("a positive gap has no arc to bound it for this side selection")
    logc = np.max(np.where(pos, logg - logb, -np.inf), axis=1)
    total = logc + np.log(np.sum(np.exp(logb - logb.max(axis=1, keepdims=True)), axis=1)) + logb.max(axis=1)
    k = int(np.argmin(total))
    rho = float(rho_grid[k])
    c = float(np.exp(logc[k]))
    # guard the last ulp so domination holds exactly in floating point
    env = c * np.exp(logb[k])
    ratio = np.max(np.where(pos, np.exp(logg) / np.where(env > 0, env, np.inf), 0.0))
    if ratio > 1.0:
        c *= ratio
        env = env * ratio
    resid = float(np.max(np.maximum(np.exp(logg) - env, 0.0)))
    return EnvelopeFit(c, rho, fit_side, resid, npts)


def excursion_count(profile, epsilon):
    """Number of ``j`` in ``[0, N-1]`` with ``g[j] > epsilon``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return int(np.count_nonzero(profile.gaps[: profile.N] > epsilon))


@dataclass(frozen=True, eq=False)
class SensitivityProbe:
    pins_a: tuple
    pins_b: tuple
    differences: np.ndarray
    profile: GapProfile
    fit: EnvelopeFit
    reports: tuple = field(default=(), repr=False)


def sensitivity_probe(data, N, pins_a, pins_b, model, sets, weights, tol=None, tau=0):
    """Compare two pinned solves on ``d[tau:tau+N]`` that differ only in their pins.

    ``pins_a`` and ``pins_b`` are ``(x_initial, x_terminal)`` pairs. The
    per-offset differences are fitted by a two-arc envelope whose arcs are
    scaled by the initial and terminal pin distances.
    """
    tol = tol or ToleranceConfig()
    window = data.window(tau, N)
    reports = []
    for xi, xt in (pins_a, pins_b):
        spec = ProblemSpec(window, model, sets, weights, np.asarray(xi, float), np.asarray(xt, float), tau)
        rep = solve(spec, tol=tol)
        if rep.status == INFEASIBLE:
            raise SolverError("pinned problem is infeasible for the given pins", rep)
        if not rep.converged:
            raise SolverError(f"pinned solve ended with status {rep.status}", rep)
        reports.append(rep)
    diff = np.linalg.norm(reports[0].trajectory.z - reports[1].trajectory.z, axis=1)
    d_i = float(np.linalg.norm(np.subtract(pins_a[0], pins_b[0])))
    d_t = float(np.linalg.norm(np.subtract(pins_a[1], pins_b[1])))
    prof = GapProfile(tau, N, data.T, diff, (d_i, d_t))
    if d_i == 0.0 and d_t == 0.0:
        fit = EnvelopeFit(0.0, 0.5, "two-sided", 0.0, N + 1)
    else:
        fit = fit_envelope([prof], side="two-sided")
    return SensitivityProbe(tuple(pins_a), tuple(pins_b), diff, prof, fit, tuple(reports))


@dataclass(frozen=True, eq=False)
class ScanResult:
    reference: object
    profiles: list
    failures: list

    def select(self, N=None, tau=None):
        return [p for p in self.profiles if (N is None or p.N == N) and (tau is None or p.tau == tau)]


def resolve_taus(taus, T, N):
    """Window starts for horizon ``N``; ``"end"`` stands for ``T - N``."""
    out = []
    for t in taus:
        t = T - N if t == "end" else int(t)
        if 0 <= t <= T - N and t not in out:
            out.append(t)
    return out


def turnpike_scan(data, horizons, taus, model, sets, weights, tol=None, reference=None,
                  parallel=False, cache=None):
    """Gap profiles for every ``(N, tau)`` cell against the full-record solution.

    Cells whose solve fails are listed in ``failures`` as ``(tau, N, reason)``
    and the scan continues.
    """
    tol = tol or ToleranceConfig()
    if reference is None:
        reference = fie_reference(data, model, sets, weights, tol, cache)
    cells = [(tau, N) for N in horizons for tau in resolve_taus(taus, data.T, N)]
    reports = _solve_many(cells, data, model, sets, weights, tol, parallel, cache, check=False)
    profiles, failures = [], []
    for (tau, N), rep in zip(cells, reports):
        try:
            _checked(rep, tau, N)
        except SolverError as exc:
            log.warning("scan cell tau=%d N=%d failed: %s", tau, N, exc)
            failures.append((tau, N, str(exc)))
            continue
        profiles.append(gap_profile(WindowSolution(tau, N, rep), reference))
    return ScanResult(reference, profiles, failures)
