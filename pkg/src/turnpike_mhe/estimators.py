"""Estimators assembled from window solves: FIE, truncated windows, the
stitched approximate estimator and moving horizon estimation."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .cost import EstimateTrajectory
from .solver import ProblemSpec, SolverError, ToleranceConfig, solve

__all__ = [
    "WindowSolution",
    "ApproxEstimate",
    "MHEEstimate",
    "WindowCache",
    "solve_window",
    "fie_reference",
    "ae_index_map",
    "approximate_estimator",
    "mhe_sequence",
    "write_estimate_csv",
]


@dataclass(frozen=True, eq=False)
class WindowSolution:
    """Solution of the truncated problem on ``d[tau:tau+N]``."""

    tau: int
    N: int
    report: object

    @property
    def trajectory(self):
        return self.report.trajectory


def _config_key(model, sets, weights, tol):
    return json.dumps(
        [model.fingerprint(), sets.to_dict(), weights.fingerprint(), (tol or ToleranceConfig()).to_dict()], sort_keys=True
    )


class WindowCache:
    """In-memory store of window reports keyed by ``(tau, N, data digest, config)``.

    The digest is taken over the full data record, so windows from different
    records never collide.
    """

    def __init__(self):
        self._store = {}
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(tau, N, data, model, sets, weights, tol):
        return (int(tau), int(N), data.digest(), _config_key(model, sets, weights, tol))

    def get(self, key):
        rep = self._store.get(key)
        if rep is None:
            self.misses += 1
        else:
            self.hits += 1
        return rep

    def put(self, key, report):
        self._store[key] = report

    def __len__(self):
        return len(self._store)

    def __contains__(self, key):
        return key in self._store


def _solve_task(args):
    tau, N, data, model, sets, weights, tol = args
    spec = ProblemSpec(data.window(tau, N), model, sets, weights, tau=tau)
    return solve(spec, tol=tol)


def _checked(report, tau, N):
    if not report.converged:
        raise SolverError(
            f"window [{tau}, {tau + N}] ended with status {report.status} "
            f"(kkt {report.kkt_residual:.3e})",
            report,
        )
    return report


def _solve_many(windows, data, model, sets, weights, tol, parallel=False, cache=None, check=True):
    """Reports for each ``(tau, N)`` in ``windows`` in input order.

    Every window starts from the default initializer, so a window's result
    does not depend on which other windows were solved, or in what order.
    """
    tol = tol or ToleranceConfig()
    out = {}
    todo = []
    for tau, N in windows:
        key = WindowCache.key(tau, N, data, model, sets, weights, tol) if cache is not None else None
        rep = cache.get(key) if cache is not None else None
        if rep is None:
            todo.append((tau, N, key))
        else:
            out[(tau, N)] = rep
    args = [(tau, N, data, model, sets, weights, tol) for tau, N, _ in todo]
    workers = int(parallel) if not isinstance(parallel, bool) else (0 if not parallel else None)
    if args and workers != 0 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_solve_task, args, chunksize=max(1, len(args) // 32)))
    else:
        reports = [_solve_task(a) for a in args]
    for (tau, N, key), rep in zip(todo, reports):
        out[(tau, N)] = rep
        if cache is not None and rep.converged:
            cache.put(key, rep)
    if not check:
        return [out[w] for w in windows]
    return [_checked(out[w], *w) for w in windows]


def solve_window(data, tau, N, model, sets, weights, tol=None, cache=None):
    """Solve the truncated problem on ``d[tau:tau+N]``; raises SolverError unless converged."""
    if not 0 <= tau <= tau + N <= data.T:
        raise IndexError(f"window [{tau}, {tau + N}] outside [0, {data.T}]")
    (rep,) = _solve_many([(tau, N)], data, model, sets, weights, tol, cache=cache)
    return WindowSolution(tau, N, rep)


def fie_reference(data, model, sets, weights, tol=None, cache=None):
    """Full information estimate over the whole record."""
    return solve_window(data, 0, data.T, model, sets, weights, tol, cache).report


def ae_index_map(T, N):
    """Per index ``j``: the window start and the offset inside it.

    Returns an int array of shape (T+1, 2). Indices up to ``N/2`` come from
    the first window, indices from ``T - N/2`` on from the last, and every
    index in between from the window centred on it.
    """
    if N % 2:
        raise ValueError(f"window length must be even, got N={N}")
    if not 0 <= N <= T:
        raise ValueError(f"need 0 <= N <= T, got N={N}, T={T}")
    h = N // 2
    j = np.arange(T + 1)
    tau = np.clip(j - h, 0, T - N)
    return np.stack([tau, j - tau], axis=1)


@dataclass(frozen=True, eq=False)
class ApproxEstimate:
    x_ae: np.ndarray
    w_ae: np.ndarray
    windows_used: list
    N: int
    source: np.ndarray
    windows: dict

    @property
    def trajectory(self):
        return EstimateTrajectory(self.x_ae, self.w_ae)


def _require_additive(model):
    if not model.additive:
        raise ValueError(f"{model.name} is not additive; disturbances cannot be recovered from states")


def _recover_w(model, x, u):
    return x[1:] - model.f_a(x[:-1], u[: x.shape[0] - 1])


def approximate_estimator(data, N, model, sets, weights, tol=None, parallel=False, cache=None):
    """Stitch window solutions into a trajectory over ``[0, T]``.

    ``parallel`` is False, True (one worker per CPU) or a worker count.
    """
    _require_additive(model)
    T = data.T
    src = ae_index_map(T, N)
    windows = [(tau, N) for tau in range(T - N + 1)]
    reports = _solve_many(windows, data, model, sets, weights, tol, parallel, cache)
    by_tau = dict(zip(range(T - N + 1), reports))
    x = np.empty((T + 1, model.n))
    for j, (tau, off) in enumerate(src):
        x[j] = by_tau[tau].trajectory.x[off]
    w = _recover_w(model, x, data.u)
    return ApproxEstimate(
        x_ae=x,
        w_ae=w,
        windows_used=[(int(tau), N) for tau in src[:, 0]],
        N=N,
        source=src,
        windows={(tau, N): rep for tau, rep in by_tau.items()},
    )


@dataclass(frozen=True, eq=False)
class MHEEstimate:
    x_mhe: np.ndarray
    w_mhe: np.ndarray
    N: int
    source: np.ndarray

    @property
    def trajectory(self):
        return EstimateTrajectory(self.x_mhe, self.w_mhe)


def mhe_sequence(data, N, model, sets, weights, tol=None, parallel=False, cache=None):
    """Terminal states of the moving windows ``d[max(0, t-N):t]``.

    For ``t < N`` the window grows from time 0, so the estimate coincides
    with the full information estimate on ``d[0:t]``.
    """
    _require_additive(model)
    if N < 1:
        raise ValueError("MHE needs N >= 1")
    T = data.T
    windows = [(max(0, t - N), min(t, N)) for t in range(T + 1)]
    reports = _solve_many(windows, data, model, sets, weights, tol, parallel, cache)
    x = np.stack([rep.trajectory.x[-1] for rep in reports])
    w = _recover_w(model, x, data.u)
    src = np.array([(tau, n) for tau, n in windows])
    return MHEEstimate(x, w, N, src)


def write_estimate_csv(path, x, w, source=None):
    """Rows ``j, x.., w.., source_tau, source_offset``; ``w`` is blank at the last index."""
    n, q = x.shape[1], w.shape[1]
    T = x.shape[0] - 1
    header = ["j", *(f"x_{i}" for i in range(n)), *(f"w_{i}" for i in range(q)), "source_tau", "source_offset"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for j in range(T + 1):
            wj = [repr(float(v)) for v in w[j]] if j < T else [""] * q
            s = ["", ""] if source is None else [int(source[j][0]), int(source[j][1])]
            wr.writerow([j, *(repr(float(v)) for v in x[j]), *wj, *s])
