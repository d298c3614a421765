"""Discrete-time system class, constraint boxes and scenario simulation.

Systems have the form::

    x[t+1] = f(x[t], u[t], w[t])
    y[t]   = h(x[t], u[t]) + v[t]

All model maps are vectorized over leading axes, so ``f`` accepts arrays of
shape ``(..., n)``, ``(..., m)``, ``(..., q)`` and returns ``(..., n)``.
Built-in models ship analytic Jacobians.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Box",
    "ConstraintSets",
    "DataBatch",
    "SystemModel",
    "LinearModel",
    "BatchReactor",
    "DisturbanceLaw",
    "InputLaw",
    "Scenario",
    "Simulation",
    "ScenarioError",
    "scalar_integrator",
    "estimate_lipschitz",
    "membership",
    "simulate",
    "batch_reactor_scenario",
    "motivating_scenario",
    "reset_times",
]


class ScenarioError(ValueError):
    """Raised when a scenario is inconsistent or its rollout diverges."""


def _vec(a, dim=None):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if a.ndim != 1:
        raise ValueError(f"expected a vector, got shape {a.shape}")
    if dim is not None and a.shape[0] != dim:
        raise ValueError(f"expected dimension {dim}, got {a.shape[0]}")
    return a


@dataclass(frozen=True, eq=False)
class Box:
    """Closed axis-aligned box ``{x : lower <= x <= upper}``.

    Unbounded sides are stored as ``-inf`` / ``+inf``.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _vec(self.lower)
        hi = _vec(self.upper, lo.shape[0])
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ValueError("box requires lower <= upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, dim):
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @classmethod
    def symmetric(cls, radius, dim):
        r = np.broadcast_to(np.asarray(radius, dtype=float), (dim,))
        return cls(-r, r.copy())

    @property
    def dim(self):
        return self.lower.shape[0]

    @property
    def is_compact(self):
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    @property
    def has_finite_bounds(self):
        return bool(np.any(np.isfinite(self.lower)) or np.any(np.isfinite(self.upper)))

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"dimension mismatch: box has dim {self.dim}, point has {x.shape[-1]}")
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def vertices(self):
        """All ``2**dim`` corners of a compact box as rows."""
        if not self.is_compact:
            raise ValueError("vertices of an unbounded box are undefined")
        grids = np.meshgrid(*[(lo, hi) for lo, hi in zip(self.lower, self.upper)], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1).reshape(-1, self.dim)

    def sample(self, rng, size):
        if not self.is_compact:
            raise ValueError("cannot sample uniformly from an unbounded box")
        return rng.uniform(self.lower, self.upper, size=(size, self.dim))

    def to_dict(self):
        def enc(a):
            return [None if not np.isfinite(v) else float(v) for v in a]

        return {"lower": enc(self.lower), "upper": enc(self.upper)}

    @classmethod
    def from_dict(cls, d):
        lo = [-np.inf if v is None else float(v) for v in d["lower"]]
        hi = [np.inf if v is None else float(v) for v in d["upper"]]
        return cls(np.array(lo), np.array(hi))

    def __repr__(self):
        return f"Box(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


@dataclass(frozen=True, eq=False)
class ConstraintSets:
    """Known sets for states, inputs, disturbances and measurement noise."""

    X: Box
    U: Box
    W: Box
    V: Box

    @classmethod
    def unbounded(cls, n, m, q, p):
        return cls(Box.unbounded(n), Box.unbounded(m), Box.unbounded(q), Box.unbounded(p))

    def to_dict(self):
        return {k: getattr(self, k).to_dict() for k in ("X", "U", "W", "V")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(Box.from_dict(d[k]) for k in ("X", "U", "W", "V")))


def membership(sets, x, u, w, v):
    """True iff ``(x, u, w, v)`` lies in ``X x U x W x V`` (closed boxes)."""
    return (
        sets.X.contains(_vec(x))
        and sets.U.contains(np.atleast_1d(np.asarray(u, dtype=float)))
        and sets.W.contains(_vec(w))
        and sets.V.contains(_vec(v))
    )


@dataclass(frozen=True, eq=False)
class DataBatch:
    """Input-output record ``d[0:T]``; ``u`` has shape (T+1, m), ``y`` (T+1, p)."""

    u: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        u = np.asarray(self.u, dtype=float)
        if u.ndim == 1:
            u = u[:, None] if u.size else np.zeros((y.shape[0], 0))
        if u.shape[0] != y.shape[0]:
            raise ValueError("u and y must have the same number of samples")
        if y.shape[0] < 1:
            raise ValueError("a data batch needs at least one sample")
        u.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)

    @property
    def T(self):
        return self.y.shape[0] - 1

    def __len__(self):
        return self.y.shape[0]

    def window(self, tau, N):
        """The slice ``d[tau:tau+N]`` (N+1 samples)."""
        if tau < 0 or N < 0 or tau + N > self.T:
            raise IndexError(f"window [{tau}, {tau + N}] outside [0, {self.T}]")
        return DataBatch(self.u[tau : tau + N + 1].copy(), self.y[tau : tau + N + 1].copy())

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.u).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        h.update(repr((self.u.shape, self.y.shape)).encode())
        return h.hexdigest()


class SystemModel:
    """Base class for ``x+ = f(x, u, w)``, ``y = h(x, u)``.

    Subclasses implement :meth:`f`, :meth:`f_jac`, :meth:`h` and :meth:`h_jac`.
    Models with additive disturbances set ``additive = True`` and implement
    :meth:`f_a` / :meth:`f_a_jac`; then ``f(x, u, w) = f_a(x, u) + w``.
    """

    name = "model"
    additive = False

    def __init__(self, n, m, q, p, L_f=None, L_h=None, x_prior=None):
        self.n, self.m, self.q, self.p = int(n), int(m), int(q), int(p)
        if self.additive and self.q != self.n:
            raise ValueError("additive models require q == n")
        self.L_f = L_f
        self.L_h = L_h
        self.x_prior = np.zeros(self.n) if x_prior is None else _vec(x_prior, self.n)

    # dynamics ---------------------------------------------------------
    def f(self, x, u, w):
        if self.additive:
            return self.f_a(x, u) + w
        raise NotImplementedError

    def f_jac(self, x, u, w):
        """Return ``(df/dx, df/dw)`` with shapes (..., n, n) and (..., n, q)."""
        if self.additive:
            fx = self.f_a_jac(x, u)
            fw = np.broadcast_to(np.eye(self.n), fx.shape).copy()
            return fx, fw
        raise NotImplementedError

    def f_xx(self, x, u, w):
        """Second derivatives ``d2 f_i / dx dx`` with shape (..., n, n, n), or None.

        ``None`` (the default) means the curvature is unknown and solvers fall
        back to a Gauss-Newton Hessian.
        """
        return None

    def f_a(self, x, u):
        raise NotImplementedError(f"{self.name} has no additive drift map")

    def f_a_jac(self, x, u):
        raise NotImplementedError(f"{self.name} has no additive drift map")

    # output -----------------------------------------------------------
    def h(self, x, u):
        raise NotImplementedError

    def h_jac(self, x, u):
        raise NotImplementedError

    def params(self):
        return {}

    def fingerprint(self):
        return f"{self.name}:{sorted(self.params().items())!r}:{self.x_prior.tolist()!r}"

    def __repr__(self):
        return f"{type(self).__name__}({self.params()})"


class LinearModel(SystemModel):
    """Linear time-invariant model ``x+ = A x + B u + E w``, ``y = C x + D u``.

    The model is additive when ``E`` is the identity.
    """

    def __init__(self, A, B=None, C=None, D=None, E=None, name="linear", x_prior=None):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n = A.shape[0]
        B = np.zeros((n, 0)) if B is None else np.atleast_2d(np.asarray(B, dtype=float)).reshape(n, -1)
        E = np.eye(n) if E is None else np.atleast_2d(np.asarray(E, dtype=float)).reshape(n, -1)
        C = np.eye(n) if C is None else np.atleast_2d(np.asarray(C, dtype=float)).reshape(-1, n)
        D = np.zeros((C.shape[0], B.shape[1])) if D is None else np.atleast_2d(np.asarray(D, dtype=float))
        self.A, self.B, self.C, self.D, self.E = A, B, C, D, E
        self.name = name
        self.additive = E.shape == (n, n) and np.array_equal(E, np.eye(n))
        super().__init__(
            n, B.shape[1], E.shape[1], C.shape[0],
            L_f=float(max(np.linalg.norm(A, 2), 1e-12)),
            L_h=float(max(np.linalg.norm(C, 2), 1e-12)),
            x_prior=x_prior,
        )

    def f_a(self, x, u):
        if not self.additive:
            return super().f_a(x, u)
        return x @ self.A.T + u @ self.B.T

    def f_a_jac(self, x, u):
        return np.broadcast_to(self.A, x.shape[:-1] + self.A.shape).copy()

    def f(self, x, u, w):
        return x @ self.A.T + u @ self.B.T + w @ self.E.T

    def f_jac(self, x, u, w):
        lead = x.shape[:-1]
        return (np.broadcast_to(self.A, lead + self.A.shape).copy(),
                np.broadcast_to(self.E, lead + self.E.shape).copy())

    def h(self, x, u):
        return x @ self.C.T + u @ self.D.T

    def h_jac(self, x, u):
        return np.broadcast_to(self.C, x.shape[:-1] + self.C.shape).copy()

    def params(self):
        return {k: getattr(self, k).tolist() for k in ("A", "B", "C", "D", "E")}


def scalar_integrator():
    """``x+ = x + w``, ``y = x + v`` without control input."""
    return LinearModel([[1.0]], C=[[1.0]], name="scalar_integrator", x_prior=[0.0])


class BatchReactor(SystemModel):
    """Euler-discretized reversible reaction ``2A <-> B`` with input and noise.

    ::

        x1+ = x1 + dt (-2 k1 x1^2 + 2 k2 x2) + u1 + w1
        x2+ = x2 + dt (   k1 x1^2 -   k2 x2) + u2 + w2
        y   = x1 + x2
    """

    name = "batch_reactor"
    additive = True
    #: state box over which the Lipschitz constants are estimated
    audit_box = Box(np.array([0.0, 0.0]), np.array([4.0, 2.0]))

    def __init__(self, k1=0.16, k2=0.0064, dt=0.1, x_prior=(3.0, 0.0)):
        self.k1, self.k2, self.dt = float(k1), float(k2), float(dt)
        super().__init__(2, 2, 2, 1, x_prior=x_prior)
        self.L_f = estimate_lipschitz(self.f_a_jac, self.audit_box, m=2)
        self.L_h = estimate_lipschitz(self.h_jac, self.audit_box, m=2)

    def f_a(self, x, u):
        x1, x2 = x[..., 0], x[..., 1]
        r = self.k1 * x1**2
        d1 = -2.0 * r + 2.0 * self.k2 * x2
        d2 = r - self.k2 * x2
        return np.stack([x1 + self.dt * d1, x2 + self.dt * d2], axis=-1) + u

    def f_a_jac(self, x, u):
        x1 = x[..., 0]
        J = np.empty(x.shape[:-1] + (2, 2))
        J[..., 0, 0] = 1.0 - 4.0 * self.dt * self.k1 * x1
        J[..., 0, 1] = 2.0 * self.dt * self.k2
        J[..., 1, 0] = 2.0 * self.dt * self.k1 * x1
        J[..., 1, 1] = 1.0 - self.dt * self.k2
        return J

    def f_xx(self, x, u, w):
        H = np.zeros(x.shape[:-1] + (2, 2, 2))
        H[..., 0, 0, 0] = -4.0 * self.dt * self.k1
        H[..., 1, 0, 0] = 2.0 * self.dt * self.k1
        return H

    def h(self, x, u):
        return x[..., :1] + x[..., 1:2]

    def h_jac(self, x, u):
        return np.broadcast_to(np.array([[1.0, 1.0]]), x.shape[:-1] + (1, 2)).copy()

    def params(self):
        return {"k1": self.k1, "k2": self.k2, "dt": self.dt}


def estimate_lipschitz(jac, box, m=0, points_per_axis=201, u=None, safety=1e-9):
    """Largest spectral norm of ``jac(x, u)`` on a grid over a compact box.

    On a convex box the supremum of the Jacobian norm is a Lipschitz
    constant. Grids include the box vertices.
    """
    axes = [np.linspace(lo, hi, points_per_axis) for lo, hi in zip(box.lower, box.upper)]
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    uu = np.zeros((pts.shape[0], m)) if u is None else np.broadcast_to(u, (pts.shape[0], m))
    J = jac(pts, uu)
    norms = np.linalg.norm(J, ord=2, axis=(-2, -1))
    return float(norms.max() * (1.0 + safety))


@dataclass(frozen=True, eq=False)
class DisturbanceLaw:
    """Per-step law for process disturbances ``w`` and measurement noise ``v``.

    ``kind="uniform"`` draws from the boxes ``w_box`` / ``v_box``;
    ``kind="constant"`` uses ``w_value`` / ``v_value`` at every step.
    """

    kind: str = "uniform"
    w_box: Box | None = None
    v_box: Box | None = None
    w_value: np.ndarray | None = None
    v_value: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "constant"):
            raise ValueError(f"unknown disturbance law {self.kind!r}")
        if self.kind == "uniform" and (self.w_box is None or self.v_box is None):
            raise ValueError("uniform law needs w_box and v_box")
        if self.kind == "constant" and (self.w_value is None or self.v_value is None):
            raise ValueError("constant law needs w_value and v_value")

    def draw(self, rng, T, q, p):
        if self.kind == "constant":
            w = np.tile(_vec(self.w_value, q), (T, 1))
            v = np.tile(_vec(self.v_value, p), (T + 1, 1))
            return w, v
        return self.w_box.sample(rng, T), self.v_box.sample(rng, T + 1)

    def to_dict(self):
        if self.kind == "constant":
            return {"kind": "constant", "w_value": _vec(self.w_value).tolist(),
                    "v_value": _vec(self.v_value).tolist()}
        return {"kind": "uniform", "w_box": self.w_box.to_dict(), "v_box": self.v_box.to_dict()}

    @classmethod
    def from_dict(cls, d):
        if d["kind"] == "constant":
            return cls("constant", w_value=np.array(d["w_value"], float), v_value=np.array(d["v_value"], float))
        return cls("uniform", w_box=Box.from_dict(d["w_box"]), v_box=Box.from_dict(d["v_box"]))


@dataclass(frozen=True, eq=False)
class InputLaw:
    """Input schedule: zero input except at ``resets``.

    At a reset time ``j`` the input is chosen so that the next state is
    ``reset_state + w[j]``, i.e. ``u[j] = reset_state - f_a(x[j], 0)``.
    """

    resets: tuple = ()
    reset_state: np.ndarray | None = None

    def to_dict(self):
        return {"resets": [int(r) for r in self.resets],
                "reset_state": None if self.reset_state is None else _vec(self.reset_state).tolist()}

    @classmethod
    def from_dict(cls, d):
        rs = d.get("reset_state")
        return cls(tuple(int(r) for r in d.get("resets", ())), None if rs is None else np.array(rs, float))


def reset_times(T, period=50):
    """Times ``period * i`` for ``i = 1 .. floor((T - 1) / period)``."""
    if T < 1:
        return ()
    return tuple(period * i for i in range(1, (T - 1) // period + 1))


@dataclass(frozen=True, eq=False)
class Scenario:
    model: SystemModel
    sets: ConstraintSets
    x0: np.ndarray
    T: int
    disturbance: DisturbanceLaw
    inputs: InputLaw = field(default_factory=InputLaw)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x0", _vec(self.x0, self.model.n))
        if self.T < 0:
            raise ValueError("T must be non-negative")
        if self.inputs.resets:
            if not self.model.additive:
                raise ValueError("reset inputs require an additive model")
            if self.model.m != self.model.n:
                raise ValueError("reset inputs require m == n")
            if self.inputs.reset_state is None:
                raise ValueError("reset inputs require reset_state")


@dataclass(frozen=True, eq=False)
class Simulation:
    states: np.ndarray
    data: DataBatch
    disturbances: np.ndarray
    noise: np.ndarray


def simulate(scenario, seed=None):
    """Roll the scenario forward and return states, data and disturbances.

    Raises :class:`ScenarioError` when a generated point leaves the constraint
    sets or the state becomes non-finite.
    """
    sc = scenario
    model, T = sc.model, sc.T
    rng = np.random.default_rng(sc.seed if seed is None else seed)
    w, v = sc.disturbance.draw(rng, T, model.q, model.p)
    resets = set(sc.inputs.resets)
    x = np.zeros((T + 1, model.n))
    u = np.zeros((T + 1, model.m))
    x[0] = sc.x0
    for t in range(T):
        if t in resets:
            u[t] = sc.inputs.reset_state - model.f_a(x[t], np.zeros(model.m))
        x[t + 1] = model.f(x[t], u[t], w[t])
        if not np.all(np.isfinite(x[t + 1])):
            raise ScenarioError(f"non-finite state at t={t + 1}")
    y = model.h(x, u) + v
    for t in range(T + 1):
        wt = w[t] if t < T else np.zeros(model.q)
        if not membership(sc.sets, x[t], u[t], wt, v[t]):
            raise ScenarioError(f"generated point at t={t} violates the constraint sets")
    return Simulation(x, DataBatch(u, y), w, v)


def motivating_scenario(T=70):
    """Scalar integrator with ``x0 = 1`` and constant ``w = v = 1``."""
    model = scalar_integrator()
    return Scenario(
        model=model,
        sets=ConstraintSets.unbounded(1, 0, 1, 1),
        x0=np.array([1.0]),
        T=T,
        disturbance=DisturbanceLaw("constant", w_value=np.array([1.0]), v_value=np.array([1.0])),
    )


def batch_reactor_scenario(T=400, seed=0, w_bound=0.05, v_bound=0.5):
    """Batch reactor emptied and refilled to ``[3, 0]`` every 50 steps."""
    if T < 1:
        raise ValueError("T must be at least 1")
    model = BatchReactor()
    sets = ConstraintSets(
        X=Box.unbounded(2),
        U=Box.unbounded(2),
        W=Box.symmetric(w_bound, 2),
        V=Box.symmetric(v_bound, 1),
    )
    law = DisturbanceLaw("uniform", w_box=Box.symmetric(w_bound, 2), v_box=Box.symmetric(v_bound, 1))
    return Scenario(model, sets, np.array([3.0, 0.0]), int(T), law,
                    InputLaw(reset_times(T), np.array([3.0, 0.0])), int(seed))
