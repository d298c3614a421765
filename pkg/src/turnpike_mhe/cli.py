"""Command-line front end: ``turnpike-mhe <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .cost import CostWeights
from .estimators import (
    WindowCache,
    WindowSolution,
    approximate_estimator,
    fie_reference,
    mhe_sequence,
    write_estimate_csv,
)
from .io import (
    ConfigError,
    load_scenario,
    scenario_from_dict,
    scenario_to_dict,
    read_data_csv,
    write_data_csv,
    write_json,
    write_states_csv,
)
from .performance import linear_growth_constants, perf_report, performance_bound, sne
from .solver import ProblemSpec, SolverError, ToleranceConfig, solve
from .system_model import ScenarioError, batch_reactor_scenario, motivating_scenario, simulate
from .turnpike import fit_envelope, gap_profile, sensitivity_probe, turnpike_scan

log = logging.getLogger("turnpike_mhe")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

BUILTIN = {
    "motivating": {"T": 70, "horizons": [5, 10, 15, 20], "taus": [0, 10, 25, 45, "end"]},
    "batch_reactor": {"T": 400, "horizons": [40, 70, 100, 130, 160], "taus": [0, 50, 100, 150, 200, "end"]},
}


@dataclass
class ExperimentConfig:
    scenario: object = "motivating"
    T: int | None = None
    horizons: list | None = None
    taus: list | None = None
    weights: dict | None = None
    tol: dict = field(default_factory=dict)
    seed: int | None = None
    out: str = "out"
    parallel: int = 0
    scale: float = 1.0
    epsilon: float = 0.5
    excursion_epsilon: float = 0.05

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


def _even(v):
    return max(2, 2 * int(round(v / 2.0)))


class Experiment:
    """A resolved configuration: scenario, simulated data, weights and tolerances."""

    def __init__(self, cfg):
        self.cfg = cfg
        scale = float(cfg.scale)
        if not 0 < scale <= 1:
            raise ConfigError("--scale must lie in (0, 1]")
        sc = cfg.scenario
        weights = None
        if isinstance(sc, dict):
            scenario, weights = scenario_from_dict(sc)
            defaults = {"T": scenario.T, "horizons": [_even(scenario.T / 4)], "taus": [0, "end"]}
            name = "custom"
        elif sc in BUILTIN:
            name = sc
            defaults = dict(BUILTIN[sc])
            T = cfg.T if cfg.T is not None else max(1, int(round(defaults["T"] * scale)))
            seed = 0 if cfg.seed is None else int(cfg.seed)
            if sc == "motivating":
                scenario = motivating_scenario(T)
            else:
                scenario = batch_reactor_scenario(T, seed=seed)
                if scale != 1:
                    defaults["horizons"] = sorted({_even(N * scale) for N in defaults["horizons"]})
                    defaults["taus"] = sorted({int(t * scale) for t in defaults["taus"] if t != "end"}) + ["end"]
        elif isinstance(sc, str) and os.path.exists(sc):
            scenario, weights = load_scenario(sc)
            defaults = {"T": scenario.T, "horizons": [_even(scenario.T / 4)], "taus": [0, "end"]}
            name = os.path.basename(sc)
        else:
            raise ConfigError(f"unknown scenario {sc!r}")
        if name not in BUILTIN and cfg.T is not None and cfg.T != scenario.T:
            scenario = replace(scenario, T=int(cfg.T))
        if cfg.seed is not None and scenario.seed != cfg.seed:
            scenario = replace(scenario, seed=int(cfg.seed))
        self.name = name
        self.scenario = scenario
        self.model = scenario.model
        self.sets = scenario.sets
        if cfg.weights is not None:
            weights = CostWeights.from_dict(cfg.weights)
        self.weights = weights or CostWeights.identity(self.model.q, self.model.p)
        if self.weights.q != self.model.q or self.weights.p != self.model.p:
            raise ConfigError("weight dimensions do not match the model")
        self.horizons = [int(N) for N in (cfg.horizons or defaults["horizons"])]
        self.taus = cfg.taus or defaults["taus"]
        try:
            self.tol = ToleranceConfig(**cfg.tol)
        except TypeError as exc:
            raise ConfigError(f"invalid tolerance settings: {exc}") from exc
        try:
            self.sim = simulate(scenario)
        except ScenarioError as exc:
            raise ConfigError(str(exc)) from exc
        self.data = self.sim.data
        self.cache = WindowCache()
        self._ref = None

    @property
    def reference(self):
        if self._ref is None:
            self._ref = fie_reference(self.data, self.model, self.sets, self.weights, self.tol, self.cache)
        return self._ref

    def args(self):
        return (self.model, self.sets, self.weights, self.tol)


# subcommands ---------------------------------------------------------------

def _path(cfg, name):
    return os.path.join(cfg.out, name)


def cmd_simulate(exp, ns, outputs):
    cfg = exp.cfg
    write_data_csv(_path(cfg, "data.csv"), exp.data)
    write_states_csv(_path(cfg, "truth.csv"), exp.sim.states)
    write_json(_path(cfg, "scenario.json"), scenario_to_dict(exp.scenario, exp.weights))
    outputs += ["data.csv", "truth.csv", "scenario.json"]
    print(f"simulated {exp.name}: T={exp.data.T}, {exp.data.T + 1} samples")


def _data(exp, ns):
    if getattr(ns, "data", None):
        data = read_data_csv(ns.data)
        if data.u.shape[1] != exp.model.m or data.y.shape[1] != exp.model.p:
            raise ConfigError("data file does not match the model dimensions")
        return data, None
    return exp.data, exp.sim.states


def cmd_solve_fie(exp, ns, outputs):
    data, truth = _data(exp, ns)
    rep = fie_reference(data, *exp.args()) if data is not exp.data else exp.reference
    write_estimate_csv(_path(exp.cfg, "fie.csv"), rep.trajectory.x, rep.trajectory.w)
    write_json(_path(exp.cfg, "fie_report.json"), rep.to_dict())
    outputs += ["fie.csv", "fie_report.json"]
    extra = f", SNE={sne(rep.trajectory.x, truth):.6g}" if truth is not None else ""
    print(f"FIE: V_T={rep.objective:.10g}, iterations={rep.iterations}{extra}")


def _parse_vec(text, n, name):
    try:
        v = np.array([float(s) for s in text.split(",")])
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    if v.shape != (n,):
        raise ConfigError(f"{name} needs {n} comma-separated values")
    return v


def cmd_solve_window(exp, ns, outputs):
    data, _ = _data(exp, ns)
    if ns.tau < 0 or ns.N < 0 or ns.tau + ns.N > data.T:
        raise ConfigError(f"window [{ns.tau}, {ns.tau + ns.N}] outside [0, {data.T}]")
    n = exp.model.n
    pin_i = _parse_vec(ns.pin_init, n, "--pin-init") if ns.pin_init else None
    pin_t = _parse_vec(ns.pin_term, n, "--pin-term") if ns.pin_term else None
    spec = ProblemSpec(data.window(ns.tau, ns.N), exp.model, exp.sets, exp.weights, pin_i, pin_t, ns.tau)
    rep = solve(spec, tol=exp.tol)
    stem = f"window_tau{ns.tau}_N{ns.N}"
    write_json(_path(exp.cfg, stem + ".json"), rep.to_dict())
    write_estimate_csv(_path(exp.cfg, stem + ".csv"), rep.trajectory.x, rep.trajectory.w)
    outputs += [stem + ".json", stem + ".csv"]
    if not rep.converged:
        raise SolverError(f"window solve ended with status {rep.status}", rep)
    print(f"window [{ns.tau}, {ns.tau + ns.N}]: V_N={rep.objective:.10g}, iterations={rep.iterations}")


def cmd_approx(exp, ns, outputs):
    data, truth = _data(exp, ns)
    ae = approximate_estimator(data, ns.N, *exp.args(), parallel=exp.cfg.parallel, cache=exp.cache)
    name = f"ae_N{ns.N}.csv"
    write_estimate_csv(_path(exp.cfg, name), ae.x_ae, ae.w_ae, ae.source)
    outputs.append(name)
    extra = f", SNE={sne(ae.x_ae, truth):.6g}" if truth is not None else ""
    print(f"approximate estimator N={ns.N}: {len(ae.windows)} windows{extra}")


def cmd_mhe(exp, ns, outputs):
    data, truth = _data(exp, ns)
    mh = mhe_sequence(data, ns.N, *exp.args(), parallel=exp.cfg.parallel, cache=exp.cache)
    name = f"mhe_N{ns.N}.csv"
    src = np.stack([mh.source[:, 0], mh.source[:, 1]], axis=1)
    write_estimate_csv(_path(exp.cfg, name), mh.x_mhe, mh.w_mhe, src)
    outputs.append(name)
    extra = f", SNE={sne(mh.x_mhe, truth):.6g}" if truth is not None else ""
    print(f"MHE N={ns.N}{extra}")


def _write_profiles(path, profiles):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["tau", "N", "j", "gap"])
        for p in profiles:
            for j, g in enumerate(p.gaps):
                wr.writerow([p.tau, p.N, j, repr(float(g))])


def cmd_turnpike_scan(exp, ns, outputs):
    cfg = exp.cfg
    scan = turnpike_scan(exp.data, exp.horizons, exp.taus, *exp.args(), reference=exp.reference,
                         parallel=cfg.parallel, cache=exp.cache)
    _write_profiles(_path(cfg, "profiles.csv"), scan.profiles)
    fits = {}
    if scan.profiles:
        fits["piecewise"] = fit_envelope(scan.profiles).to_dict()
        interior = [p for p in scan.profiles if p.natural_side == "two-sided"]
        if interior:
            fits["interior"] = fit_envelope(interior).to_dict()
    write_json(_path(cfg, "envelope.json"), {
        "fits": fits,
        "failures": [{"tau": t, "N": N, "reason": r} for t, N, r in scan.failures],
        "midpoint_gaps": [{"tau": p.tau, "N": p.N, "gap": p.midpoint_gap} for p in scan.profiles],
    })
    outputs += ["profiles.csv", "envelope.json"]
    print(f"turnpike scan: {len(scan.profiles)} profiles, {len(scan.failures)} failures")


def cmd_sensitivity_probe(exp, ns, outputs):
    ref = exp.reference.trajectory
    N, tau = ns.N, ns.tau
    if tau < 0 or tau + N > exp.data.T:
        raise ConfigError(f"window [{tau}, {tau + N}] outside [0, {exp.data.T}]")
    xi, xt = ref.x[tau], ref.x[tau + N]
    di = np.full(exp.model.n, ns.delta_init)
    dt = np.full(exp.model.n, ns.delta_term)
    probe = sensitivity_probe(exp.data, N, (xi, xt), (xi + di, xt + dt), *exp.args(), tau=tau)
    with open(_path(exp.cfg, "probe.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["j", "difference"])
        for j, d in enumerate(probe.differences):
            wr.writerow([j, repr(float(d))])
    write_json(_path(exp.cfg, "probe.json"), {"tau": tau, "N": N, "fit": probe.fit.to_dict()})
    outputs += ["probe.csv", "probe.json"]
    print(f"sensitivity probe tau={tau} N={N}: c={probe.fit.c:.6g}, rho={probe.fit.rho:.3f}")


SUMMARY_COLUMNS = ["N", "J_ae", "J_mhe", "V_T", "gap_ae", "gap_mhe", "sne_fie", "sne_ae", "sne_mhe", "bound",
                   "status"]


def cmd_compare(exp, ns, outputs):
    cfg = exp.cfg
    if not exp.model.additive:
        raise ConfigError("compare needs an additive model")
    ref = exp.reference
    truth = exp.sim.states
    model, sets, weights, tol = exp.args()
    write_estimate_csv(_path(cfg, "fie.csv"), ref.trajectory.x, ref.trajectory.w)
    outputs.append("fie.csv")
    sne_fie = sne(ref.trajectory.x, truth)
    rows, profiles = {}, []
    for N in exp.horizons:
        row = dict.fromkeys(SUMMARY_COLUMNS, "")
        row.update(N=N, V_T=ref.objective, sne_fie=sne_fie, status="ok")
        try:
            ae = approximate_estimator(exp.data, N, model, sets, weights, tol, cfg.parallel, exp.cache)
            pa = perf_report(ae.trajectory, ref, exp.data, weights, model, truth)
            row.update(J_ae=pa.J_candidate, gap_ae=pa.gap, sne_ae=pa.sne)
            write_estimate_csv(_path(cfg, f"ae_N{N}.csv"), ae.x_ae, ae.w_ae, ae.source)
            outputs.append(f"ae_N{N}.csv")
            profiles += [gap_profile(WindowSolution(t, n, r), ref) for (t, n), r in ae.windows.items()]
        except (SolverError, ValueError) as exc:
            row["status"] = f"ae failed: {exc}"
        try:
            mh = mhe_sequence(exp.data, N, model, sets, weights, tol, cfg.parallel, exp.cache)
            pm = perf_report(mh.trajectory, ref, exp.data, weights, model, truth)
            row.update(J_mhe=pm.J_candidate, gap_mhe=pm.gap, sne_mhe=pm.sne)
            write_estimate_csv(_path(cfg, f"mhe_N{N}.csv"), mh.x_mhe, mh.w_mhe, mh.source)
            outputs.append(f"mhe_N{N}.csv")
        except (SolverError, ValueError) as exc:
            row["status"] = (row["status"] + "; " if row["status"] != "ok" else "") + f"mhe failed: {exc}"
        rows[N] = row
    fit = fit_envelope(profiles) if profiles else None
    for N, row in rows.items():
        if fit is not None and row["J_ae"] != "":
            row["bound"] = performance_bound(cfg.epsilon, N, exp.data.T, fit, model.L_f, model.L_h,
                                             weights, ref.objective)
    with open(_path(cfg, "summary.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SUMMARY_COLUMNS)
        for row in rows.values():
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                         for v in (row[c] for c in SUMMARY_COLUMNS)])
    extra = {"envelope": fit.to_dict() if fit else None, "epsilon": cfg.epsilon}
    try:
        extra["linear_growth"] = dict(zip(("A", "B"), linear_growth_constants(sets, weights, model)))
    except ValueError:
        extra["linear_growth"] = None
    write_json(_path(cfg, "compare.json"), extra)
    outputs += ["summary.csv", "compare.json"]
    for row in rows.values():
        print(f"N={row['N']}: sne_ae={row['sne_ae']}, sne_mhe={row['sne_mhe']}, status={row['status']}")


def _read_estimate(path, n, q):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        x = np.array([[float(r[f"x_{i}"]) for i in range(n)] for r in rows])
        w = np.array([[float(r[f"w_{i}"]) for i in range(q)] for r in rows[:-1]])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return x, w.reshape(len(rows) - 1, q)


def cmd_perf_report(exp, ns, outputs):
    ref = exp.reference
    if ns.estimate:
        x, w = _read_estimate(ns.estimate, exp.model.n, exp.model.q)
    else:
        x, w = ref.trajectory.x, ref.trajectory.w
    rep = perf_report((x, w), ref, exp.data, exp.weights, exp.model, exp.sim.states)
    write_json(_path(exp.cfg, "perf_report.json"), rep.to_dict())
    outputs.append("perf_report.json")
    print(json.dumps(rep.to_dict(), indent=2))


COMMANDS = {
    "simulate": cmd_simulate,
    "solve-fie": cmd_solve_fie,
    "solve-window": cmd_solve_window,
    "approx": cmd_approx,
    "mhe": cmd_mhe,
    "turnpike-scan": cmd_turnpike_scan,
    "sensitivity-probe": cmd_sensitivity_probe,
    "compare": cmd_compare,
    "perf-report": cmd_perf_report,
}


def _global_flags(parser, suppress):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="experiment config JSON")
    parser.add_argument("--scenario", default=d, help="built-in name or scenario JSON path")
    parser.add_argument("--seed", type=int, default=d)
    parser.add_argument("--out", default=d, help="output directory")
    parser.add_argument("--parallel", type=int, default=d, help="worker processes (0 = serial)")
    parser.add_argument("--tol-kkt", type=float, default=d)
    parser.add_argument("--tol-feas", type=float, default=d)
    parser.add_argument("--max-iter", type=int, default=d)
    parser.add_argument("--scale", type=float, default=d, help="shrink the built-in horizon, e.g. 0.25")
    parser.add_argument("-v", "--verbose", action="store_true", default=d or False)


def build_parser():
    parser = argparse.ArgumentParser(prog="turnpike-mhe", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    p = {name: sub.add_parser(name, parents=[common]) for name in COMMANDS}
    for name in ("solve-fie", "solve-window", "approx", "mhe"):
        p[name].add_argument("--data", help="data CSV instead of simulating the scenario")
    p["solve-window"].add_argument("--tau", type=int, required=True)
    p["solve-window"].add_argument("--N", type=int, required=True)
    p["solve-window"].add_argument("--pin-init", help="comma-separated initial state pin")
    p["solve-window"].add_argument("--pin-term", help="comma-separated terminal state pin")
    p["approx"].add_argument("--N", type=int, required=True)
    p["mhe"].add_argument("--N", type=int, required=True)
    p["sensitivity-probe"].add_argument("--N", type=int, required=True)
    p["sensitivity-probe"].add_argument("--tau", type=int, default=0)
    p["sensitivity-probe"].add_argument("--delta-init", type=float, default=1.0)
    p["sensitivity-probe"].add_argument("--delta-term", type=float, default=0.0)
    p["perf-report"].add_argument("--estimate", help="estimate CSV (default: the FIE solution)")
    return parser


def _config_from_args(ns):
    d = {}
    if ns.config:
        try:
            with open(ns.config) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{ns.config}: {exc}") from exc
    cfg = ExperimentConfig.from_dict(d)
    if ns.scenario is not None:
        cfg.scenario = ns.scenario
    for key in ("seed", "out", "parallel", "scale"):
        if getattr(ns, key) is not None:
            setattr(cfg, key, getattr(ns, key))
    tol = dict(cfg.tol)
    for key in ("tol_kkt", "tol_feas", "max_iter"):
        if getattr(ns, key) is not None:
            tol[key] = getattr(ns, key)
    cfg.tol = tol
    return cfg


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    outputs = []
    t0 = time.perf_counter()
    try:
        cfg = _config_from_args(ns)
        os.makedirs(cfg.out, exist_ok=True)
        exp = Experiment(cfg)
        COMMANDS[ns.command](exp, ns, outputs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, IndexError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = {
        "command": ns.command,
        "config": asdict(cfg),
        "version": __version__,
        "outputs": outputs,
        "wall_time_s": time.perf_counter() - t0,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    try:
        write_json(os.path.join(cfg.out, f"manifest_{ns.command}.json"), manifest)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
