"""JSON and CSV persistence for scenarios, data records and solve results."""

from __future__ import annotations

import csv
import json

import numpy as np

from .cost import CostWeights
from .system_model import (
    BatchReactor,
    ConstraintSets,
    DataBatch,
    DisturbanceLaw,
    InputLaw,
    LinearModel,
    Scenario,
)

__all__ = [
    "ConfigError",
    "model_to_dict",
    "model_from_dict",
    "scenario_to_dict",
    "scenario_from_dict",
    "load_scenario",
    "save_scenario",
    "write_data_csv",
    "read_data_csv",
    "write_states_csv",
    "write_json",
]


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


def model_to_dict(model):
    return {"name": model.name if isinstance(model, BatchReactor) else "linear",
            "label": model.name, "params": model.params(), "x_prior": model.x_prior.tolist()}


def model_from_dict(d):
    name = d.get("name")
    params = d.get("params", {})
    if name == "batch_reactor":
        return BatchReactor(**params, x_prior=d.get("x_prior", (3.0, 0.0)))
    if name in ("linear", "scalar_integrator"):
        if "A" not in params:
            raise ConfigError("linear model needs parameter A")
        return LinearModel(**{k: params[k] for k in ("A", "B", "C", "D", "E") if params.get(k) is not None},
                           name=d.get("label", name), x_prior=d.get("x_prior"))
    raise ConfigError(f"unknown model {name!r}")


def scenario_to_dict(scenario, weights=None):
    d = {
        "model": model_to_dict(scenario.model),
        "T": scenario.T,
        "seed": scenario.seed,
        "x0": scenario.x0.tolist(),
        "sets": scenario.sets.to_dict(),
        "disturbance": scenario.disturbance.to_dict(),
        "inputs": scenario.inputs.to_dict(),
    }
    if weights is not None:
        d["weights"] = weights.to_dict()
    return d


def scenario_from_dict(d):
    """Scenario and optional CostWeights from a JSON-like dict."""
    try:
        model = model_from_dict(d["model"])
        sc = Scenario(
            model=model,
            sets=ConstraintSets.from_dict(d["sets"]),
            x0=np.asarray(d["x0"], float),
            T=int(d["T"]),
            disturbance=DisturbanceLaw.from_dict(d["disturbance"]),
            inputs=InputLaw.from_dict(d.get("inputs", {})),
            seed=int(d.get("seed", 0)),
        )
        weights = CostWeights.from_dict(d["weights"]) if "weights" in d else None
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc
    return sc, weights


def load_scenario(path):
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return scenario_from_dict(d)


def save_scenario(path, scenario, weights=None):
    write_json(path, scenario_to_dict(scenario, weights))


def _fmt(v):
    return repr(float(v))


def write_data_csv(path, data):
    """Header ``t,u_0..,y_0..``; one row per sample."""
    m, p = data.u.shape[1], data.y.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", *(f"u_{i}" for i in range(m)), *(f"y_{i}" for i in range(p))])
        for t in range(data.T + 1):
            wr.writerow([t, *map(_fmt, data.u[t]), *map(_fmt, data.y[t])])


def read_data_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t":
        raise ConfigError(f"{path}: missing data header")
    header = rows[0]
    ui = [i for i, h in enumerate(header) if h.startswith("u_")]
    yi = [i for i, h in enumerate(header) if h.startswith("y_")]
    try:
        arr = np.array([[float(r[i]) for i in range(1, len(header))] for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    arr = arr.reshape(len(rows) - 1, len(header) - 1)
    return DataBatch(arr[:, [i - 1 for i in ui]], arr[:, [i - 1 for i in yi]])


def write_states_csv(path, x, prefix="x"):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", *(f"{prefix}_{i}" for i in range(x.shape[1]))])
        for t, row in enumerate(x):
            wr.writerow([t, *map(_fmt, row)])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, float) and not np.isfinite(o):
        return None
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
