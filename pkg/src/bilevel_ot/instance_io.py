"""Instance files: JSON schema validation and construction of the domain objects."""

from __future__ import annotations

import json
from importlib import resources

import jsonschema
import numpy as np

from .bilevel import BilevelInstance, ObjectiveSpec
from .errors import BilevelOTError, ConfigError, IoError
from .exact_ot import CostField, monotone_plan_1d, solve_kp
from .measure_core import DiscreteMeasure, Grid, SupportMask
from .pde import PoissonOperator, solve_poisson


def schema() -> dict:
    text = resources.files("bilevel_ot").joinpath("data/instance.schema.json").read_text()
    return json.loads(text)


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"instance file not found: {path}", field="instance") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"instance file is not valid JSON: {exc}", field="instance") from exc
    except OSError as exc:
        raise IoError(str(exc)) from exc


def validate(doc: dict) -> None:
    """Raise ConfigError naming the first offending field."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = [str(p) for p in err.absolute_path]
        # name the missing or unexpected key itself rather than its parent
        if err.validator == "required":
            path += [k for k in err.validator_value if k not in err.instance][:1]
        elif err.validator == "additionalProperties":
            allowed = err.schema.get("properties", {})
            path += sorted(k for k in err.instance if k not in allowed)[:1]
        where = ".".join(path) or "<root>"
        raise ConfigError(f"{where}: {err.message}", field=where)


def _measure(grid, w, name):
    try:
        return DiscreteMeasure(grid, np.asarray(w, float))
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}", field=name) from exc


def _probability(grid, w, name):
    mu = _measure(grid, w, name)
    if abs(mu.mass - 1.0) > 1e-10:
        raise ConfigError(f"{name}: masses must sum to 1, got {mu.mass!r}", field=name)
    return mu


def grids(doc) -> tuple[Grid, Grid]:
    out = []
    for key in ("grid1", "grid2"):
        g = doc["grids"][key]
        try:
            out.append(Grid(g["a"], g["b"], g["m"]))
        except ValueError as exc:
            raise ConfigError(f"grids.{key}: {exc}", field=f"grids.{key}") from exc
    return out[0], out[1]


def cost(doc, g1, g2) -> CostField:
    return CostField.power(g1, g2, float(doc["cost"]["beta"]))


def marginals(doc):
    """``(mu1, mu2_d, cost)`` for the plain transport subcommands."""
    validate(doc)
    if "mu1" not in doc:
        raise ConfigError("mu1 is required for this command", field="mu1")
    g1, g2 = grids(doc)
    return _measure(g1, doc["mu1"], "mu1"), _measure(g2, doc["mu2_d"], "mu2_d"), cost(doc, g1, g2)


def _objective(doc, g1, mu2, c):
    spec = doc.get("objective")
    if spec is None:
        raise ConfigError("objective is required for this command", field="objective")
    variant = spec["variant"]
    kw = {k: spec[k] for k in ("nu", "beta", "p_prime", "plan_weight", "oracle_value") if k in spec}
    if variant == "OCP":
        if "y_d" in spec:
            kw["y_d"] = np.asarray(spec["y_d"], float)
        elif "mu_dagger" in spec:
            mu = _probability(g1, spec["mu_dagger"], "objective.mu_dagger")
            kw["y_d"] = solve_poisson(PoissonOperator(g1), mu)
        else:
            raise ConfigError("OCP needs y_d or mu_dagger", field="objective.y_d")
        kw.setdefault("beta", c.beta if c.beta is not None else 2.0)
    elif "mu1_dagger" in spec:
        # self-generated ground truth: the exact plan of a known first marginal
        mu = _probability(g1, spec["mu1_dagger"], "objective.mu1_dagger")
        plan = monotone_plan_1d(mu, mu2) if c.convex_difference else solve_kp(c, mu, mu2)[0]
        kw.update(pi_d=plan.P, mu1_d=mu.w)
        kw.setdefault("oracle_value", 0.0)
    else:
        if "pi_d" not in spec and spec.get("plan_weight", 1.0) > 0:
            raise ConfigError(f"{variant} needs pi_d or mu1_dagger", field="objective.pi_d")
        if "pi_d" in spec:
            kw["pi_d"] = np.asarray(spec["pi_d"], float)
        if "mu1_d" in spec:
            kw["mu1_d"] = np.asarray(spec["mu1_d"], float)
    try:
        return ObjectiveSpec(variant, **kw)
    except (ValueError, BilevelOTError) as exc:
        raise ConfigError(f"objective: {exc}", field="objective") from exc


def bilevel_instance(doc: dict) -> BilevelInstance:
    validate(doc)
    if "rho" not in doc:
        raise ConfigError("rho is required for this command", field="rho")
    g1, g2 = grids(doc)
    mu2 = _probability(g2, doc["mu2_d"], "mu2_d")
    c = cost(doc, g1, g2)
    try:
        mask = SupportMask.from_rho(g1, float(doc["rho"]))
    except (ValueError, BilevelOTError) as exc:
        raise ConfigError(f"rho: {exc}", field="rho") from exc
    obj = _objective(doc, g1, mu2, c)
    try:
        return BilevelInstance(g1, g2, mu2, c, mask, obj)
    except (ValueError, BilevelOTError) as exc:
        raise ConfigError(str(exc), field="instance") from exc


def instance_to_dict(inst: BilevelInstance) -> dict:
    """Inverse of :func:`bilevel_instance` up to the generated objective data."""
    obj = inst.objective
    spec = {"variant": obj.variant, "nu": obj.nu}
    if obj.variant == "OCP":
        spec.update(beta=obj.beta, y_d=obj.y_d.tolist())
    else:
        spec["plan_weight"] = obj.plan_weight
        if obj.pi_d is not None:
            spec["pi_d"] = obj.pi_d.tolist()
        if obj.mu1_d is not None:
            spec["mu1_d"] = obj.mu1_d.tolist()
        if obj.variant == "MI_DUAL":
            spec["p_prime"] = obj.p_prime
    if obj.oracle_value is not None:
        spec["oracle_value"] = obj.oracle_value
    return {
        "grids": {"grid1": inst.grid1.to_dict(), "grid2": inst.grid2.to_dict()},
        "mu2_d": inst.mu2_d.w.tolist(),
        "cost": {"kind": "power", "beta": inst.cost.beta if inst.cost.beta is not None else 1.0},
        "rho": inst.rho,
        "objective": spec,
    }
