"""JSON problem definitions (schema_version 1).

Three kinds of file are understood:

* ``finite``: horizon, coefficients A, B, C, D, R, S, q, q_T, constraints;
* ``stationary``: the same without horizon, knots and q_T;
* ``meanvar``: horizon, r, mu, sigma, R, x0, target and a portfolio cone.

Coefficients are either constants or, when ``knots`` is given, arrays whose
leading axis runs over the knots. Constraints are ``{"H": ..., "d": ...}``
or the shorthand ``{"lower": [...], "upper": [...]}`` meaning
lower |x| <= u <= upper |x|. The portfolio cone is ``{"H": ...}`` with
H u >= 0, or ``"no_short_assets"`` listing 1-based asset numbers.
"""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Union

import jsonschema
import numpy as np

from . import qp
from .errors import InvalidMarket, ParseError, ValidationError
from .finite_horizon import ProblemData, default_grid
from .infinite_horizon import StationaryProblem
from .meanvar import MvProblem

SCHEMA_VERSION = 1
EXAMPLES = ("example1_finite", "example1_stationary", "example1_nosolution", "example2_mv")

_number = {"type": "number"}
_array = {"type": "array"}
_coef = {"anyOf": [_number, _array]}
_constraints = {
    "type": "object",
    "oneOf": [
        {"required": ["H", "d"], "properties": {"H": _array, "d": _array}},
        {"required": ["lower", "upper"], "properties": {"lower": _array, "upper": _array}},
    ],
}
_grid = {
    "type": "object",
    "properties": {"steps": {"type": "integer", "minimum": 1}, "points": _array},
    "additionalProperties": False,
}
_lq_props = {
    "schema_version": {"const": SCHEMA_VERSION}, "kind": {"type": "string"},
    "name": {"type": "string"}, "description": {"type": "string"},
    "A": _coef, "B": _array, "C": _array, "D": _array, "R": _array, "S": _array, "q": _coef,
    "constraints": _constraints,
}

SCHEMAS = {
    "finite": {
        "type": "object",
        "required": ["schema_version", "kind", "horizon", "A", "B", "C", "D", "R", "S", "q"],
        "properties": {**_lq_props, "horizon": {"type": "number", "exclusiveMinimum": 0},
                       "knots": _array, "q_T": _number, "grid": _grid},
        "additionalProperties": False,
    },
    "stationary": {
        "type": "object",
        "required": ["schema_version", "kind", "A", "B", "C", "D", "R", "S", "q"],
        "properties": _lq_props,
        "additionalProperties": False,
    },
    "meanvar": {
        "type": "object",
        "required": ["schema_version", "kind", "horizon", "r", "mu", "sigma", "R", "x0", "target"],
        "properties": {
            "schema_version": {"const": SCHEMA_VERSION}, "kind": {"type": "string"},
            "name": {"type": "string"}, "description": {"type": "string"},
            "horizon": {"type": "number", "exclusiveMinimum": 0}, "knots": _array,
            "r": _coef, "mu": _array, "sigma": _array, "R": _array, "x0": _number,
            "target": _number, "cone": {"type": "object", "required": ["H"], "properties": {"H": _array}},
            "no_short_assets": {"type": "array", "items": {"type": "integer", "minimum": 1}},
            "targets": {"type": "array", "items": _number}, "grid": _grid,
        },
        "not": {"required": ["cone", "no_short_assets"]},
        "additionalProperties": False,
    },
}

# rank of each coefficient at a single knot
_RANK = {"A": 0, "B": 1, "C": 1, "D": 2, "R": 2, "S": 1, "q": 0, "H": 2, "d": 1,
         "r": 0, "mu": 1, "sigma": 2}


def example_path(name: str) -> Path:
    """Path of a shipped example configuration."""
    if name not in EXAMPLES:
        raise KeyError(f"unknown example {name!r}; choose from {', '.join(EXAMPLES)}")
    return Path(str(resources.files("clq") / "data" / f"{name}.json"))


def load_json(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from None


def _knot_array(obj: dict, key: str, K: int) -> np.ndarray:
    try:
        arr = np.asarray(obj[key], dtype=float)
    except (ValueError, TypeError):
        raise ValidationError(f"{key} is not a numeric array of consistent shape", "schema") from None
    rank = _RANK[key]
    if arr.ndim == rank:
        return np.broadcast_to(arr, (K,) + arr.shape).copy()
    if arr.ndim == rank + 1 and arr.shape[0] == K:
        return arr
    raise ValidationError(f"{key} has shape {arr.shape}; expected rank {rank} or a leading "
                          f"axis of {K} knots", "schema")


def _knots(obj: dict, horizon: float) -> np.ndarray:
    if "knots" not in obj:
        return np.array([0.0, horizon])
    knots = np.asarray(obj["knots"], dtype=float)
    if knots.ndim != 1 or knots.size < 2 or knots[0] != 0.0 or not np.isclose(knots[-1], horizon) \
            or np.any(np.diff(knots) <= 0):
        raise ValidationError("knots must increase strictly from 0 to the horizon", "schema")
    return knots


def _grid(obj: dict, horizon: float, steps=None) -> np.ndarray:
    if steps is not None:
        return np.linspace(0.0, horizon, int(steps) + 1)
    grid_opts = obj.get("grid", {})
    if "points" in grid_opts:
        return np.asarray(grid_opts["points"], dtype=float)
    if "steps" in grid_opts:
        return np.linspace(0.0, horizon, grid_opts["steps"] + 1)
    return default_grid(horizon)


def _constraints(obj: dict, K: int, n: int, assumption: str = "Assumption 1"):
    cons = obj.get("constraints")
    if cons is None:
        return np.zeros((K, 0, n)), np.zeros((K, 0))
    if "lower" in cons:
        lo = _knot_array({"d": cons["lower"]}, "d", K)
        hi = _knot_array({"d": cons["upper"]}, "d", K)
        if lo.shape[1] != n or hi.shape[1] != n:
            raise ValidationError(f"bounds must have {n} entries", "schema")
        if np.any(lo > hi):
            i = int(np.argwhere(np.any(lo > hi, axis=1))[0, 0])
            raise ValidationError("lower bound exceeds upper bound, so {K : HK <= d} is empty",
                                  assumption, i)
        H = np.concatenate([np.eye(n), -np.eye(n)])
        return np.broadcast_to(H, (K, 2 * n, n)).copy(), np.concatenate([hi, -lo], axis=1)
    return _knot_array(cons, "H", K), _knot_array(cons, "d", K)


def _schema_check(obj, kind: str) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMAS[kind])
    errors = sorted(validator.iter_errors(obj), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ValidationError(f"{where}: {e.message}", "schema")


def build_finite(obj: dict, steps=None) -> ProblemData:
    T = float(obj["horizon"])
    knots = _knots(obj, T)
    K = knots.size
    arr = {k: _knot_array(obj, k, K) for k in ("A", "B", "C", "D", "R", "S", "q")}
    H, d = _constraints(obj, K, arr["B"].shape[1])
    try:
        return ProblemData(T, knots, arr["A"], arr["B"], arr["C"], arr["D"], arr["R"], arr["S"],
                           arr["q"], H, d, obj.get("q_T", 0.0), _grid(obj, T, steps))
    except ValueError as exc:
        raise ValidationError(str(exc), "schema") from None


def build_stationary(obj: dict) -> StationaryProblem:
    arr = {k: _knot_array(obj, k, 1)[0] for k in ("A", "B", "C", "D", "R", "S", "q")}
    H, d = _constraints(obj, 1, np.atleast_1d(arr["B"]).size, "Assumption 3")
    try:
        return StationaryProblem(arr["A"], arr["B"], arr["C"], arr["D"], arr["R"], arr["S"],
                                 arr["q"], qp.Polyhedron(H[0], d[0]))
    except ValueError as exc:
        raise ValidationError(str(exc), "schema") from None


def build_meanvar(obj: dict, steps=None) -> MvProblem:
    T = float(obj["horizon"])
    knots = _knots(obj, T)
    K = knots.size
    arr = {k: _knot_array(obj, k, K) for k in ("r", "mu", "sigma")}
    n = arr["mu"].shape[1]
    R = _knot_array({"D": obj["R"]}, "D", K)
    if "no_short_assets" in obj:
        idx = [i - 1 for i in obj["no_short_assets"]]
        if any(i >= n for i in idx):
            raise ValidationError(f"no_short_assets refers to an asset beyond {n}", "schema")
        H = np.broadcast_to(MvProblem.no_short_cone(n, idx), (K, len(idx), n)).copy()
    elif "cone" in obj:
        H = _knot_array(obj["cone"], "H", K)
    else:
        H = np.zeros((K, 0, n))
    try:
        return MvProblem(T, knots, arr["r"], arr["mu"], arr["sigma"], H, R, obj["x0"],
                         obj["target"], _grid(obj, T, steps))
    except ValueError as exc:
        raise ValidationError(str(exc), "schema") from None


def parse_config(path, steps=None, validate: bool = True) -> Union[ProblemData, StationaryProblem, MvProblem]:
    """Read, schema-check and (optionally) assumption-check a problem file."""
    obj = load_json(path)
    return parse_object(obj, steps, validate)


def parse_object(obj, steps=None, validate: bool = True):
    if not isinstance(obj, dict) or obj.get("kind") not in SCHEMAS:
        raise ValidationError(f"'kind' must be one of {sorted(SCHEMAS)}", "schema")
    kind = obj["kind"]
    _schema_check(obj, kind)
    if kind == "finite":
        prob = build_finite(obj, steps)
    elif kind == "stationary":
        prob = build_stationary(obj)
    else:
        prob = build_meanvar(obj, steps)
    if validate:
        if isinstance(prob, MvProblem):
            try:
                prob.validate()
            except InvalidMarket as exc:
                raise ValidationError(exc.reason, exc.assumption) from None
        else:
            prob.validate()
    return prob
