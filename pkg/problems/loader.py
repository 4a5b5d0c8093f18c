"""
Problem files (.qp): JSON documents describing one quasiperiodic Lagrangian system.

    {
      "name": "linear_flat",
      "dims": {"k": 2, "m": 2},
      "omega": [1, "sqrt(2)"],
      "metric": [["1", "0"], ["0", "1"]],
      "W": "(x1^2 + x2^2)/2 - 0.3*cos(phi1)*x1 - 0.2*sin(phi2)*x2",
      "auxiliary": {"V": "(x1^2 + x2^2)/2", "level": 0.5},
      "chart_box": [[-2, 2], [-2, 2]],
      "config": {"trunc": 4, "grid": 16},
      "reference": {"m": 2, "N": 4, "k": 2, "modes": [...]}
    }

"config" and "reference" are optional.
"""

import hashlib
import json
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Mapping, Union

import numpy as np

from config import Config
from core.autodiff import eval_with_derivatives
from core.errors import MalformedFieldError, ProblemFileError, QPError
from core.expression import format_expression, parse_expression
from core.geometry import ChartManifold, ScalarField
from core.problem import DomainSpec, ProblemSpec
from core.torusfield import FourierField, FrequencyVector
from utils.logger import logger

OVERRIDABLE = {f.name: f.type for f in fields(Config) if f.name not in ("log_dir", "out_dir")}


def _section(data: Mapping, key: str) -> Any:
    if key not in data:
        raise ProblemFileError(f"missing section '{key}'")
    return data[key]


def _expression(text: Any, where: str, k: int, m: int):
    if not isinstance(text, str):
        raise ProblemFileError(f"{where}: expected an expression string, got {text!r}")
    try:
        return parse_expression(text, k=k, m=m)
    except QPError as err:
        raise ProblemFileError(f"{where}: {err}") from err


def _constant(value: Any, where: str) -> float:
    """A number or a constant expression such as "sqrt(2)" """
    if isinstance(value, bool):
        raise ProblemFileError(f"{where}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    ast = _expression(value, where, 0, 0)
    try:
        return float(eval_with_derivatives(ast, np.zeros(0), order=0).value)
    except QPError as err:
        raise ProblemFileError(f"{where}: {err}") from err


def _check_symmetric(manifold: ChartManifold, seed: int = 0):
    """Off-diagonal metric entries must agree textually or numerically on the box"""
    m = manifold.m
    box = manifold.box
    rng = np.random.default_rng(seed)
    pts = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((16, m))
    for i in range(m):
        for j in range(i + 1, m):
            a, b = manifold.metric[i][j], manifold.metric[j][i]
            if format_expression(a) == format_expression(b):
                continue
            va = eval_with_derivatives(a, pts, order=0).value
            vb = eval_with_derivatives(b, pts, order=0).value
            if not np.allclose(va, vb, rtol=1e-12, atol=1e-14):
                raise ProblemFileError(f"metric entries ({i + 1},{j + 1}) and ({j + 1},{i + 1}) differ")


def _overrides(section: Any) -> Dict[str, float]:
    if not isinstance(section, Mapping):
        raise ProblemFileError("config: expected an object")
    out = {}
    for key, value in section.items():
        if key not in OVERRIDABLE:
            raise ProblemFileError(f"config: unknown setting '{key}'")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ProblemFileError(f"config.{key}: expected a number, got {value!r}")
        out[key] = int(value) if OVERRIDABLE[key] in (int, "int") else float(value)
    return out


def parse_problem(data: Mapping, name: str = None) -> ProblemSpec:
    """Validate a decoded problem document and build the ProblemSpec"""
    if not isinstance(data, Mapping):
        raise ProblemFileError("problem document must be a JSON object")
    dims = _section(data, "dims")
    try:
        k, m = int(dims["k"]), int(dims["m"])
    except (KeyError, TypeError, ValueError) as err:
        raise ProblemFileError(f"dims: expected integers k and m ({err})") from err
    if k < 1 or m < 1:
        raise ProblemFileError(f"dims: k and m must be positive, got k={k}, m={m}")

    omega_raw = _section(data, "omega")
    if not isinstance(omega_raw, list) or len(omega_raw) != k:
        raise ProblemFileError(f"omega: expected a list of {k} entries")
    try:
        omega = FrequencyVector(tuple(_constant(w, f"omega[{i}]") for i, w in enumerate(omega_raw)))
    except ValueError as err:
        raise ProblemFileError(f"omega: {err}") from err

    rows = _section(data, "metric")
    if not isinstance(rows, list) or len(rows) != m or any(not isinstance(r, list) or len(r) != m for r in rows):
        raise ProblemFileError(f"metric: expected a {m}x{m} array of expression strings")
    metric = tuple(tuple(_expression(e, f"metric[{i}][{j}]", 0, m) for j, e in enumerate(row)) for i, row in enumerate(rows))

    box = _section(data, "chart_box")
    try:
        box = np.asarray(box, dtype=float).reshape(m, 2)
        manifold = ChartManifold(m, metric, box)
    except ValueError as err:
        raise ProblemFileError(f"chart_box: {err}") from err
    _check_symmetric(manifold)

    W = ScalarField(_expression(_section(data, "W"), "W", k, m), m, k)
    aux = _section(data, "auxiliary")
    if not isinstance(aux, Mapping):
        raise ProblemFileError("auxiliary: expected an object with V and level")
    V = ScalarField(_expression(_section(aux, "V"), "auxiliary.V", 0, m), m)
    level = _constant(_section(aux, "level"), "auxiliary.level")

    overrides = _overrides(data.get("config", {}))
    domain_kwargs = {}
    if "cond_resolution" in overrides:
        domain_kwargs["resolution"] = int(overrides["cond_resolution"])
    if "eps_bnd" in overrides:
        domain_kwargs["eps_bnd"] = float(overrides["eps_bnd"])

    reference = None
    if data.get("reference") is not None:
        try:
            reference = FourierField.from_dict(data["reference"])
        except (MalformedFieldError, KeyError, TypeError, ValueError) as err:
            raise ProblemFileError(f"reference: {err}") from err

    label = name or str(data.get("name", "problem"))
    try:
        domain = DomainSpec(V, level, **domain_kwargs)
        problem = ProblemSpec(k, m, omega, manifold, W, domain, {"name": label}, reference, overrides)
    except ValueError as err:
        raise ProblemFileError(str(err)) from err

    omega.check_independence()
    return problem


def load_problem(path: Union[str, Path]) -> ProblemSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ProblemFileError(f"cannot read {path}: {err}") from err
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ProblemFileError(f"{path}: invalid JSON at line {err.lineno} column {err.colno}: {err.msg}") from err
    problem = parse_problem(data, name=data.get("name") if isinstance(data, Mapping) else None)
    logger.info("Problem loaded", module="loader", path=str(path), problem=problem.name, k=problem.k, m=problem.m)
    return problem


def serialize_problem(problem: ProblemSpec) -> Dict:
    """Canonical document: fully parenthesized expressions and float literals"""
    doc = {
        "name": problem.name,
        "dims": {"k": problem.k, "m": problem.m},
        "omega": [float(w) for w in problem.omega.as_array()],
        "metric": [[format_expression(e) for e in row] for row in problem.manifold.metric],
        "W": problem.W.text,
        "auxiliary": {"V": problem.domain.V.text, "level": float(problem.domain.level)},
        "chart_box": problem.box.tolist(),
    }
    if problem.overrides:
        doc["config"] = dict(problem.overrides)
    if problem.reference is not None:
        doc["reference"] = problem.reference.to_dict()
    return doc


def problem_hash(problem: ProblemSpec) -> str:
    """SHA-256 of the canonical serialization"""
    text = json.dumps(serialize_problem(problem), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_problem(problem: ProblemSpec, path: Union[str, Path]):
    Path(path).write_text(json.dumps(serialize_problem(problem), indent=2) + "\n", encoding="utf-8")
