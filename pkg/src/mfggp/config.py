"""Experiment configuration: a versioned JSON document.

Expressions for potentials, terminal costs and initial densities are strings
in the coordinates ``x``, ``y``, ``z`` evaluated with a small numpy namespace,
e.g. ``"sin(2*pi*y) + sin(2*pi*x) + cos(4*pi*x)"``.
"""

from __future__ import annotations

import ast
import copy
import json
import os
from typing import Any, Callable

import numpy as np

SCHEMA_VERSION = 1
MODES = ("forward", "invert", "tdinvert", "study")
COORDS = ("x", "y", "z")

_NAMESPACE = {
    "pi": np.pi,
    "e": np.e,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
    "sinh": np.sinh,
    "cosh": np.cosh,
    "minimum": np.minimum,
    "maximum": np.maximum,
}
_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Mod,
)


class ConfigError(ValueError):
    """Validation failure; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field: str, msg: str):
        self.field = field
        super().__init__(f"{field}: {msg}")


DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "mode": None,
    "domain": {"box": None},
    "environment": {
        "potential": None,
        "nu": 1.0,
        "coupling": {"type": "power", "alpha": 2.0},
        "terminal": "0",
        "initial": "1",
        "T": 1.0,
        "n_t": None,
    },
    "reference": {"kind": "forward", "grid": None, "lengthscale": 1.0, "eta": 1e-8, "alpha_pen": 1e6, "beta": 1e6},
    "problem": {
        "M": None,
        "I": 0,
        "I_V": 0,
        "gamma": 1e-3,
        "gamma_V": None,
        "collocation": "random",
        "collocation_file": None,
        "lengthscales": {"u": 1.0, "m": 1.0, "V": 1.0},
        "eta": 1e-8,
        "alpha_pen": 1e6,
        "beta": 1e4,
        "hbar_prior_weight": 1.0,
        "scalar_prior_weight": 0.0,
        "unknown": [],
        "obs_slices": "all",
        "shared_v": True,
    },
    "solver": {"max_iters": 100, "rel_tol": 1e-7},
    "study": {"I_values": [10, 20, 40]},
    "seeds": [0],
    "metrics": {"grid": None},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(where, "unknown field")
        if isinstance(base[key], dict) and key not in ("lengthscales", "coupling"):
            if not isinstance(val, dict):
                raise ConfigError(where, "expected an object")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def compile_expression(expr: str | float | int, dim: int, field: str = "expression") -> Callable[[np.ndarray], np.ndarray]:
    """Turn an expression string into ``f(points) -> values``."""
    if isinstance(expr, (int, float)) and not isinstance(expr, bool):
        value = float(expr)
        return lambda p: np.full(np.atleast_2d(p).shape[0], value)
    if not isinstance(expr, str) or not expr.strip():
        raise ConfigError(field, "expected a number or an expression string")
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(field, f"cannot parse expression: {exc.msg}") from None
    names = set(_NAMESPACE) | set(COORDS[:dim])
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ConfigError(field, f"construct {type(node).__name__} is not allowed")
        if isinstance(node, ast.Name) and node.id not in names:
            raise ConfigError(field, f"unknown name {node.id!r}")
        if isinstance(node, ast.Call) and not isinstance(node.func, ast.Name):
            raise ConfigError(field, "only plain function calls are allowed")
    code = compile(tree, f"<{field}>", "eval")

    def fn(points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        env = dict(_NAMESPACE)
        env.update({c: p[:, i] for i, c in enumerate(COORDS[:dim])})
        val = eval(code, {"__builtins__": {}}, env)
        return np.broadcast_to(np.asarray(val, dtype=float), (p.shape[0],)).copy()

    return fn


def _positive(value, field: str, integer: bool = False, allow_zero: bool = False):
    ok_type = isinstance(value, int) if integer else isinstance(value, (int, float))
    if isinstance(value, bool) or not ok_type:
        raise ConfigError(field, f"expected {'an integer' if integer else 'a number'}, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero) or not np.isfinite(value):
        raise ConfigError(field, f"must be {'nonnegative' if allow_zero else 'positive'}, got {value!r}")
    return value


def validate(cfg: dict) -> dict:
    """Fill defaults and check every field; returns the normalized config."""
    if not isinstance(cfg, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    version = cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r} (expected {SCHEMA_VERSION})")
    c = _merge(DEFAULTS, cfg)
    if c["mode"] not in MODES:
        raise ConfigError("mode", f"expected one of {MODES}, got {c['mode']!r}")

    box = c["domain"]["box"]
    if not isinstance(box, list) or not box or not all(isinstance(b, list) and len(b) == 2 for b in box):
        raise ConfigError("domain.box", "expected a list of [lo, hi] pairs")
    if len(box) > 3:
        raise ConfigError("domain.box", "at most 3 dimensions are supported")
    for i, (lo, hi) in enumerate(box):
        if not (isinstance(lo, (int, float)) and isinstance(hi, (int, float)) and hi > lo):
            raise ConfigError(f"domain.box[{i}]", "need numbers with lo < hi")
    dim = len(box)

    env = c["environment"]
    if env["potential"] is None:
        raise ConfigError("environment.potential", "required")
    pot = compile_expression(env["potential"], dim, "environment.potential")
    probe = np.array([[lo + 0.37 * (hi - lo) for lo, hi in box]])
    try:
        if not np.all(np.isfinite(pot(probe))):
            raise ConfigError("environment.potential", "not finite on the domain")
    except ConfigError:
        raise
    except Exception as exc:  # evaluation problems are config problems
        raise ConfigError("environment.potential", f"cannot evaluate: {exc}") from None
    _positive(env["nu"], "environment.nu", allow_zero=True)
    coup = env["coupling"]
    if not isinstance(coup, dict) or coup.get("type") not in ("power", "nonlocal"):
        raise ConfigError("environment.coupling.type", "expected 'power' or 'nonlocal'")
    allowed = {"power": {"type", "alpha"}, "nonlocal": {"type", "sigma", "quadrature", "periodic"}}[coup["type"]]
    for key in coup:
        if key not in allowed:
            raise ConfigError(f"environment.coupling.{key}", "unknown field")
    if coup["type"] == "power":
        coup.setdefault("alpha", 2.0)
        _positive(coup["alpha"], "environment.coupling.alpha")
    else:
        coup.setdefault("sigma", 1.0)
        coup.setdefault("quadrature", 15)
        coup.setdefault("periodic", False)
        _positive(coup["sigma"], "environment.coupling.sigma")
        _positive(coup["quadrature"], "environment.coupling.quadrature", integer=True)
    td = c["mode"] == "tdinvert" or env["n_t"] is not None
    if td:
        if env["n_t"] is None:
            raise ConfigError("environment.n_t", "required for time-dependent runs")
        _positive(env["n_t"], "environment.n_t", integer=True)
        _positive(env["T"], "environment.T")
        compile_expression(env["terminal"], dim, "environment.terminal")
        compile_expression(env["initial"], dim, "environment.initial")

    ref = c["reference"]
    if ref["kind"] not in ("forward", "explicit1d"):
        raise ConfigError("reference.kind", "expected 'forward' or 'explicit1d'")
    if ref["kind"] == "explicit1d":
        if dim != 1 or td:
            raise ConfigError("reference.kind", "explicit1d needs a stationary 1D problem")
        if env["nu"] != 0 or coup["type"] != "power" or coup["alpha"] != 2:
            raise ConfigError("reference.kind", "explicit1d needs nu = 0 and coupling m^2")
        if [list(map(float, b)) for b in box] != [[0.0, 1.0]]:
            raise ConfigError("domain.box", "explicit1d is defined on [0, 1)")
    if ref["grid"] is None:
        ref["grid"] = {1: 64, 2: 30, 3: 8}[dim]
    _positive(ref["grid"], "reference.grid", integer=True)
    _positive(ref["lengthscale"], "reference.lengthscale")
    _positive(ref["eta"], "reference.eta", allow_zero=True)

    prob = c["problem"]
    needs_problem = c["mode"] in ("invert", "tdinvert", "study")
    if needs_problem:
        if prob["collocation_file"] is not None:
            path = prob["collocation_file"]
            if not isinstance(path, str) or not os.path.exists(path):
                raise ConfigError("problem.collocation_file", f"file not found: {path!r}")
            pts = np.atleast_2d(np.loadtxt(path, delimiter=",", ndmin=2))
            if pts.shape[1] != dim:
                raise ConfigError("problem.collocation_file", f"points have {pts.shape[1]} columns, domain has {dim}")
            prob["M"] = int(pts.shape[0])
        _positive(prob["M"], "problem.M", integer=True)
        _positive(prob["I"], "problem.I", integer=True, allow_zero=True)
        _positive(prob["I_V"], "problem.I_V", integer=True, allow_zero=True)
        if prob["I"] > prob["M"]:
            raise ConfigError("problem.I", f"I={prob['I']} exceeds M={prob['M']}")
        if prob["I_V"] > prob["M"]:
            raise ConfigError("problem.I_V", f"I_V={prob['I_V']} exceeds M={prob['M']}")
        _positive(prob["gamma"], "problem.gamma")
        if prob["gamma_V"] is not None:
            _positive(prob["gamma_V"], "problem.gamma_V")
        if prob["collocation"] not in ("random", "grid", "quadrature"):
            raise ConfigError("problem.collocation", "expected 'random', 'grid' or 'quadrature'")
        if prob["collocation"] == "grid":
            n = round(prob["M"] ** (1.0 / dim))
            if n**dim != prob["M"]:
                raise ConfigError("problem.M", f"grid collocation needs M to be a perfect power of {dim}")
        if prob["collocation"] == "quadrature" and coup["type"] != "nonlocal":
            raise ConfigError("problem.collocation", "quadrature collocation needs a nonlocal coupling")
        ls = prob["lengthscales"]
        if not isinstance(ls, dict) or set(ls) - {"u", "m", "V"}:
            raise ConfigError("problem.lengthscales", "expected an object with keys u, m, V")
        for key in ("u", "m", "V"):
            ls.setdefault(key, 1.0)
            _positive(ls[key], f"problem.lengthscales.{key}")
        _positive(prob["eta"], "problem.eta", allow_zero=True)
        _positive(prob["alpha_pen"], "problem.alpha_pen")
        _positive(prob["beta"], "problem.beta", allow_zero=True)
        _positive(prob["hbar_prior_weight"], "problem.hbar_prior_weight", allow_zero=True)
        _positive(prob["scalar_prior_weight"], "problem.scalar_prior_weight", allow_zero=True)
        unknown = prob["unknown"]
        if not isinstance(unknown, list) or set(unknown) - {"nu", "alpha", "sigma"}:
            raise ConfigError("problem.unknown", "expected a list drawn from nu, alpha, sigma")
        if "alpha" in unknown and coup["type"] != "power":
            raise ConfigError("problem.unknown", "alpha is unknown but the coupling is not a power law")
        if "sigma" in unknown and coup["type"] != "nonlocal":
            raise ConfigError("problem.unknown", "sigma is unknown but the coupling is not nonlocal")
        if "nu" in unknown and env["nu"] <= 0:
            raise ConfigError("environment.nu", "an unknown viscosity needs a positive true value")
        if td:
            sl = prob["obs_slices"]
            if sl != "all":
                if not isinstance(sl, list) or not sl:
                    raise ConfigError("problem.obs_slices", "expected 'all' or a list of observation times")
                T, nt = float(env["T"]), env["n_t"]
                for i, t in enumerate(sl):
                    if not isinstance(t, (int, float)) or not 0 <= t <= T:
                        raise ConfigError(f"problem.obs_slices[{i}]", f"time {t!r} outside [0, T]")
                    k = t * nt / T
                    if abs(k - round(k)) > 1e-9:
                        raise ConfigError(
                            f"problem.obs_slices[{i}]", f"time {t} lies between slices (dt = {T / nt})"
                        )
    if c["mode"] == "tdinvert" and prob["collocation"] == "quadrature":
        raise ConfigError("problem.collocation", "quadrature collocation is stationary only")

    _positive(c["solver"]["max_iters"], "solver.max_iters", integer=True)
    _positive(c["solver"]["rel_tol"], "solver.rel_tol")
    seeds = c["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds", "expected a non-empty list of nonnegative integers")
    if c["mode"] == "study":
        iv = c["study"]["I_values"]
        if not isinstance(iv, list) or not iv:
            raise ConfigError("study.I_values", "expected a non-empty list")
        for i, v in enumerate(iv):
            _positive(v, f"study.I_values[{i}]", integer=True)
            if v > prob["M"]:
                raise ConfigError(f"study.I_values[{i}]", f"{v} exceeds M={prob['M']}")
        if td:
            raise ConfigError("mode", "study mode is stationary only")
    if c["metrics"]["grid"] is None:
        c["metrics"]["grid"] = {1: 128, 2: 64, 3: 24}[dim]
    _positive(c["metrics"]["grid"], "metrics.grid", integer=True)
    return c


def load(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError("--config", f"file not found: {path}")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    return validate(raw)
