"""Experiment pipelines behind the command line: references, sampling, runs."""

from __future__ import annotations

import json
import logging
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any

import numpy as np

from .config import compile_expression
from .fields import FunctionField, grid_points
from .functionals import gauss_legendre_rule
from .kernels import PeriodicKernelSpec
from .reference import (
    EnvironmentSpec,
    solve_1d_explicit,
    solve_forward_stationary,
    solve_forward_timedep,
    synthesize_observations,
)
from .solver import GNConfig
from .stationary import (
    NonlocalGaussian,
    PointObservations,
    PowerLocal,
    StationaryInverse,
    StationaryProblemSpec,
    field_residuals,
)
from .timedep import TimeDependentInverse, TimeDependentProblemSpec

log = logging.getLogger(__name__)

RECORD_VERSION = 1
HELDOUT_WARN = 0.1  # rms HJB residual on the metrics grid above which a run is flagged


# --- metrics ---------------------------------------------------------------
def l2_grid_error(a, b) -> float:
    """Root mean square difference of two fields sampled on the same grid."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"grid shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def l2_gauge_error(a, a_shift: float, b, b_shift: float) -> float:
    """``l2_grid_error(a - a_shift, b - b_shift)``, e.g. for ``V - Hbar``."""
    return l2_grid_error(np.asarray(a, dtype=float) - a_shift, np.asarray(b, dtype=float) - b_shift)


# --- grid files ------------------------------------------------------------
def write_grid_csv(path: str, arr) -> None:
    """First line: comma-separated dims; then row-major values, one row per line."""
    arr = np.asarray(arr, dtype=float)
    with open(path, "w") as fh:
        fh.write(",".join(str(n) for n in arr.shape) + "\n")
        np.savetxt(fh, arr.reshape(-1, arr.shape[-1]), delimiter=",", fmt="%.17g")


def read_grid_csv(path: str) -> np.ndarray:
    with open(path) as fh:
        dims = tuple(int(n) for n in fh.readline().strip().split(","))
        vals = np.loadtxt(fh, delimiter=",", ndmin=2)
    return vals.reshape(dims)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def write_record(path: str, record: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(record), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- building blocks -------------------------------------------------------
def box_of(cfg) -> list[tuple[float, float]]:
    return [(float(lo), float(hi)) for lo, hi in cfg["domain"]["box"]]


def environment(cfg) -> EnvironmentSpec:
    box = box_of(cfg)
    dim = len(box)
    e = cfg["environment"]
    c = e["coupling"]
    if c["type"] == "power":
        coupling = PowerLocal(float(c["alpha"]))
    else:
        coupling = NonlocalGaussian(gauss_legendre_rule(int(c["quadrature"]), box), float(c["sigma"]), periodic=bool(c["periodic"]))
    td = e["n_t"] is not None
    return EnvironmentSpec(
        box=box,
        potential=compile_expression(e["potential"], dim, "environment.potential"),
        nu=float(e["nu"]),
        coupling=coupling,
        terminal=compile_expression(e["terminal"], dim, "environment.terminal") if td else None,
        initial=compile_expression(e["initial"], dim, "environment.initial") if td else None,
        T=float(e["T"]),
        n_t=int(e["n_t"]) if td else 1,
    )


def kernel(box, lengthscale: float) -> PeriodicKernelSpec:
    return PeriodicKernelSpec(len(box), lengthscale, [hi - lo for lo, hi in box])


def gn_config(cfg) -> GNConfig:
    return GNConfig(max_iters=int(cfg["solver"]["max_iters"]), rel_tol=float(cfg["solver"]["rel_tol"]))


def reference_grid_points(box, n: int) -> np.ndarray:
    """Cell-centred uniform grid used as forward-solver collocation."""
    axes = [lo + (hi - lo) * (np.arange(n) + 0.5) / n for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class Reference:
    """Ground truth for a run: ``u``, ``m``, ``V`` are callables on point arrays."""

    u: Any
    m: Any
    V: Any
    hbar: float
    scalars: dict
    diagnostics: dict | None = None


def stationary_reference(cfg) -> Reference:
    env = environment(cfg)
    ref = cfg["reference"]
    scalars = {"nu": env.nu}
    if isinstance(env.coupling, PowerLocal):
        scalars["alpha"] = env.coupling.alpha
    else:
        scalars["sigma"] = env.coupling.sigma
    V = FunctionField(env.potential, env.dim)
    if ref["kind"] == "explicit1d":
        sol = solve_1d_explicit(lambda x: env.potential(np.asarray(x).reshape(-1, 1)))
        return Reference(
            lambda p: sol.u(np.asarray(p)[:, 0]), lambda p: sol.m(np.asarray(p)[:, 0]), V, sol.hbar, scalars
        )
    X = reference_grid_points(env.box, int(ref["grid"]))
    k = kernel(env.box, float(ref["lengthscale"]))
    fields, diag = solve_forward_stationary(
        env, X, k, k, beta=float(ref["beta"]), alpha_pen=float(ref["alpha_pen"]), eta=float(ref["eta"]),
        gn=gn_config(cfg),
    )
    return Reference(fields.u, fields.m, V, fields.hbar, scalars, diag.to_dict())


def timedep_reference(cfg):
    env = environment(cfg)
    ref = cfg["reference"]
    X = reference_grid_points(env.box, int(ref["grid"]))
    k = kernel(env.box, float(ref["lengthscale"]))
    fields, diag = solve_forward_timedep(
        env, X, k, k, alpha_pen=float(ref["alpha_pen"]), eta=float(ref["eta"]), gn=gn_config(cfg)
    )
    return fields, diag


def seed_streams(seed: int, n: int) -> list[int]:
    """Independent integer seeds derived from one run seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def sample_points(cfg, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``(collocation, candidate observation points)``.

    Observations use the first ``I`` (or ``I_V``) candidates.  For quadrature
    collocation the candidates are the random points appended after the nodes.
    """
    box = box_of(cfg)
    prob = cfg["problem"]
    M = int(prob["M"])
    rng = np.random.default_rng(seed_streams(seed, 3)[0])
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    if prob["collocation_file"] is not None:
        X = np.atleast_2d(np.loadtxt(prob["collocation_file"], delimiter=",", ndmin=2))
        return X, X
    if prob["collocation"] == "grid":
        n = round(M ** (1.0 / len(box)))
        return reference_grid_points(box, n), rng.permutation(reference_grid_points(box, n))
    R = lo + (hi - lo) * rng.random((M, len(box)))
    if prob["collocation"] == "quadrature":
        c = cfg["environment"]["coupling"]
        nodes = gauss_legendre_rule(int(c["quadrature"]), box).nodes
        return np.vstack([nodes, R]), R
    return R, R


def stationary_spec(cfg, X, m_obs, v_obs, coupling) -> StationaryProblemSpec:
    box = box_of(cfg)
    prob = cfg["problem"]
    ls = prob["lengthscales"]
    unknown = prob["unknown"]
    if isinstance(coupling, PowerLocal):
        coupling = PowerLocal(coupling.alpha, known="alpha" not in unknown)
    else:
        coupling = NonlocalGaussian(coupling.rule, coupling.sigma, known="sigma" not in unknown, periodic=coupling.periodic)
    return StationaryProblemSpec(
        box=box,
        collocation=X,
        kernel_u=kernel(box, ls["u"]),
        kernel_m=kernel(box, ls["m"]),
        kernel_v=kernel(box, ls["V"]),
        coupling=coupling,
        nu=float(cfg["environment"]["nu"]),
        nu_known="nu" not in unknown,
        m_obs=m_obs,
        v_obs=v_obs,
        beta=float(prob["beta"]),
        alpha_pen=float(prob["alpha_pen"]),
        hbar_prior_weight=float(prob["hbar_prior_weight"]),
        scalar_prior_weight=float(prob["scalar_prior_weight"]),
        eta=float(prob["eta"]),
    )


def _timing(t0: float) -> dict:
    return {"wall_clock_seconds": time.perf_counter() - t0}


def _save_grids(out: str | None, grids: dict, prefix: str = "") -> dict:
    files = {}
    if out is None:
        return files
    os.makedirs(out, exist_ok=True)
    for name, arr in grids.items():
        fname = f"{prefix}{name}.csv"
        write_grid_csv(os.path.join(out, fname), arr)
        files[name] = fname
    return files


# --- modes -----------------------------------------------------------------
def run_forward(cfg, out: str | None = None) -> dict:
    t0 = time.perf_counter()
    env = environment(cfg)
    n = int(cfg["metrics"]["grid"])
    G, shape = grid_points(env.box, n)
    vol = float(np.prod([hi - lo for lo, hi in env.box]))
    if env.terminal is not None:
        fields, diag = timedep_reference(cfg)
        g = fields.grids(G)
        grids = {k: v.reshape((env.n_t + 1,) + shape) for k, v in g.items()}
        record = {
            "hbar": None,
            "scalars": {"nu": env.nu},
            "mass": (g["m"].mean(axis=1) * vol).tolist(),
            "diagnostics": _strip_time(diag.to_dict()),
        }
    else:
        ref = stationary_reference(cfg)
        grids = {"u": ref.u(G).reshape(shape), "m": ref.m(G).reshape(shape), "V": ref.V(G).reshape(shape)}
        record = {
            "hbar": ref.hbar,
            "scalars": ref.scalars,
            "mass": float(grids["m"].mean() * vol),
            "diagnostics": _strip_time(ref.diagnostics) if ref.diagnostics else None,
        }
    record.update({"mode": "forward", "grids": _save_grids(out, grids), "grid_shape": list(shape)})
    record["timing"] = _timing(t0)
    return record


def _strip_time(d: dict | None) -> dict | None:
    if d is None:
        return None
    d = dict(d)
    d.pop("seconds", None)
    return d


def invert_with_reference(cfg, seed: int, ref: Reference, I: int | None = None, out: str | None = None) -> dict:
    """One stationary inversion against a precomputed reference."""
    t0 = time.perf_counter()
    env = environment(cfg)
    prob = cfg["problem"]
    I = int(prob["I"]) if I is None else int(I)
    IV = int(prob["I_V"])
    gamma = float(prob["gamma"])
    gamma_v = float(prob["gamma_V"]) if prob["gamma_V"] is not None else gamma
    X, cand = sample_points(cfg, seed)
    _, s_m, s_v = seed_streams(seed, 3)
    n_obs = max(I, IV)
    m_obs = v_obs = None
    if I > 0:
        om = synthesize_observations(ref.m, cand[:n_obs], gamma, s_m)
        m_obs = PointObservations(cand[:I], om.noisy[:I], gamma)
    if IV > 0:
        ov = synthesize_observations(ref.V, cand[:n_obs], gamma_v, s_v)
        v_obs = PointObservations(cand[:IV], ov.noisy[:IV], gamma_v)
    spec = stationary_spec(cfg, X, m_obs, v_obs, env.coupling)
    problem = StationaryInverse(spec)
    record: dict = {"mode": "invert", "seed": seed, "I": I, "I_V": IV, "M": int(X.shape[0])}
    state, diag = problem.solve(config=gn_config(cfg))
    rec = problem.reconstruct(state)
    n = int(cfg["metrics"]["grid"])
    G, shape = grid_points(env.box, n)
    grids = {
        "u": rec.u(G).reshape(shape),
        "m": rec.m(G).reshape(shape),
        "V": rec.V(G).reshape(shape),
        "ref_u": np.asarray(ref.u(G)).reshape(shape),
        "ref_m": np.asarray(ref.m(G)).reshape(shape),
        "ref_V": np.asarray(ref.V(G)).reshape(shape),
    }
    record["scalars"] = dict(rec.scalars, hbar=rec.hbar)
    record["reference"] = dict(ref.scalars, hbar=ref.hbar)
    record["errors"] = errors_from_grids(grids, rec.hbar, ref.hbar)
    record["scalar_errors"] = {
        k: abs(record["scalars"][k] - record["reference"][k]) for k in record["scalars"] if k in record["reference"]
    }
    hjb, fp = field_residuals(spec, rec, G)
    record["heldout_residuals"] = {
        "hjb_rms": float(np.sqrt(np.mean(hjb**2))),
        "hjb_max": float(np.abs(hjb).max()),
        "fp_rms": float(np.sqrt(np.mean(fp**2))),
        "fp_max": float(np.abs(fp).max()),
    }
    if record["heldout_residuals"]["hjb_rms"] > HELDOUT_WARN:
        log.warning(
            "seed %d: HJB residual rms %.3g on the metrics grid (collocation residual %.3g); "
            "the collocation set is likely too sparse for the kernel lengthscales",
            seed, record["heldout_residuals"]["hjb_rms"], diag.residual_norm[-1] if diag.residual_norm else float("nan"),
        )
    record["diagnostics"] = _strip_time(diag.to_dict())
    record["grid_shape"] = list(shape)
    record["grids"] = _save_grids(out, grids)
    record["timing"] = dict(_timing(t0), solver_seconds=diag.seconds)
    return record


def errors_from_grids(grids: dict, hbar: float, ref_hbar: float) -> dict:
    return {
        "m": l2_grid_error(grids["m"], grids["ref_m"]),
        "u": l2_grid_error(grids["u"], grids["ref_u"]),
        "V": l2_grid_error(grids["V"], grids["ref_V"]),
        "V_minus_hbar": l2_gauge_error(grids["V"], hbar, grids["ref_V"], ref_hbar),
    }


def run_invert(cfg, seed: int, out: str | None = None) -> dict:
    t0 = time.perf_counter()
    ref = stationary_reference(cfg)
    ref_seconds = time.perf_counter() - t0
    record = invert_with_reference(cfg, seed, ref, out=out)
    record["reference_diagnostics"] = _strip_time(ref.diagnostics)
    record["timing"]["reference_seconds"] = ref_seconds
    return record


def run_tdinvert(cfg, seed: int, out: str | None = None) -> dict:
    t0 = time.perf_counter()
    env = environment(cfg)
    prob = cfg["problem"]
    ref, ref_diag = timedep_reference(cfg)
    ref_seconds = time.perf_counter() - t0
    I, IV = int(prob["I"]), int(prob["I_V"])
    gamma = float(prob["gamma"])
    gamma_v = float(prob["gamma_V"]) if prob["gamma_V"] is not None else gamma
    X, cand = sample_points(cfg, seed)
    nt = env.n_t
    if prob["obs_slices"] == "all":
        slices = list(range(nt + 1))
    else:
        slices = sorted({int(round(t * nt / env.T)) for t in prob["obs_slices"]})
    streams = seed_streams(seed, nt + 3)
    m_obs = {}
    if I > 0:
        for k in slices:
            o = synthesize_observations(ref.m[k], cand[:I], gamma, streams[2 + k])
            m_obs[k] = PointObservations(cand[:I], o.noisy, gamma)
    v_obs = None
    if IV > 0:
        o = synthesize_observations(FunctionField(env.potential, env.dim), cand[:IV], gamma_v, streams[1])
        v_obs = PointObservations(cand[:IV], o.noisy, gamma_v)
    ls = prob["lengthscales"]
    unknown = prob["unknown"]
    coupling = env.coupling
    if isinstance(coupling, PowerLocal):
        coupling = PowerLocal(coupling.alpha, known="alpha" not in unknown)
    else:
        coupling = NonlocalGaussian(coupling.rule, coupling.sigma, known="sigma" not in unknown, periodic=coupling.periodic)
    shared = bool(prob["shared_v"])
    if not shared and v_obs is not None:
        v_obs = {k: v_obs for k in range(nt + 1)}
    spec = TimeDependentProblemSpec(
        box=env.box,
        collocation=X,
        T=env.T,
        n_t=nt,
        terminal=env.terminal,
        initial=env.initial,
        kernel_u=kernel(env.box, ls["u"]),
        kernel_m=kernel(env.box, ls["m"]),
        kernel_v=kernel(env.box, ls["V"]),
        coupling=coupling,
        nu=env.nu,
        nu_known="nu" not in unknown,
        m_obs=m_obs,
        v_obs=v_obs,
        shared_v=shared,
        alpha_pen=float(prob["alpha_pen"]),
        scalar_prior_weight=float(prob["scalar_prior_weight"]),
        eta=float(prob["eta"]),
    )
    problem = TimeDependentInverse(spec)
    state, diag = problem.solve(config=gn_config(cfg))
    rec = problem.reconstruct(state)
    res = problem.split_residuals(state)
    n = int(cfg["metrics"]["grid"])
    G, shape = grid_points(env.box, n)
    full = (nt + 1,) + shape
    g, gr = rec.grids(G), ref.grids(G)
    grids = {
        "u": g["u"].reshape(full),
        "m": g["m"].reshape(full),
        "V": g["V"].reshape(full),
        "ref_u": gr["u"].reshape(full),
        "ref_m": gr["m"].reshape(full),
        "ref_V": gr["V"].reshape(full),
    }
    vol = float(np.prod([hi - lo for lo, hi in env.box]))
    record = {
        "mode": "tdinvert",
        "seed": seed,
        "I": I,
        "I_V": IV,
        "M": int(X.shape[0]),
        "n_t": nt,
        "obs_slices": slices,
        "scalars": rec.scalars,
        "reference": {"nu": env.nu},
        "errors": {
            "m": l2_grid_error(grids["m"], grids["ref_m"]),
            "u": l2_grid_error(grids["u"], grids["ref_u"]),
            "V": l2_grid_error(grids["V"], grids["ref_V"]),
        },
        "mass": (g["m"].mean(axis=1) * vol).tolist(),
        "reference_mass": (gr["m"].mean(axis=1) * vol).tolist(),
        "residuals": {
            "terminal_max": float(np.abs(res["terminal"]).max()),
            "initial_max": float(np.abs(res["initial"]).max()),
            "hjb_max": float(np.abs(res["hjb"]).max()),
            "fp_max": float(np.abs(res["fp"]).max()),
        },
        "diagnostics": _strip_time(diag.to_dict()),
        "reference_diagnostics": _strip_time(ref_diag.to_dict()),
        "grid_shape": list(full),
        "grids": _save_grids(out, grids),
        "timing": dict(_timing(t0), solver_seconds=diag.seconds, reference_seconds=ref_seconds),
    }
    return record


# Reference fields hold compiled-expression closures, which do not pickle; the
# worker processes get the reference by fork inheritance (or rebuild it).
_WORKER_REF: Reference | None = None


def _init_study_worker(ref: Reference | None, cfg) -> None:
    global _WORKER_REF
    _WORKER_REF = ref if ref is not None else stationary_reference(cfg)


def _study_cell(args) -> dict:
    cfg, seed, I, ref, out = args
    ref = ref if ref is not None else _WORKER_REF
    cell_out = os.path.join(out, "cells", f"I{I:04d}_seed{seed}") if out else None
    try:
        rec = invert_with_reference(cfg, seed, ref, I=I, out=cell_out)
        rec["status"] = "ok"
    except Exception as exc:  # a failed cell is reported, not fatal
        rec = {"mode": "invert", "seed": seed, "I": I, "status": "failed", "error": str(exc)}
    if cell_out:
        write_record(os.path.join(cell_out, "record.json"), dict(rec, config=cfg))
    return rec


def run_study(cfg, out: str | None = None, threads: int = 1) -> dict:
    t0 = time.perf_counter()
    ref = stationary_reference(cfg)
    cells_spec = [(I, s) for I in cfg["study"]["I_values"] for s in cfg["seeds"]]
    if threads > 1:
        methods = multiprocessing.get_all_start_methods()
        if "fork" in methods:
            ctx, initargs = multiprocessing.get_context("fork"), (ref, cfg)
        else:  # pragma: no cover - platform dependent
            ctx, initargs = multiprocessing.get_context(methods[0]), (None, cfg)
        tasks = [(cfg, s, I, None, out) for I, s in cells_spec]
        with ProcessPoolExecutor(threads, mp_context=ctx, initializer=_init_study_worker, initargs=initargs) as ex:
            cells = list(ex.map(_study_cell, tasks))
    else:
        cells = [_study_cell((cfg, s, I, ref, out)) for I, s in cells_spec]
    rows = []
    for I in cfg["study"]["I_values"]:
        ok = [c for c in cells if c["I"] == I and c["status"] == "ok"]
        row: dict = {"I": I, "n_ok": len(ok), "n_failed": sum(1 for c in cells if c["I"] == I) - len(ok)}
        for name in ("m", "u", "V", "V_minus_hbar"):
            vals = np.array([c["errors"][name] for c in ok])
            if vals.size:
                q1, med, q3 = np.percentile(vals, [25, 50, 75])
                row[name] = {"median": med, "q25": q1, "q75": q3}
        rows.append(row)
    record = {
        "mode": "study",
        "seeds": cfg["seeds"],
        "I_values": cfg["study"]["I_values"],
        "reference": dict(ref.scalars, hbar=ref.hbar),
        "reference_diagnostics": _strip_time(ref.diagnostics),
        "rows": rows,
        "cells": [
            {"I": c["I"], "seed": c["seed"], "status": c["status"], "errors": c.get("errors"),
             "scalars": c.get("scalars"), "record": f"cells/I{c['I']:04d}_seed{c['seed']}/record.json" if out else None}
            for c in cells
        ],
        "timing": _timing(t0),
    }
    return record
