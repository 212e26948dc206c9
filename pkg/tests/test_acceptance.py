"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line; the lines are collected again in
the terminal summary.  The tolerances are the targets, not tuned to the
results.  Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import ROOT, load_config
from mfggp.cli import main

pytestmark = pytest.mark.acceptance

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def run_mode(tmp_path, mode: str, cfg: dict, *extra) -> tuple[dict, float]:
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / f"{mode}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "out"
    t0 = time.perf_counter()
    code = main([mode, "--config", str(path), "--out", str(out), *extra])
    elapsed = time.perf_counter() - t0
    rec = json.loads((out / "record.json").read_text())
    assert code == 0, rec.get("error")
    return rec, elapsed


def test_criterion_1_explicit_round_trip(tmp_path):
    cfg = load_config("explicit_1d")
    rec, secs = run_mode(tmp_path, "invert", cfg)
    e = rec["errors"]
    dh = abs(rec["scalars"]["hbar"] - rec["reference"]["hbar"])
    ok = e["m"] <= 1e-2 and e["u"] <= 1e-2 and dh <= 2e-2 and secs < 30
    report(1, ok, f"L2(m)={e['m']:.2e} L2(u)={e['u']:.2e} |dHbar|={dh:.2e} runtime={secs:.1f}s")


def test_criterion_2_viscosity(tmp_path):
    parts, ok = [], True
    for nu in (1.0, 0.1):
        cfg = load_config("viscosity", environment__nu=nu)
        rec, secs = run_mode(tmp_path / f"nu{nu}", "invert", cfg)
        rel = abs(rec["scalars"]["nu"] - nu) / nu
        ok &= rel <= 0.15 and secs < 300
        parts.append(f"nu={nu}: nu_rec={rec['scalars']['nu']:.6f} rel={rel:.3f} runtime={secs:.0f}s")
    report(2, ok, "; ".join(parts))


def test_criterion_3_exponent(tmp_path):
    cfg = load_config("exponent", problem__M=200)
    rec, secs = run_mode(tmp_path, "invert", cfg)
    a = rec["scalars"]["alpha"]
    ok = abs(a - 2.0) <= 0.15 and secs < 300
    report(3, ok, f"alpha_rec={a:.6f} (|err|={abs(a - 2):.3f}, tol 0.15) Hbar_rec={rec['scalars']['hbar']:.4f} "
              f"heldout HJB rms={rec['heldout_residuals']['hjb_rms']:.3g} runtime={secs:.0f}s")


def test_criterion_4_gauge(tmp_path):
    cfg = load_config("gauge")
    rec, secs = run_mode(tmp_path, "invert", cfg)
    e = rec["errors"]
    ok = e["V_minus_hbar"] <= 0.1
    report(4, ok, f"L2(V-Hbar)={e['V_minus_hbar']:.4f} raw L2(V)={e['V']:.4f} runtime={secs:.0f}s")


def test_criterion_5_nonlocal(tmp_path):
    cfg = load_config("nonlocal")
    rec, secs = run_mode(tmp_path, "invert", cfg)
    s = rec["scalars"]["sigma"]
    ok = abs(s - 1.0) <= 0.15 and secs < 600
    report(5, ok, f"sigma_rec={s:.6f} (|err|={abs(s - 1):.3f}, tol 0.15) Hbar_rec={rec['scalars']['hbar']:.4f} "
              f"Hbar_ref={rec['reference']['hbar']:.4f} runtime={secs:.0f}s")


def test_criterion_6_observation_decay(tmp_path):
    cfg = load_config("study")
    assert len(cfg["seeds"]) == 10 and cfg["study"]["I_values"] == [10, 20, 40]
    threads = str(max(1, min(4, os.cpu_count() or 1)))
    rec, secs = run_mode(tmp_path, "study", cfg, "--threads", threads)
    rows = rec["rows"]
    med = [r["m"]["median"] for r in rows]
    ok = all(r["n_ok"] == 10 for r in rows) and all(b <= a for a, b in zip(med, med[1:]))
    desc = ", ".join(f"I={r['I']}: {m:.4f}" for r, m in zip(rows, med))
    report(6, ok, f"median L2(m) {desc} runtime={secs:.0f}s")


PROPERTY_TESTS = [
    "tests/test_kernels.py::test_finite_differences_low_order",
    "tests/test_kernels.py::test_finite_differences_higher_order",
    "tests/test_kernels.py::test_finite_differences_1d_any_period",
    "tests/test_kernels.py::test_swap_symmetry_of_derivatives",
    "tests/test_gram.py::test_round_trip_and_positive_definite",
    "tests/test_gram.py::test_representer_interpolates",
    "tests/test_stationary.py::test_residuals_vanish_at_explicit_solution",
    "tests/test_stationary.py::test_gauge_identity",
    "tests/test_stationary.py::test_objective_monotone",
    "tests/test_stationary.py::test_quadratic_problem_one_iteration",
    "tests/test_stationary.py::test_gradient_matches_finite_differences",
    "tests/test_timedep.py::test_gradient_matches_finite_differences",
]


def test_criterion_7_property_suite():
    res = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_TESTS],
        cwd=ROOT, capture_output=True, text=True,
    )
    tail = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr.strip()[-200:]
    report(7, res.returncode == 0, f"{len(PROPERTY_TESTS)} property tests: {tail}")


def test_criterion_8_time_dependent(tmp_path):
    cfg = load_config("timedep", environment__n_t=10, problem__M=30)
    rec, secs = run_mode(tmp_path, "tdinvert", cfg)
    r = rec["residuals"]
    mass_gap = float(np.max(np.abs(np.array(rec["mass"]) - np.array(rec["reference_mass"]))))
    eV = rec["errors"]["V"]
    ok = r["terminal_max"] <= 1e-4 and r["initial_max"] <= 1e-4 and mass_gap <= 0.05 and eV <= 0.2 and secs < 600
    report(
        8, ok,
        f"terminal={r['terminal_max']:.2e} initial={r['initial_max']:.2e} (tol 1e-4) "
        f"max mass gap={mass_gap:.2e} L2(V)={eV:.4f} runtime={secs:.0f}s",
    )
