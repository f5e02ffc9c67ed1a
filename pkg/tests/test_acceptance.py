"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

These runs are long (minutes to tens of minutes each).  Select them alone with
``pytest tests/test_acceptance.py -v`` or skip them with ``-m "not acceptance"``.
"""

import subprocess
import sys
import time
from pathlib import Path

import pytest

from pfm_fsi import experiments as E

pytestmark = pytest.mark.acceptance

MINUTE = 60.0


@pytest.fixture
def report(capsys):
    def emit(number, title, passed, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}: {detail}", flush=True)
    return emit


def timed(fn, **kw):
    start = time.time()
    out = fn(**kw)
    return out, time.time() - start


def test_free_acceleration_exact(report):
    out, secs = timed(E.free_acceleration, n_reinit_values=(1, 5, 20), steps=200, tol=1e-5, n=64)
    ok = out["passed"] and secs < 1 * MINUTE
    report(1, "free acceleration", ok,
           f"max |u - k g dt| = {out['max_error']:.2e} (tol 1e-5) over n_reinit {list(out['cases'])}, "
           f"{secs:.0f} s (limit 60 s)")
    assert out["passed"]
    assert secs < 1 * MINUTE


def test_buffer_path_integral(report):
    out, secs = timed(E.buffer_resummation, steps=50, tol=1e-12)
    ok = out["passed"] and secs < 1 * MINUTE
    report(2, "buffer re-summation", ok,
           f"Lambda rel {out['lambda_rel']:.1e}, Upsilon rel {out['upsilon_rel']:.1e} (tol 1e-12), "
           f"{out['logged_steps']} logged steps, {secs:.0f} s")
    assert out["passed"]
    assert secs < 1 * MINUTE


def test_flow_map_fidelity(report):
    out, secs = timed(E.flow_map_fidelity, n=64, steps=20, cfl=0.5)
    ok = out["passed"] and secs < 1 * MINUTE
    report(3, "flow-map fidelity", ok,
           f"max |FT - I| = {out['max_ft_drift']:.1e} (tol 1e-3), RK4 orbit slope {out['orbit_slope']:.2f} "
           f"(4 +- 0.2), {secs:.0f} s")
    assert out["passed"]
    assert secs < 1 * MINUTE


def test_karman_street(report):
    high, secs_high = timed(E.karman, viscosity=4e-5, t_end=80.0)
    low, secs_low = timed(E.karman, viscosity=4e-4, t_end=80.0)
    st = high.get("strouhal", float("nan"))
    sheds = high["shedding"] and 0.15 <= st <= 0.25
    steady = (not low["shedding"]) and low["rms_over_inflow"] < 0.05
    ok = sheds and steady and secs_high < 30 * MINUTE and secs_low < 30 * MINUTE
    report(4, "Karman street", ok,
           f"Re 200: St = {st:.3f} over {high.get('periods', 0):.1f} periods, rms/U {high['rms_over_inflow']:.3f}; "
           f"Re 20: shedding={low['shedding']}, rms/U {low['rms_over_inflow']:.4f}; "
           f"{secs_high / 60:.1f} + {secs_low / 60:.1f} min")
    assert sheds
    assert steady
    assert secs_high < 30 * MINUTE and secs_low < 30 * MINUTE


def test_sedimentation(report):
    out, secs = timed(E.sedimentation, ratios=(5.0, 15.0, 30.0))
    runs = out["runs"]
    detail = ", ".join(f"{r:g}:1 v={runs[r]['terminal']:.4f} std {100 * runs[r]['rel_std']:.1f}%"
                       for r in out["ratios"])
    ok = out["passed"] and secs < 30 * MINUTE
    report(5, "cylinder sedimentation", ok, f"{detail}; monotone={out['monotone']}; {secs / 60:.1f} min")
    assert all(v["converged"] for v in runs.values())
    assert out["monotone"]
    assert secs < 30 * MINUTE


def test_ablation(report):
    out, secs = timed(E.ablation)
    p, d = out["pfm"], out["direct_hfmc"]
    ok = out["passed"] and secs < 20 * MINUTE
    report(6, "direct-hybrid ablation", ok,
           f"pfm v={p['mean']:.4f} std {100 * p['rel_std']:.1f}% converged={p['converged']}; "
           f"direct_hfmc failed={bool(d['failed'])} std {100 * d['rel_std']:.1f}% "
           f"amplitude {100 * d['amplitude']:.0f}%; {secs / 60:.1f} min")
    assert p["converged"]
    assert out["direct_fails"]
    assert secs < 20 * MINUTE


def test_leapfrog_energy(report):
    out, secs = timed(E.leapfrog_energy, steps=500, n=128)
    ok = out["passed"] and secs < 15 * MINUTE
    report(7, "leapfrog energy", ok,
           f"retained pfm {100 * out['pfm']['retained']:.1f}% vs apic_midpoint "
           f"{100 * out['apic_midpoint']['retained']:.1f}% (gap {out['gap_points']:.1f} points, need 10); "
           f"{secs / 60:.1f} min")
    assert out["gap_points"] >= 10.0
    assert secs < 15 * MINUTE


def test_swimmer(report):
    out, secs = timed(E.swimmer, periods=5, nx=192, ny=96)
    ok = out["passed"] and secs < 40 * MINUTE
    report(8, "swimmer self-propulsion", ok,
           f"displacement {out['body_lengths']:+.2f} body lengths (need > 0.5), velocity peak "
           f"{out['frequency']:.3f} Hz vs 1/T = {out['target_frequency']:.3f} (bin {out['bin_width']:.3f}); "
           f"{secs / 60:.1f} min")
    assert out["direction_ok"]
    assert out["frequency_ok"]
    assert secs < 40 * MINUTE


def test_ibm_flag(report):
    out, secs = timed(E.flag_compare)
    ok = out["passed"] and secs < 20 * MINUTE
    report(9, "IBM flag", ok,
           f"downstream max|w| pfm {out['pfm']['downstream_max_vort']:.2f} vs euler_sl "
           f"{out['euler_sl']['downstream_max_vort']:.2f} (ratio {out['ratio']:.2f}, need 2); "
           f"third-law error {out['third_law_max']:.1e} (tol 1e-2); {secs / 60:.1f} min")
    assert out["ratio"] >= 2.0
    assert out["third_law_max"] < 0.01
    assert secs < 20 * MINUTE


def test_property_suites(report):
    here = Path(__file__).parent
    suites = sorted(str(p) for p in here.glob("test_*.py") if p.name != Path(__file__).name)
    start = time.time()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *suites],
                          capture_output=True, text=True, cwd=here.parent)
    secs = time.time() - start
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and secs < 5 * MINUTE
    report(10, "property suites", ok, f"{summary}; {secs:.0f} s (limit 300 s)")
    assert proc.returncode == 0, proc.stdout[-3000:]
    assert secs < 5 * MINUTE
