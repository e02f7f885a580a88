"""Acceptance criteria 1-10, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v`` (the lines appear in the
"acceptance criteria" summary section) or directly as a script.
"""
import json
import math
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from cbflow.cli import EXIT_OK, main
from cbflow.curvature import curvature_bundle
from cbflow.diagnostics import Monitor
from cbflow.flow import StepPolicy, initial_state, project_constant_scalar, run
from cbflow.mesh import Grid, MetricField
from cbflow.oracle import (conformally_flat, doubly_warped, flat, fourier, off_diagonal,
                           oracle_bundle_at)
from cbflow.oracle.families import AnalyticMetricFamily
from cbflow.verify import (GRID_QUANTITIES, conformal_invariance_error, flow_consistency,
                           identity_residuals, manufactured_pressure, near_singular_raised,
                           oracle_grid_errors, thin_grid)

pytestmark = pytest.mark.slow

ORDER_MIN = 3.5
S0 = -0.1


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def order(e_coarse, e_fine, ratio):
    return math.log(e_coarse / e_fine) / math.log(ratio)


# -- 1 -----------------------------------------------------------------------------

def _common_errors(fam, N, lattice, quantities):
    """Relative errors at physical points shared by every grid in the study."""
    grid = Grid((N,) * 4)
    nodes = lattice * (N // 4)
    b = curvature_bundle(fam.sample_to_grid(grid))
    o = oracle_bundle_at(fam, nodes * np.asarray(grid.spacing), bach_alt=False,
                         rm_derivatives=False)
    idx = (Ellipsis,) + tuple(nodes.T)
    return {q: float(np.abs(getattr(b, q)[idx] - getattr(o, q)).max()
                     / np.abs(getattr(o, q)).max()) for q in quantities}


def test_criterion_1_curvature_identities():
    t0 = time.perf_counter()
    bad = []
    lines = []

    def judge(label, coarse, fine, ratio):
        p = order(coarse, fine, ratio)
        lines.append(f"{label} {p:.2f}")
        if not p >= ORDER_MIN:
            bad.append(f"{label} {p:.2f}")

    fam = doubly_warped(4, 0.1, active=2)
    thin = {N: oracle_grid_errors(fam, thin_grid(4, N)) for N in (32, 64)}
    for q in GRID_QUANTITIES:
        judge(f"thin {q}", thin[32][q], thin[64][q], 2)
    ids = {N: identity_residuals(fam.sample_to_grid(thin_grid(4, N))) for N in (32, 64)}
    for key in ("dual_bach", "cotton_weyl", "bach_divergence"):
        judge(f"thin {key}", ids[32][key], ids[64][key], 2)
    fam5 = doubly_warped(5, 0.1, active=2)
    ids5 = {N: identity_residuals(fam5.sample_to_grid(thin_grid(5, N))) for N in (32, 64)}
    judge("thin bach_divergence n=5", ids5[32]["bach_divergence"],
          ids5[64]["bach_divergence"], 2)

    full = doubly_warped(4, 0.02)
    lattice = np.random.default_rng(1).integers(0, 4, (32, 4))
    errs = {N: _common_errors(full, N, lattice, GRID_QUANTITIES) for N in (12, 16)}
    for q in GRID_QUANTITIES:
        judge(f"4d {q}", errs[12][q], errs[16][q], 16 / 12)
    fids = {N: identity_residuals(full.sample_to_grid(Grid((N,) * 4))) for N in (12, 16)}
    for key in ("dual_bach", "cotton_weyl", "bach_divergence"):
        judge(f"4d {key}", fids[12][key], fids[16][key], 16 / 12)
    del fids, errs

    seconds = time.perf_counter() - t0
    if seconds >= 180:
        bad.append(f"runtime {seconds:.0f} s")
    detail = f"{seconds:.0f} s; orders: " + ", ".join(lines)
    if bad:
        detail += "; below 3.5 or over budget: " + ", ".join(bad)
    assert report(1, not bad, detail), detail


# -- 2 -----------------------------------------------------------------------------

def test_criterion_2_exact_zeros():
    m = MetricField.flat(Grid((6, 6, 6, 6)))
    b = curvature_bundle(m)
    _, ev = initial_state(m, 0.0)
    flat_sup = max(float(np.abs(x).max()) for x in (b.Gamma, b.Rm, b.B, ev.velocity))
    rng = np.random.default_rng(2)
    worst = 0.0
    for dim in (4, 5):
        pts = rng.random((8, dim))
        fams = [flat(dim), conformally_flat(dim, 0.1), doubly_warped(dim, 0.1),
                off_diagonal(dim, 0.3),
                AnalyticMetricFamily("constant_diagonal", dim, diagonal=(1.0, 2.0) + (0.5,) * (dim - 2))]
        for fam in fams:
            o = oracle_bundle_at(fam, pts, bach_alt=False, rm_derivatives=False)
            # B and Rm*Rm share units; this keeps the ratio meaningful when B = 0
            scale = max(np.abs(o.B).max(), np.abs(o.Rm).max() ** 2)
            if scale > 0:
                worst = max(worst, float(np.abs(o.bach_trace).max() / scale))
    ok = flat_sup < 1e-12 and worst < 1e-10
    detail = (f"flat sup|Gamma, Rm, B, v| = {flat_sup:.1e} (< 1e-12); "
              f"worst oracle Bach trace {worst:.1e} relative (< 1e-10)")
    assert report(2, ok, detail), detail


# -- 3 -----------------------------------------------------------------------------

def test_criterion_3_conformal_invariance():
    fam = doubly_warped(4, 0.1)
    w = fourier(fam.periods, (0.05, (0, 1, 0, 0), 0.5), (0.03, (1, 1, 0, 0), 1.3),
                (0.03, (0, 0, 1, 1), 0.7))
    sizes = (8, 12, 16)
    errs = [conformal_invariance_error(fam, w, Grid((N,) * 4)) for N in sizes]
    orders = [order(errs[i], errs[i + 1], sizes[i + 1] / sizes[i]) for i in range(2)]
    ok = min(orders) >= ORDER_MIN and errs[-1] < 1e-3
    detail = (f"relative discrepancy {', '.join(f'{e:.3e}' for e in errs)} at 8/12/16; "
              f"orders {orders[0]:.2f}, {orders[1]:.2f} (need >= 3.5, final < 1e-3)")
    assert report(3, ok, detail), detail


# -- 4 -----------------------------------------------------------------------------

def test_criterion_4_pressure_solver():
    t0 = time.perf_counter()
    err, its = manufactured_pressure(doubly_warped(4, 0.1), Grid((16,) * 4), -1.0, tol=1e-10)
    g = Grid((16, 16, 1, 1))
    near = [near_singular_raised(g, k, off) for k in ((1, 0, 0, 0), (1, 1, 0, 0))
            for off in (-5e-7, 5e-7)]
    far = near_singular_raised(g, (1, 0, 0, 0), -0.5)
    seconds = time.perf_counter() - t0
    ok = err < 1e-8 and all(near) and not far and seconds < 60
    detail = (f"manufactured L2 error {err:.2e} in {its} iterations (< 1e-8); guard raised "
              f"within 5e-7 of eigenvalues: {all(near)}, at a safe shift: {far}; {seconds:.0f} s")
    assert report(4, ok, detail), detail


# -- 5, 6, 9: one pair of runs at N and 2N -----------------------------------------

def _perturbed(N):
    fam = doubly_warped(4, 0.05, active=2)
    w = fourier(fam.periods, (0.05, (0, 1, 0, 0), 0.5), (0.03, (1, 1, 0, 0), 1.3))
    m = fam.with_conformal(w).sample_to_grid(thin_grid(4, N))
    return project_constant_scalar(m, S0)[0]


@pytest.fixture(scope="module")
def refinement_runs():
    """200 rk2 steps at 32 and 64 points with dt scaled by 2^-4.

    The coarse step comes from the CFL rule at t = 0; matched times are coarse
    step 4 and fine step 64.
    """
    start32 = _perturbed(32)
    _, ev = initial_state(start32, S0)
    dt32 = StepPolicy().time_step(ev.bundle)
    out = {}
    for N, dt, cadence, match in ((32, dt32, 4, 4), (64, dt32 / 16, 64, 64)):
        t0 = time.perf_counter()
        start = start32 if N == 32 else _perturbed(N)
        pol = StepPolicy(scheme="rk2", dt=dt, max_steps=200)
        st, ev = initial_state(start, S0, policy=pol)
        snap = {}

        def keep(state, _ev, match=match, snap=snap):
            if state.step == match:
                snap["g"] = state.metric.g.copy()

        traj = run(st, pol, cadence, evaluation=ev, monitor=Monitor(m_max=2), on_step=keep)
        assert traj.reason == "max_steps", traj.error
        out[N] = {"records": traj.records, "seconds": time.perf_counter() - t0, "start": start,
                  "dt": dt, "match": match, "g": snap["g"],
                  "drift": max(r.scalar_drift for r in traj.records)}
    return out


def test_criterion_5_constraint_preservation(refinement_runs):
    r = refinement_runs
    ratio = r[64]["drift"] / r[32]["drift"]
    slow = [N for N in r if r[N]["seconds"] >= 120]
    ok = ratio <= 2.0**-3 and not slow
    detail = (f"max drift {r[32]['drift']:.3e} (N=32), {r[64]['drift']:.3e} (N=64); "
              f"ratio {ratio:.2e} (<= 0.125); runtime {r[32]['seconds']:.0f} s, "
              f"{r[64]['seconds']:.0f} s (< 120 s each)")
    assert report(5, ok, detail), detail


def test_criterion_6_variant_equivalence(refinement_runs):
    diffs = {}
    for N, r in refinement_runs.items():
        pol = StepPolicy(scheme="rk2", dt=r["dt"], max_steps=r["match"])
        st, ev = initial_state(r["start"], S0, "modified_cbf", policy=pol)
        traj = run(st, pol, r["match"], evaluation=ev, monitor=Monitor(m_max=0))
        diffs[N] = float(np.abs(traj.state.metric.g - r["g"]).max())
    drift = {N: refinement_runs[N]["drift"] for N in diffs}
    ok = all(diffs[N] <= 10 * drift[N] for N in diffs) and diffs[64] < diffs[32]
    detail = (f"sup|g_cbf - g_mod| at matched t: {diffs[32]:.2e} (N=32), {diffs[64]:.2e} (N=64); "
              f"bounds 10x drift {10 * drift[32]:.2e}, {10 * drift[64]:.2e}; shrinking: "
              f"{diffs[64] < diffs[32]}")
    assert report(6, ok, detail), detail


def test_criterion_9_shi_monitors(refinement_runs):
    t_end = refinement_runs[64]["records"][-1].t
    peaks = {}
    for N, r in refinement_runs.items():
        recs = [x for x in r["records"] if 0 < x.t <= t_end * (1 + 1e-12)]
        rm0 = r["records"][0].rm_l2 ** 2
        peaks[N] = [max(x.shi_l2[m] for x in recs) / rm0 for m in (0, 1)]
        peaks[N] += [max(x.shi_ptwise[m] for x in recs) for m in (0, 1)]
    changes = [abs(a - b) / max(abs(a), abs(b)) for a, b in zip(peaks[32], peaks[64])]
    finite = all(math.isfinite(v) for N in peaks for v in peaks[N])
    ok = finite and max(changes) < 0.25
    names = ("shi_l2(1)", "shi_l2(2)", "shi_ptwise(1)", "shi_ptwise(2)")
    detail = "; ".join(f"{n} {a:.3e} vs {b:.3e}" for n, a, b in zip(names, peaks[32], peaks[64]))
    detail += f"; largest relative change {max(changes):.1e} (< 0.25) over (0, {t_end:.3e}]"
    assert report(9, ok, detail), detail


# -- 7 -----------------------------------------------------------------------------

def test_criterion_7_weyl_energy(refinement_runs):
    m = doubly_warped(4, 0.05).sample_to_grid(Grid((12,) * 4))
    # 12 points per period sit on the projection's high-frequency floor (~4e-4)
    m, _ = project_constant_scalar(m, S0, tol=2e-3)
    pol = StepPolicy(scheme="rk2", max_steps=10)
    st, ev = initial_state(m, S0, policy=pol)
    traj = run(st, pol, 2, evaluation=ev, monitor=Monitor(m_max=0))
    assert traj.reason == "max_steps", traj.error
    E = [r.weyl_energy for r in traj.records]
    band = refinement_runs[32]["drift"] / abs(S0)
    steps = [(b - a) / E[0] for a, b in zip(E, E[1:])]
    worst = max(steps)
    ok = worst < band and E[-1] <= E[0]
    detail = (f"Weyl energy {E[0]:.6f} -> {E[-1]:.6f} over {len(E)} records; largest relative "
              f"change between records {worst:+.2e} (band {band:.2e}); net change {E[-1] - E[0]:.3e} (<= 0)")
    assert report(7, ok, detail), detail


# -- 8 -----------------------------------------------------------------------------

def test_criterion_8_flow_consistency():
    c = flow_consistency()
    ok = c.total[0] <= 0.1 and c.total[1] < c.total[0] and 3.0 <= c.ratio <= 5.0
    detail = (f"relative mismatch {c.total[0]:.3e} at dt = {c.dt:.2e}, {c.total[1]:.3e} at dt/4 "
              f"(<= 0.1); time-discretization part shrinks {c.ratio:.2f}x (linear: 4)")
    assert report(8, ok, detail), detail


# -- 10 ----------------------------------------------------------------------------

RESUME_CONFIG = """
[grid]
sizes = 16, 16, 1, 1
[initial]
family = doubly_warped
amplitude = 0.05
active = 2
[flow]
s0 = -0.1
scheme = rk2
max_steps = 12
[projection]
tol = 1e-6
[diagnostics]
cadence = 2
[output]
checkpoint_interval = 6
"""


def test_criterion_10_determinism_and_verify(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text(RESUME_CONFIG)
    full, resumed = tmp_path / "full", tmp_path / "resumed"
    assert main(["run", "--config", str(cfg), "--out", str(full)]) == EXIT_OK
    code = main(["resume", "--resume", str(full / "step00000006.chk"), "--out", str(resumed)])
    same_csv = (full / "diagnostics.csv").read_bytes() == (resumed / "diagnostics.csv").read_bytes()
    same_chk = ((full / "step00000012.chk").read_bytes()
                == (resumed / "step00000012.chk").read_bytes())
    steps = json.loads((resumed / "manifest.json").read_text())["final_step"]
    t0 = time.perf_counter()
    verify = main(["verify"])
    seconds = time.perf_counter() - t0
    table = capsys.readouterr().out
    ok = code == EXIT_OK and same_csv and same_chk and steps == 12 and verify == EXIT_OK \
        and seconds < 600
    detail = (f"resumed CSV identical: {same_csv}, final checkpoint identical: {same_chk}; "
              f"verify exit {verify} in {seconds:.0f} s (< 600 s)")
    if verify != EXIT_OK:
        detail += "; " + table.strip().splitlines()[-1]
    assert report(10, ok, detail), detail


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
