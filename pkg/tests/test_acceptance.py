"""Acceptance suite: one recorded PASS/FAIL line per criterion, printed in the terminal summary."""
from __future__ import annotations

import math
import time

import numpy as np
import pytest

from oracles import (SCALAR_FLOWS, bv_log_flow, min_envelope_constant, real_part_spectrum, w_closed_form)
from nudich.cli import main
from nudich.dichotomy import DichotomyAnalyzer, ProjectorFamily, fit_dichotomy, is_contraction
from nudich.evolution import TimeGrid, build_grid
from nudich.myc import ProbeSpec, run_myc
from nudich.spectrum import compute_spectrum, interval_hausdorff
from nudich.sysdef import SystemDef
from nudich.triangular import build_composition, compute_W, diagonal_significance, verify_composed_dichotomy

GRID40 = TimeGrid.uniform(0.0, 40.0, 0.1)


# ---------------------------------------------------------------------------
# 1. scalar flows against antiderivatives

def test_c01_scalar_flow_exactness(acceptance):
    t_start = time.perf_counter()
    worst, where = 0.0, ""
    g = TimeGrid.uniform(0.0, 20.0, 0.1)
    for text, _, F in SCALAR_FLOWS:
        eg = build_grid(SystemDef.linear([[text]]), g)
        # all pairs t_i >= t_j: ordered products of the steps, in the log domain
        logs = np.concatenate([[0.0], np.cumsum(np.log(eg.steps[:, 0, 0]))])
        exact = np.array([F(t) for t in g.times])
        I, J = np.tril_indices(g.N + 1)
        err = float(np.max(np.abs(np.expm1((logs[I] - logs[J]) - (exact[I] - exact[J])))))
        if err > worst:
            worst, where = err, text
    elapsed = time.perf_counter() - t_start
    ok = worst <= 1e-8 and elapsed < 5.0
    acceptance(1, "scalar-flow exactness", ok,
               f"max rel err {worst:.2e} ({where}) over {len(SCALAR_FLOWS)} coefficients, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. cocycle and Liouville

LIOUVILLE_SYSTEMS = [
    ([["-0.2 + sin(t)"]], lambda t: -0.2 * t - np.cos(t) + 1.0),
    ([["-0.1", "1"], ["-1", "-0.1 + 0.2*cos(t)"]], lambda t: -0.2 * t + 0.2 * np.sin(t)),
    ([["-0.1", "1", "0"], ["-1", "-0.1", "0.3*sin(t)"], ["0", "0", "0.05*cos(t)"]],
     lambda t: -0.2 * t + 0.05 * np.sin(t)),
    ([["0", "1", "0", "0"], ["-1", "0", "0.1*t/(1+t)", "0"], ["0", "0", "-0.05", "2"],
      ["0", "exp(-t)", "-2", "-0.05"]], lambda t: -0.1 * t),
]


def _all_transitions(eg):
    """``T[i, j] = T(t_i, t_j)`` for every node pair (reverse order by inverting the forward product)."""
    N, n = eg.N, eg.n
    T = np.empty((N + 1, N + 1, n, n))
    for j in range(N + 1):
        T[j:, j] = eg.forward_chain(j)
    for j in range(N + 1):
        T[:j, j] = np.linalg.inv(T[j, :j])
    return T


def test_c02_cocycle_and_liouville(acceptance):
    g = TimeGrid.uniform(0.0, 50.0, 0.5)
    worst_c, worst_l = 0.0, 0.0
    for rows, trace_int in LIOUVILLE_SYSTEMS:
        eg = build_grid(SystemDef.linear(rows), g)
        T = _all_transitions(eg)
        norms = np.linalg.norm(T, 2, axis=(2, 3))
        for j in range(g.N + 1):
            # T(i,j) T(j,k) - T(i,k) for every i, k; Frobenius norm bounds the spectral one from above
            D = np.einsum("iab,kbc->ikac", T[:, j], T[j, :]) - T
            res = np.sqrt(np.sum(D * D, axis=(2, 3))) / np.maximum(1.0, norms[:, j][:, None] * norms[j, :][None])
            worst_c = max(worst_c, float(np.max(res)))
        tr = trace_int(g.times)
        det = np.linalg.det(T)
        worst_l = max(worst_l, float(np.max(np.abs(det / np.exp(tr[:, None] - tr[None, :]) - 1.0))))
    ok = worst_c <= 1e-10 and worst_l <= 1e-6
    acceptance(2, "cocycle and Liouville", ok,
               f"cocycle {worst_c:.2e}, Liouville {worst_l:.2e} (n=1..4, horizon 50, all triples/pairs)")
    assert ok


# ---------------------------------------------------------------------------
# 3. autonomous spectra

def _random_matrix(rng):
    n = int(rng.integers(1, 5))
    while True:
        re = np.sort(rng.uniform(-3.0, 3.0, n))
        if n == 1 or np.min(np.diff(re)) >= 0.3:
            break
    D = np.diag(re)
    if n >= 2 and rng.random() < 0.5:
        k = int(rng.integers(0, n - 1))
        D[k, k] = D[k + 1, k + 1] = re[k]        # complex pair sharing a real part
        w = rng.uniform(0.5, 2.0)
        D[k, k + 1], D[k + 1, k] = w, -w
        if k + 2 < n and re[k + 2] - re[k] < 0.3:
            D[k + 2, k + 2] = re[k] + 0.3 + rng.uniform(0, 0.5)
    Qm, _ = np.linalg.qr(rng.standard_normal((n, n)))
    V = Qm @ (np.eye(n) + 0.3 * np.triu(rng.standard_normal((n, n)), 1))
    return V @ D @ np.linalg.inv(V)


def test_c03_autonomous_spectrum(acceptance):
    rng = np.random.default_rng(2024)
    t_start = time.perf_counter()
    worst, details = 0.0, []
    for _ in range(10):
        A = _random_matrix(rng)
        pts = real_part_spectrum(A)
        sr = compute_spectrum(build_grid(SystemDef.linear([[repr(float(v)) for v in r] for r in A]), GRID40),
                              tol=1e-3)
        d = interval_hausdorff(sr, [(p, p) for p in pts])
        worst = max(worst, d)
        details.append(f"n={A.shape[0]}:{d:.1e}")
    elapsed = time.perf_counter() - t_start
    ok = worst <= 1e-3 and elapsed < 60.0
    acceptance(3, "autonomous spectrum agreement", ok, f"max Hausdorff {worst:.2e}, {elapsed:.1f}s [{' '.join(details)}]")
    assert ok


# ---------------------------------------------------------------------------
# 4. contraction test versus the rightmost spectral point

CONTRACTION_BATTERY = [
    [["-1", "0"], ["0", "-2"]],
    [["-1", "0"], ["0", "1"]],
    [["-3 - t*sin(t)"]],
    [["-1", "5"], ["0", "-2"]],
    [["0.5"]],
    [["-0.5 + sin(t)"]],
    [["-1 + 1/(1+t)"]],
    [["-0.05"]],
    [["0"]],
    [["-0.5", "2"], ["-2", "-0.5"]],
    [["0.2", "1"], ["0", "-1"]],
    [["-1/(1+t)"]],
]


def test_c04_contraction_equivalence(acceptance):
    disagreements = []
    for rows in CONTRACTION_BATTERY:
        eg = build_grid(SystemDef.linear(rows), GRID40)
        an = DichotomyAnalyzer(eg)
        contr, _ = is_contraction(eg, analyzer=an)
        right = compute_spectrum(eg, analyzer=an).rightmost
        if contr != (right < -1e-3):
            disagreements.append(f"{rows}: contraction={contr}, rightmost={right:.4g}")
    ok = not disagreements
    acceptance(4, "contraction equivalence", ok,
               f"{len(disagreements)} disagreements on {len(CONTRACTION_BATTERY)} systems"
               + (f": {disagreements}" if disagreements else ""))
    assert ok


# ---------------------------------------------------------------------------
# 5. nonuniformity witness

def _uniform_K(t_end, alpha):
    """Exact smallest ``K`` with ``exp(int_s^t a) <= K e^{-alpha (t - s)}`` on the 0.1 lattice of ``[0, t_end]``."""
    t = np.arange(0.0, t_end + 1e-9, 0.1)
    J, I = np.triu_indices(t.size)
    return min_envelope_constant(bv_log_flow(t[I], t[J]), t[I] - t[J], t[J], alpha, 0.0)


def test_c05_nonuniformity_witness(acceptance):
    s = SystemDef.linear([["-3 - t*sin(t)"]])
    eg40 = build_grid(s, GRID40)
    pf = ProjectorFamily.constant(np.eye(1), eg40.N)
    nonuni = fit_dichotomy(eg40, pf)
    part1 = bool(nonuni.feasible and 0.0 < nonuni.eps < nonuni.alpha)
    eg20 = eg40.truncated(200)
    u20 = fit_dichotomy(eg20, ProjectorFamily.constant(np.eye(1), eg20.N), fix_eps=0.0)
    u40 = fit_dichotomy(eg40, pf, fix_eps=0.0)
    infeasible = not (u20.feasible and u40.feasible)
    ratio = u40.K / u20.K if (u20.feasible and u40.feasible) else math.inf
    part2 = infeasible or ratio >= 10.0
    # lattice oracle: for every uniform rate the exact minimal K grows at least tenfold
    lattice = [_uniform_K(40.0, a) / _uniform_K(20.0, a) for a in np.linspace(0.05, 3.0, 12)]
    part3 = min(lattice) >= 10.0
    ok = part1 and part2 and part3
    acceptance(5, "nonuniformity witness", ok,
               f"nonuniform alpha={nonuni.alpha:.4g} eps={nonuni.eps:.4g}; uniform fit "
               + ("infeasible" if infeasible else f"K20={u20.K:.3g} K40={u40.K:.3g} ratio {ratio:.3g}")
               + f"; lattice min ratio {min(lattice):.3g}")
    assert ok


# ---------------------------------------------------------------------------
# 6, 8. triangular battery

TRIANGULAR_BATTERY = {
    "both-contraction": [["-1", "1"], ["0", "-2"]],
    "mixed-sign": [["1", "1"], ["0", "-2"]],
    "equal-rate": [["-1", "1"], ["0", "-1"]],
    "nonautonomous": [["-1 - 0.5*sin(t)", "exp(-t)"], ["0", "2"]],
    "3x3-oscillating": [["-1", "0.5", "cos(t)"], ["0", "-2", "1"], ["0", "0", "1"]],
    "3x3-mixed-first-block": [["-1", "0.5", "1"], ["0", "1", "0"], ["0", "0", "-2"]],
}


def _battery_system(name):
    rows = TRIANGULAR_BATTERY[name]
    return SystemDef.linear(rows, block_split=len(rows) - 1, name=name)


@pytest.fixture(scope="module")
def composed_reports():
    out = {}
    for name in TRIANGULAR_BATTERY:
        tc = build_composition(_battery_system(name), GRID40)
        out[name] = verify_composed_dichotomy(tc)
    return out


def test_c06_composed_dichotomy(acceptance, composed_reports):
    bad, worst = [], {"inv": 0.0, "offdiag": -math.inf}
    for name, rep in composed_reports.items():
        worst["inv"] = max(worst["inv"], rep.invariance.projector)
        worst["offdiag"] = max(worst["offdiag"], rep.offdiag_stable, rep.offdiag_unstable)
        checks = {"invariance": rep.invariance.projector <= 1e-6, "offdiag_stable": rep.offdiag_stable <= 0.0,
                  "offdiag_unstable": rep.offdiag_unstable <= 0.0, "rate": rep.fitted_rate_ok, "bound_R": rep.bound_R.valid}
        bad += [f"{name}:{k}" for k, v in checks.items() if not v]
    branches = sorted({r.predicted.branch for r in composed_reports.values()})
    ok = not bad
    acceptance(6, "composed dichotomy battery", ok,
               f"{len(composed_reports)} cases, branches {branches}, max invariance {worst['inv']:.2e}, "
               f"max off-diagonal residual {worst['offdiag']:.3g}" + (f"; failures {bad}" if bad else ""))
    assert ok


def test_c08_restriction(acceptance, composed_reports):
    rows = []
    for name, rep in composed_reports.items():
        rows.append(f"{name}:{'C' if rep.composed_certified else '-'}{''.join('B' if b else '-' for b in rep.blocks_certified)}")
    bad = [n for n, r in composed_reports.items() if r.composed_certified and not all(r.blocks_certified)]
    certified = sum(r.composed_certified for r in composed_reports.values())
    ok = not bad
    acceptance(8, "restriction direction", ok, f"{certified} composed-certified, {len(bad)} exceptions [{' '.join(rows)}]")
    assert ok


# ---------------------------------------------------------------------------
# 7. diagonal significance

def test_c07_diagonal_significance(acceptance):
    worst, bad = 0.0, []
    systems = [_battery_system(n) for n in TRIANGULAR_BATTERY]
    systems.append(SystemDef.linear([["-1", "1", "sin(t)"], ["0", "-2 + 0.5*cos(t)", "1"], ["0", "0", "0.5"]],
                                    triangular=True, name="3x3-scalar-diagonal"))
    for s in systems:
        rep = diagonal_significance(s, GRID40, tol=1e-3)
        worst = max(worst, rep.distance)
        if rep.distance > 2e-3:
            bad.append(f"{s.name}:{rep.distance:.2e}")
    ok = not bad
    acceptance(7, "diagonal significance", ok, f"max Hausdorff {worst:.2e} over {len(systems)} systems"
               + (f"; failures {bad}" if bad else ""))
    assert ok


# ---------------------------------------------------------------------------
# 9. closed-form off-diagonal block

def test_c09_closed_form_W(acceptance):
    tc = build_composition(SystemDef.linear([["-1", "1"], ["0", "-2"]], block_split=1), GRID40)
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        i, j = sorted(rng.integers(0, tc.N + 1, 2), reverse=True)
        err = abs(compute_W(tc, int(i), int(j))[0, 0] - w_closed_form(tc.times[i], tc.times[j]))
        worst = max(worst, err)
    ok = worst <= 1e-7
    acceptance(9, "closed-form W", ok, f"max abs error {worst:.2e} at 50 sampled pairs")
    assert ok


# ---------------------------------------------------------------------------
# 10. stability checks

MYC_CASES = [
    ("decay", SystemDef.nonlinear(["-x1"], triangular=True, name="decay"), ProbeSpec(), set()),
    ("tri2", SystemDef.nonlinear(["-x1 + exp(-2*t)*sin(x2)", "-x2"], triangular=True, name="tri2"),
     ProbeSpec(), set()),
    ("sign-flip", SystemDef.nonlinear(["x1 + exp(-2*t)*sin(x2)", "-x2"], triangular=True, name="flip"),
     ProbeSpec(), {"a"}),
    ("coupling-t", SystemDef.nonlinear(["-x1 + t*x2", "-x2"], triangular=True, name="offdiag_t"),
     ProbeSpec(), {"b"}),
    ("budget", SystemDef.nonlinear(["(-3-t*sin(t))*x1 + 0.1*tanh(x1)"], triangular=True, name="budget"),
     ProbeSpec(t0s=(0.0,), linear_part=(("-3-t*sin(t)",),), x0s=((1.0,), (-1.0,))), {"T2"}),
]


@pytest.fixture(scope="module")
def myc_results():
    return {name: run_myc(s, spec) for name, s, spec, _ in MYC_CASES}


def test_c10_stability_checks(acceptance, myc_results):
    rows, bad = [], []
    for name, _, _, intended in MYC_CASES:
        rep = myc_results[name]
        got = rep.failed
        rows.append(f"{name}:failed={sorted(got)}")
        if got != intended:
            bad.append(f"{name}: expected {sorted(intended)}, got {sorted(got)}")
    dec = myc_results["decay"].stability
    terminal = max(tr.terminal_norm for r in ("decay", "tri2") for tr in myc_results[r].stability.trajectories)
    ok = not bad
    acceptance(10, "stability checks and failure battery", ok,
               f"pass-system terminal norm {terminal:.2e}, delta(0,1)={dec.delta(0.0, 1.0):.4g}; {' '.join(rows)}"
               + (f"; mismatches {bad}" if bad else ""))
    assert ok


# ---------------------------------------------------------------------------
# 11. determinism

def test_c11_cli_determinism(acceptance, tmp_path, capsys):
    lin = tmp_path / "tri.json"
    lin.write_text('{"kind": "linear", "n": 2, "entries": [["-1", "cos(t)"], ["0", "1"]], "block_split": 1}')
    non = tmp_path / "tri2.json"
    non.write_text('{"kind": "nonlinear", "n": 2, "triangular": true, '
                   '"entries": ["-x1 + exp(-2*t)*sin(x2)", "-x2"]}')
    spec = tmp_path / "spec.json"
    spec.write_text('{"t0s": [0.0], "horizon": 20.0, "bisect_steps": 3, "n_random": 1, "n_trajectory_paths": 1}')
    cmds = {
        "spectrum": ["spectrum", "--system", str(lin), "--t-end", "30"],
        "dichotomy": ["dichotomy", "--system", str(lin), "--t-end", "30", "--lam", "0.2"],
        "compose": ["compose", "--system", str(lin), "--t-end", "30", "--significance"],
        "myc": ["myc", "--system", str(non), "--probe-spec", str(spec)],
    }
    differing = []
    for name, argv in cmds.items():
        outs = []
        # first two runs share a cache (build, then load); the third starts from an empty cache
        for run, cache in enumerate(["shared", "shared", "fresh"]):
            out = tmp_path / f"{name}-{run}.json"
            assert main(argv + ["--cache-dir", str(tmp_path / cache), "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        capsys.readouterr()
        if len(set(outs)) != 1:
            differing.append(name)
    ok = not differing
    acceptance(11, "CLI determinism", ok, f"{len(cmds)} commands x 3 runs byte-identical"
               if ok else f"differing reports: {differing}")
    assert ok
