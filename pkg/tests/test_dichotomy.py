from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from oracles import bv_log_flow, min_envelope_constant
from nudich.dichotomy import (DichotomyAnalyzer, ProjectorFamily, fit_dichotomy, fit_envelope, fit_growth,
                              is_contraction, verify_certificate)
from nudich.errors import PreconditionError
from nudich.evolution import TimeGrid, build_grid
from nudich.sysdef import SystemDef


def _grid(rows, t_end=20.0, h=0.2):
    return build_grid(SystemDef.linear(rows), TimeGrid.uniform(0.0, t_end, h))


def _dense_lp_value(d, s, f, w, margin=None):
    """Primary objective of the envelope LP solved on all points at once."""
    A = np.column_stack([-np.ones_like(d), -d, -s])
    b = -f
    if margin is not None:
        A = np.vstack([A, [0.0, 1.0, 1.0]])
        b = np.append(b, -margin)
    res = linprog([1.0, w, w], A_ub=A, b_ub=b, bounds=[(0, None), (None, None), (0, None)], method="highs")
    assert res.status == 0
    return res.fun


_samples = st.integers(0, 10_000).map(lambda seed: np.random.default_rng(seed))


@given(_samples)
def test_envelope_dominates_and_is_optimal(rng):
    n = 400
    d = rng.uniform(0, 10, n)
    s = rng.uniform(0, 10, n)
    f = -0.8 * d + 0.1 * s + rng.normal(0, 0.3, n)
    env = fit_envelope(d, s, f, ref_lag=2.5)
    assert env.ok
    assert env.c0 >= 0 and env.b >= 0
    assert np.max(f - (env.c0 + env.a * d + env.b * s)) <= 1e-9
    assert env.c0 + 2.5 * (env.a + env.b) == pytest.approx(_dense_lp_value(d, s, f, 2.5), abs=1e-7)


@given(_samples)
def test_envelope_margin_and_fixed_b(rng):
    n = 300
    d = rng.uniform(0, 10, n)
    s = rng.uniform(0, 10, n)
    f = -1.0 * d + 0.2 * s + rng.normal(0, 0.2, n)
    env = fit_envelope(d, s, f, margin=0.05)
    assert env.a + env.b <= -0.05 + 1e-9
    uni = fit_envelope(d, s, f, fix_b=0.0)
    assert uni.b == 0.0
    assert np.max(f - (uni.c0 + uni.a * d)) <= 1e-9


def test_scalar_contraction_rate():
    eg = _grid([["-1"]])
    ok, cert = is_contraction(eg)
    assert ok
    assert cert.alpha == pytest.approx(1.0, abs=2e-2)
    assert cert.K == pytest.approx(1.0, rel=0.05)
    assert verify_certificate(eg, cert).valid


@pytest.mark.parametrize("rows", [[["0.5"]], [["0"]], [["-1", "0"], ["0", "1"]]])
def test_not_contraction(rows):
    ok, _ = is_contraction(_grid(rows))
    assert not ok


def test_saddle_dichotomy_projector():
    eg = _grid([["-1", "0"], ["0", "1"]])
    ok, cert, reason, rank = DichotomyAnalyzer(eg).verdict(0.0)
    assert ok, reason
    assert rank == 1
    np.testing.assert_allclose(cert.projectors.P, np.broadcast_to(np.diag([1.0, 0.0]), cert.projectors.P.shape),
                               atol=1e-8)
    assert cert.alpha == pytest.approx(1.0, abs=2e-2)
    assert cert.projectors.idempotency_residual <= 1e-10
    assert verify_certificate(eg, cert).valid


def test_spectral_shift_has_no_gap():
    ok, _, reason, _ = DichotomyAnalyzer(_grid([["-1", "0"], ["0", "1"]])).verdict(1.0)
    assert not ok and "gap" in reason


def test_nonuniform_certificate_against_exact_flow():
    eg = _grid([["-3 - t*sin(t)"]], t_end=40.0, h=0.1)
    cert = fit_dichotomy(eg, ProjectorFamily.constant(np.eye(1), eg.N))
    assert cert.feasible and 0 < cert.eps < cert.alpha
    t = eg.times
    I, J = np.triu_indices(t.size)
    ti, si = t[J], t[I]          # ti >= si
    K_exact = min_envelope_constant(bv_log_flow(ti, si), ti - si, si, cert.alpha, cert.eps)
    assert cert.K >= K_exact * (1 - 1e-6)


def test_fit_dichotomy_shape_check():
    eg = _grid([["-1"]])
    with pytest.raises(PreconditionError):
        fit_dichotomy(eg, ProjectorFamily.constant(np.eye(1), eg.N - 1))


def test_growth_bound_dominates():
    eg = _grid([["-1 + 0.5*sin(t)", "1"], ["0", "-2"]])
    for kind in ("half", "full"):
        gc = fit_growth(eg, kind)
        assert gc.max_violation <= 1e-9
    gc = fit_growth(eg, "half")
    for i, j in [(10, 0), (50, 20), (eg.N, 5)]:
        assert np.linalg.norm(eg.forward(i, j), 2) <= gc.bound(eg.times[i] - eg.times[j], eg.times[j]) * (1 + 1e-9)
    with pytest.raises(PreconditionError):
        fit_growth(eg, "sideways")
