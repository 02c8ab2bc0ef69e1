from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import w_closed_form, w_quad
from nudich.errors import PreconditionError
from nudich.evolution import EvolutionGrid, TimeGrid, build_grid
from nudich.sysdef import SystemDef
from nudich.triangular import (TriangularComposition, _union, build_composition, check_coupling_bound, compute_linking,
                               compute_R, compute_W, gregory_weights, interpolatory_weights, w_split_identity,
                               predicted_constants, verify_bound_R, verify_composed_dichotomy, verify_invariance)

GRID = TimeGrid.uniform(0.0, 40.0, 0.1)


def _comp(a, b, c):
    return build_composition(SystemDef.linear([[a, c], ["0", b]], block_split=1), GRID)


@pytest.fixture(scope="module")
def stable_pair():
    return _comp("-1", "-2", "1")


@pytest.fixture(scope="module")
def mixed_pair():
    return _comp("1", "-2", "1")


# -- quadrature -------------------------------------------------------------

@given(st.integers(10, 80), st.integers(0, 4), st.floats(0.05, 1.0))
def test_gregory_exact_for_quartics(m, deg, h):
    t = h * np.arange(m + 1)
    w = gregory_weights(m)
    assert w.sum() == pytest.approx(m, rel=1e-12)
    approx = h * np.dot(w, t ** deg)
    assert approx == pytest.approx(t[-1] ** (deg + 1) / (deg + 1), rel=1e-10, abs=1e-12)


@given(st.integers(2, 7), st.floats(0.0, 1.0), st.floats(0.1, 1.0))
def test_interpolatory_exact(k, a, span):
    nodes = np.linspace(0.0, 2.0, k + 1)
    b = a + span
    w = interpolatory_weights(nodes, a, b)
    for deg in range(k + 1):
        assert np.dot(w, nodes ** deg) == pytest.approx((b ** (deg + 1) - a ** (deg + 1)) / (deg + 1),
                                                        rel=1e-8, abs=1e-10)


# -- predicted constants ----------------------------------------------------

def test_predicted_distinct_branch():
    pc = predicted_constants(1.0, 2.0, 1.5, 0.8, 2.0, 0.1, omega=-1.0, omega_t=-2.0)
    assert pc.branch == "distinct"
    assert pc.K1 == pytest.approx(2.0 * 0.8 * 1.5 ** 2 * (1.0 + 2.0 / 3.0))
    assert pc.alpha1 == 1.0 and pc.K3 == pc.K1 and pc.alpha3 == 1.0 and pc.eps3 == 0.1
    assert math.isnan(pc.K2) and math.isnan(pc.gamma)
    assert pc.M1 == pytest.approx(2.0 * 0.8 * 2.0 / 1.0)
    assert pc.omega1 == -1.0


def test_predicted_equal_branch():
    pc = predicted_constants(1.0, 1.0005, 1.2, 0.5, 1.5, 0.2)
    assert pc.branch == "equal"
    assert pc.gamma == pytest.approx(0.4)
    assert pc.K2 == pytest.approx(2 * 1.5 * 0.5 * 1.44 / 0.4)
    assert pc.alpha2 == pytest.approx(0.6) and pc.alpha3 == pc.alpha2
    assert pc.M2 == pytest.approx(max(1.0, 0.75)) and pc.omega2 == 1.0
    assert math.isnan(pc.K1)


@pytest.mark.parametrize("kw", [
    dict(alpha=1.0, alpha_t=2.0, theta=1.0),
    dict(alpha=1.0, alpha_t=1.0, theta=0.9, gamma=0.2),
    dict(alpha=1.0, alpha_t=1.0, theta=0.1, gamma=1.5),
    dict(alpha=-1.0, alpha_t=1.0, theta=0.0),
])
def test_predicted_preconditions(kw):
    with pytest.raises(PreconditionError):
        predicted_constants(kw.pop("alpha"), kw.pop("alpha_t"), 1.0, 1.0, 1.0, kw.pop("theta"), **kw)


# -- composed objects ---------------------------------------------------------

def test_W_closed_form(stable_pair):
    tc = stable_pair
    for i, j in [(5, 0), (100, 40), (350, 349), (300, 0), (200, 193)]:
        got = compute_W(tc, i, j)[0, 0]
        assert got == pytest.approx(w_closed_form(tc.times[i], tc.times[j]), abs=1e-9)


def test_W_reverse_order(stable_pair):
    tc = stable_pair
    t, s = tc.times[10], tc.times[25]
    assert compute_W(tc, 10, 25)[0, 0] == pytest.approx(w_closed_form(t, s), rel=1e-8)


def test_W_nonautonomous_against_quad():
    tc = _comp("-1", "-2", "cos(t)")
    for i, j in [(30, 3), (120, 60), (7, 0)]:
        ref = w_quad(-1.0, -2.0, math.cos, tc.times[i], tc.times[j])
        assert compute_W(tc, i, j)[0, 0] == pytest.approx(ref, abs=1e-9)


def test_linking_improper_integral(mixed_pair):
    lk = compute_linking(mixed_pair)
    # first block unstable (Q_A = 1), second stable: -int_0^inf e^{-tau} e^{-2 tau} dtau
    assert lk.matrix[0, 0] == pytest.approx(-1.0 / 3.0, abs=1e-5)
    assert lk.apply([1.0])[0] == pytest.approx(lk.matrix[0, 0])


def test_R_crosscheck_and_split(mixed_pair):
    tc = mixed_pair
    # the propagation form multiplies R(0) by X(t,0) Y(0,t) = e^{3t}; keep t moderate
    rr = compute_R(tc, 20)
    assert rr.R[0, 0] == pytest.approx(-1.0 / 3.0, abs=1e-5)
    assert rr.crosscheck <= 1e-5
    np.testing.assert_allclose(rr.R, rr.R1 + rr.R2)
    assert w_split_identity(tc, 40, 10) <= 1e-6
    with pytest.raises(PreconditionError):
        compute_R(tc, tc.N)


@pytest.mark.parametrize("fx", ["stable_pair", "mixed_pair"])
def test_invariance_and_bounds(fx, request):
    tc = request.getfixturevalue(fx)
    inv = verify_invariance(tc)
    assert inv.projector <= 1e-6 and inv.identity <= 1e-6 and inv.idempotency <= 1e-8
    assert verify_bound_R(tc).valid
    rng = np.random.default_rng(1)
    triples = [tuple(sorted(rng.choice(tc.n_valid, 3, replace=False), reverse=True)) for _ in range(20)]
    assert check_coupling_bound(tc, triples) <= 1e-9
    rep = verify_composed_dichotomy(tc)
    assert rep.passed, rep.to_dict()["residuals"]


def test_bound_R_falsified_by_shrunken_kappa(mixed_pair):
    rep = verify_bound_R(mixed_pair)
    # the bound scales with kappa^2; shrink it below the measured |R|
    scale = 0.9 * math.sqrt(rep.norm_at_worst / rep.bound_at_worst)
    assert not verify_bound_R(mixed_pair, kappa_scale=scale).valid


def test_composition_preconditions():
    eg = build_grid(SystemDef.linear([["-1", "1"], ["1", "-2"]]), TimeGrid.uniform(0.0, 5.0, 0.1))
    with pytest.raises(PreconditionError):
        TriangularComposition(eg, 1, np.zeros((eg.N + 1, 1, 1)))
    with pytest.raises(PreconditionError):
        _comp("0", "-1", "1")


def test_union():
    assert _union([(2, 3), (0, 1), (0.5, 1.5)]) == ((0, 1.5), (2, 3))
