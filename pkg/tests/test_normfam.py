from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nudich.dichotomy import DichotomyAnalyzer, DichotomyCertificate, ProjectorFamily, fit_growth
from nudich.errors import PreconditionError
from nudich.evolution import TimeGrid, build_grid
from nudich.normfam import (EPS_REG, NormFamily, build_lyapunov_family, c_sup_norm, check_sandwich, fit_sandwich,
                            identity_family, op_norm, uniformize, vector_norm, write_family_csv)
from nudich.sysdef import SystemDef


def _scalar_cert(eg, alpha=1.0):
    pf = ProjectorFamily.constant(np.eye(1), eg.N)
    return DichotomyCertificate(1.0, alpha, 0.0, pf, 0.0, -math.inf, True)


def test_scalar_family_closed_form():
    eg = build_grid(SystemDef.linear([["-1"]]), TimeGrid.uniform(0.0, 10.0, 0.1))
    nf = build_lyapunov_family(eg, _scalar_cert(eg), horizon=2.0)
    steps_in_window = np.minimum(20, eg.N - np.arange(eg.N + 1))
    expected = 1.0 + EPS_REG + 0.1 * steps_in_window
    np.testing.assert_allclose(nf.G[:, 0, 0], expected, rtol=1e-9)


@pytest.fixture(scope="module")
def saddle():
    eg = build_grid(SystemDef.linear([["-1 + 0.3*sin(t)", "1"], ["0", "1"]]), TimeGrid.uniform(0.0, 20.0, 0.1))
    ok, cert, _, _ = DichotomyAnalyzer(eg).verdict(0.0)
    assert ok
    return eg, cert


def test_uniformized_certificate(saddle):
    eg, cert = saddle
    gc = fit_growth(eg, "half")
    nf = build_lyapunov_family(eg, cert, gc)
    uc = uniformize(eg, nf, cert)
    assert uc.residual <= 1e-9
    assert uc.kappa >= 1.0 and uc.kappa_tilde >= 1.0
    # weights that sum the whole window make the bound nearly uniform
    assert uc.slack < 1.0
    sw = check_sandwich(nf)
    assert sw.valid
    assert sw.L1 == pytest.approx(nf.L1)


@given(st.lists(st.floats(0.5, 50.0), min_size=3, max_size=30), st.floats(0.1, 2.0))
def test_fit_sandwich_dominates(L2, L1):
    t = np.arange(len(L2), dtype=float)
    L2 = np.maximum(np.asarray(L2), L1)
    L, theta = fit_sandwich(t, L2, L1)
    assert theta >= 0.0
    assert np.all(L2 <= L * L1 * np.exp(theta * t) * (1 + 1e-12))


@given(st.floats(0.1, 10.0), st.floats(0.1, 10.0), st.floats(-3, 3), st.floats(-3, 3))
def test_norms_for_diagonal_weights(g1, g2, x1, x2):
    t = np.array([0.0, 1.0])
    G = np.array([np.diag([g1, g2]), np.diag([g2, g1])])
    nf = NormFamily(t, G)
    assert vector_norm(nf, [x1, x2], 0) == pytest.approx(math.sqrt(g1 * x1 * x1 + g2 * x2 * x2), rel=1e-12,
                                                         abs=1e-12)
    # identity from node 0 to node 1 maps weights diag(g1,g2) to diag(g2,g1)
    assert op_norm(nf, np.eye(2), 0, 1) == pytest.approx(max(math.sqrt(g2 / g1), math.sqrt(g1 / g2)), rel=1e-12)


def test_family_validation():
    with pytest.raises(PreconditionError):
        NormFamily(np.array([0.0, 1.0]), np.array([np.eye(2), -np.eye(2)]))
    with pytest.raises(PreconditionError):
        NormFamily(np.array([0.0, 1.0]), np.array([[[1.0, 1.0], [0.0, 1.0]]] * 2))
    with pytest.raises(PreconditionError):
        vector_norm(identity_family([0.0, 1.0], 2), [1.0], 0)


def test_c_sup_norm_scalar_blocks():
    t = np.linspace(0, 1, 5)
    A = NormFamily(t, (1 + t)[:, None, None] ** 2)
    B = NormFamily(t, np.full((5, 1, 1), 4.0))
    C = np.cos(t)[:, None, None]
    rep = c_sup_norm(C, A, B)
    oracle = np.max((1 + t) * np.abs(np.cos(t)) / 2.0)
    assert rep.sup == pytest.approx(oracle, rel=1e-12)
    assert rep.proxy >= rep.sup * (1 - 1e-12)


def test_write_family_csv(tmp_path, saddle):
    eg, cert = saddle
    nf = build_lyapunov_family(eg, cert)
    p = tmp_path / "fam.csv"
    write_family_csv(nf, p)
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["t", "L2_measured", "eigmin_G", "eigmax_G"]
    assert len(rows) == eg.N + 2
    assert float(rows[5][1]) == pytest.approx(nf.L2[4], rel=1e-15)
    assert not list(tmp_path.glob("*.tmp"))
