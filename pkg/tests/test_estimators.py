from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from nudich.errors import PreconditionError
from nudich.estimators import (CompositionEstimator, DichotomyEstimator, EnvelopeRegressor, GrowthEstimator,
                               SpectrumEstimator)
from nudich.sysdef import SystemDef


def test_envelope_regressor_contract():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 5, (200, 2))
    y = 0.5 - X[:, 0] + 0.1 * X[:, 1] + rng.normal(0, 0.1, 200)
    est = EnvelopeRegressor(margin=0.1)
    assert clone(est).get_params() == {"margin": 0.1, "fix_b": None, "ref_lag": None}
    with pytest.raises(NotFittedError):
        est.predict(X)
    est.fit(X, y)
    assert np.all(est.predict(X) >= y - 1e-9)
    assert est.coef_[0] + est.coef_[1] <= -0.1 + 1e-9
    with pytest.raises(ValueError):
        EnvelopeRegressor().fit(X[:, :1], y)


def test_growth_and_dichotomy_estimators():
    s = SystemDef.linear([["-1", "0"], ["0", "1"]])
    g = GrowthEstimator(t_end=10.0, step=0.2).fit(s)
    assert g.nu_ == pytest.approx(1.0, abs=0.05)
    d = DichotomyEstimator(t_end=20.0, step=0.2).fit(s)
    assert d.certified_ and d.rank_ == 1 and d.projectors_.shape == (101, 2, 2)
    d0 = DichotomyEstimator(lam=1.0, t_end=20.0, step=0.2).fit(s)
    assert not d0.certified_
    with pytest.raises(PreconditionError):
        DichotomyEstimator().fit("not a system")


def test_spectrum_estimator_predict():
    est = SpectrumEstimator(step=0.2).fit(SystemDef.linear([["-1", "0"], ["0", "-2"]]))
    assert list(est.predict([-2.0, -1.5, -1.0, 0.0])) == [True, False, True, False]
    assert est.intervals_.shape == (2, 2)


def test_composition_estimator():
    est = CompositionEstimator().fit(SystemDef.linear([["-1", "1"], ["0", "-2"]], block_split=1))
    assert est.passed_ and est.predicted_.branch == "distinct"
    with pytest.raises(PreconditionError):
        CompositionEstimator().fit(np.eye(2))
