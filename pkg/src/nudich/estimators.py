"""scikit-learn style wrappers around the grid analyses.

Estimators take their configuration in ``__init__`` (no work there), learn
in ``fit`` and expose results as trailing-underscore attributes, so they
work with ``get_params``/``set_params``/``clone``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dichotomy import DichotomyAnalyzer, fit_envelope, fit_growth
from .errors import PreconditionError
from .evolution import EvolutionGrid, TimeGrid, build_grid
from .spectrum import compute_spectrum
from .sysdef import SystemDef

__all__ = ["EnvelopeRegressor", "GrowthEstimator", "DichotomyEstimator", "SpectrumEstimator",
           "CompositionEstimator"]


def _as_grid(X, t_end: float, step: float, tol: float) -> EvolutionGrid:
    if isinstance(X, EvolutionGrid):
        return X
    if isinstance(X, SystemDef) or callable(X):
        return build_grid(X, TimeGrid.uniform(0.0, t_end, step), tol)
    raise PreconditionError("expected an EvolutionGrid, a linear SystemDef or a coefficient callable")


class EnvelopeRegressor(RegressorMixin, BaseEstimator):
    """Upper envelope ``y <= c0 + a*d + b*s`` of samples ``X = [d, s]``.

    Parameters
    ----------
    margin : float or None
        Impose ``a + b <= -margin``.
    fix_b : float or None
        Fix the coefficient of ``s`` (``0`` gives a uniform envelope).
    ref_lag : float or None
        Reference lag of the primary objective (default: a quarter of the largest lag).
    """

    def __init__(self, margin: float | None = None, fix_b: float | None = None, ref_lag: float | None = None):
        self.margin = margin
        self.fix_b = fix_b
        self.ref_lag = ref_lag

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        if X.shape[1] != 2:
            raise ValueError("X must have two columns: lag d and source time s")
        env = fit_envelope(X[:, 0], X[:, 1], y, ref_lag=self.ref_lag, margin=self.margin, fix_b=self.fix_b)
        if not env.ok:
            raise PreconditionError(f"envelope fit failed: {env.status}")
        self.intercept_ = env.c0
        self.coef_ = np.array([env.a, env.b])
        self.max_violation_ = env.max_violation
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        return self.intercept_ + X @ self.coef_


class GrowthEstimator(BaseEstimator):
    """Nonuniform bounded growth ``||T(t,s)|| <= M e^{nu (t-s) + delta s}``.

    Parameters
    ----------
    kind : {"half", "full", "backward"}
    t_end, step, tol : float
        Grid used when ``fit`` receives a system rather than a grid.
    """

    def __init__(self, kind: str = "half", t_end: float = 40.0, step: float = 0.1, tol: float = 1e-11):
        self.kind = kind
        self.t_end = t_end
        self.step = step
        self.tol = tol

    def fit(self, X, y=None):
        eg = _as_grid(X, self.t_end, self.step, self.tol)
        gc = fit_growth(eg, self.kind)
        self.certificate_ = gc
        self.M_, self.nu_, self.delta_ = gc.M, gc.nu, gc.delta
        return self

    def bound(self, d, s):
        """Envelope value at lags ``d`` and source times ``s``."""
        check_is_fitted(self, "certificate_")
        return self.M_ * np.exp(self.nu_ * np.asarray(d, dtype=float) + self.delta_ * np.asarray(s, dtype=float))


class DichotomyEstimator(BaseEstimator):
    """Dichotomy certificate of the system shifted by ``lam``.

    After ``fit``: ``certified_``, ``rank_``, ``K_``, ``alpha_``, ``eps_``,
    ``projectors_`` (array ``(N+1, n, n)``) and ``reason_``.
    """

    def __init__(self, lam: float = 0.0, gap_tol: float = 0.1, t_end: float = 40.0, step: float = 0.1,
                 tol: float = 1e-11):
        self.lam = lam
        self.gap_tol = gap_tol
        self.t_end = t_end
        self.step = step
        self.tol = tol

    def fit(self, X, y=None):
        eg = _as_grid(X, self.t_end, self.step, self.tol)
        ok, cert, reason, rank = DichotomyAnalyzer(eg).verdict(self.lam, gap_tol=self.gap_tol)
        self.certified_, self.reason_, self.rank_ = ok, reason, rank
        self.certificate_ = cert
        self.K_ = cert.K if cert is not None else np.nan
        self.alpha_ = cert.alpha if cert is not None else np.nan
        self.eps_ = cert.eps if cert is not None else np.nan
        self.projectors_ = cert.projectors.P if cert is not None else None
        return self


class SpectrumEstimator(BaseEstimator):
    """Dichotomy spectrum; ``predict`` marks shifts inside the computed spectral intervals."""

    def __init__(self, lam_lo: float | None = None, lam_hi: float | None = None, bisect_tol: float = 1e-3,
                 t_end: float = 40.0, step: float = 0.1, tol: float = 1e-11):
        self.lam_lo = lam_lo
        self.lam_hi = lam_hi
        self.bisect_tol = bisect_tol
        self.t_end = t_end
        self.step = step
        self.tol = tol

    def fit(self, X, y=None):
        eg = _as_grid(X, self.t_end, self.step, self.tol)
        sr = compute_spectrum(eg, self.lam_lo, self.lam_hi, tol=self.bisect_tol)
        self.spectrum_ = sr
        self.intervals_ = np.array([[iv.a, iv.b] for iv in sr.intervals]).reshape(-1, 2)
        self.ranks_ = np.array(sr.ranks, dtype=int)
        return self

    def predict(self, lams):
        """Boolean array: ``True`` where the shift lies in a spectral interval."""
        check_is_fitted(self, "spectrum_")
        lam = np.asarray(lams, dtype=float).reshape(-1)
        if self.intervals_.size == 0:
            return np.zeros(lam.shape, dtype=bool)
        a, b = self.intervals_[:, 0], self.intervals_[:, 1]
        return np.any((lam[:, None] >= a[None]) & (lam[:, None] <= b[None]), axis=1)


class CompositionEstimator(BaseEstimator):
    """Composed projector and off-diagonal checks of a block-split linear system."""

    def __init__(self, t_end: float = 40.0, step: float = 0.1, tol: float = 1e-11, gamma: float | None = None):
        self.t_end = t_end
        self.step = step
        self.tol = tol
        self.gamma = gamma

    def fit(self, X, y=None):
        from .triangular import build_composition, verify_composed_dichotomy

        if not isinstance(X, SystemDef):
            raise PreconditionError("CompositionEstimator.fit expects a block-split SystemDef")
        tc = build_composition(X, TimeGrid.uniform(0.0, self.t_end, self.step), self.tol)
        rep = verify_composed_dichotomy(tc, self.gamma)
        self.composition_ = tc
        self.report_ = rep
        self.projectors_ = tc.projectors[: tc.n_valid + 1]
        self.predicted_ = rep.predicted
        self.passed_ = rep.passed
        return self
