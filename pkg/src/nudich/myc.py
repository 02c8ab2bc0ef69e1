"""Markus-Yamabe type checks for nonlinear nonautonomous systems.

Hypotheses are checked on a finite probe family of paths (trajectories,
user tables and random piecewise-constant paths), so every verdict is
relative to that family. Global stability is probed by direct simulation.
"""
from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.integrate import cumulative_simpson, solve_ivp

from .dichotomy import K_RATIO_MAX, DichotomyAnalyzer, fit_envelope, fit_growth, is_contraction
from .errors import IntegrationError, PreconditionError
from .evolution import TimeGrid, build_grid
from .normfam import build_lyapunov_family
from .spectrum import SpectrumResult, compute_spectrum
from .sysdef import SystemDef, to_text

__all__ = [
    "Trajectory", "PiecewisePath", "simulate", "random_paths", "check_G2", "G2Report", "variational_spectrum",
    "G3Report", "check_G3", "ConditionA", "ConditionB", "TriangularReport", "check_triangular_conditions",
    "T2Report", "check_quasilinear", "quasilinear_system", "StabilityReport", "stability_probe", "ProbeSpec",
    "load_probe_spec", "MycReport", "run_myc", "BLOWUP_CAP",
]

BLOWUP_CAP = 1e8
G2_TOL = 1e-12
ATOL_FLOOR = 1e-30


# ---------------------------------------------------------------------------
# Paths

@dataclass(frozen=True, eq=False)
class Trajectory:
    """Solution of ``x' = f(t, x)`` sampled at nodes, linear interpolation in between."""

    t0: float
    x0: np.ndarray
    times: np.ndarray
    states: np.ndarray
    tol: float
    blowup: bool = False
    blowup_time: float = math.nan

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=1)

    @property
    def terminal_norm(self) -> float:
        return math.inf if self.blowup else float(self.norms[-1])

    @property
    def sup_norm(self) -> float:
        return math.inf if self.blowup else float(np.max(self.norms))

    def tail_sup(self, frac: float = 0.2) -> float:
        k = int(math.floor((1.0 - frac) * (self.times.size - 1)))
        return float(np.max(self.norms[k:]))

    def first_below(self, eta: float, component: int | None = None) -> float:
        """First node time after which the norm (or one component) stays below ``eta``."""
        v = self.norms if component is None else np.abs(self.states[:, component])
        above = np.nonzero(v >= eta)[0]
        if above.size == 0:
            return float(self.times[0])
        k = int(above[-1]) + 1
        return float(self.times[k]) if k < self.times.size and not self.blowup else math.inf

    def __call__(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, self.states[:, i]) for i in range(self.n)])

    def to_dict(self, states: bool = False) -> dict:
        d = {"t0": self.t0, "x0": self.x0.tolist(), "t_end": self.t_end, "tol": self.tol,
             "blowup": self.blowup, "blowup_time": None if math.isnan(self.blowup_time) else self.blowup_time,
             "terminal_norm": self.terminal_norm, "sup_norm": self.sup_norm}
        if states:
            d["times"] = self.times.tolist()
            d["states"] = self.states.tolist()
        return d

    def write_csv(self, path: str | Path) -> None:
        """Write ``t, x1..xn`` rows atomically."""
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t"] + [f"x{i + 1}" for i in range(self.n)])
                for t, x in zip(self.times, self.states):
                    w.writerow([repr(float(t))] + [repr(float(v)) for v in x])
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


@dataclass(frozen=True, eq=False)
class PiecewisePath:
    """User path ``theta(t)``: nodes and values, either piecewise linear or piecewise constant (left-continuous steps)."""

    times: np.ndarray
    states: np.ndarray
    kind: str = "linear"
    label: str = ""

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        x = np.asarray(self.states, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if t.ndim != 1 or t.size < 2 or x.shape[0] != t.size or np.any(np.diff(t) <= 0):
            raise PreconditionError("path needs increasing times and one state per time")
        if not np.all(np.isfinite(x)):
            raise PreconditionError("path states must be finite")
        if self.kind not in ("linear", "constant"):
            raise PreconditionError(f"unknown path kind {self.kind!r}")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", x)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def __call__(self, t: float) -> np.ndarray:
        if self.kind == "constant":
            k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 1))
            return self.states[k].copy()
        return np.array([np.interp(t, self.times, self.states[:, i]) for i in range(self.n)])


def _path_ok(p) -> None:
    if isinstance(p, Trajectory) and p.blowup:
        raise PreconditionError("path comes from a diverging trajectory")


def simulate(s: SystemDef, t0: float, x0, horizon: float, tol: float = 1e-10, step: float = 0.1,
             cap: float = BLOWUP_CAP) -> Trajectory:
    """Adaptive Dormand-Prince (order 8) integration of ``x' = f(t, x)`` sampled every ``step``.

    Error control is relative (``rtol = tol``) down to an absolute floor of ``1e-30``.

    A state norm above ``cap`` stops the run and is reported as blow-up
    (evidence against forward continuation).

    Raises
    ------
    DomainError
        When ``f`` leaves its domain along the solution.
    """
    if s.kind != "nonlinear":
        raise PreconditionError("simulate expects a nonlinear system")
    if t0 < 0 or not horizon > 0:
        raise PreconditionError("need t0 >= 0 and a positive horizon")
    x0 = np.asarray(x0, dtype=float).reshape(s.n)
    grid = TimeGrid.uniform(t0, t0 + horizon, step).times

    def rhs(t, x):
        return s.vector_field(t, x)

    def escape(t, x):
        return cap - float(np.linalg.norm(x))
    escape.terminal = True

    # relative control only: nonuniform growth bursts amplify an absolute error floor by orders of magnitude
    sol = solve_ivp(rhs, (grid[0], grid[-1]), x0, method="DOP853", t_eval=grid, events=escape, rtol=tol,
                    atol=ATOL_FLOOR)
    if sol.status == -1:
        raise IntegrationError(sol.message, float(np.asarray(sol.t)[-1]) if len(sol.t) else t0)
    blow = sol.status == 1
    states = sol.y.T.copy()
    times = sol.t.copy()
    if times.size == 0:
        times, states = np.array([t0]), x0[None].copy()
    return Trajectory(float(t0), x0, times, states, tol, blow, float(sol.t_events[0][0]) if blow else math.nan)


def random_paths(n: int, count: int, t0: float, horizon: float, seed: int = 0, amplitude: float = 2.0,
                 pieces: int = 8) -> list[PiecewisePath]:
    """Random piecewise-constant paths with values uniform in ``[-amplitude, amplitude]``."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        cuts = np.sort(rng.uniform(t0, t0 + horizon, pieces - 1))
        times = np.concatenate([[t0], cuts, [t0 + horizon]])
        vals = rng.uniform(-amplitude, amplitude, (pieces + 1, n))
        out.append(PiecewisePath(times, vals, "constant", f"random-{k}"))
    return out


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# (G2) and (G3)

@dataclass(frozen=True)
class G2Report:
    residual: float
    argmax_time: float
    passed: bool

    def to_dict(self) -> dict:
        return {"residual": self.residual, "argmax_time": self.argmax_time, "passed": self.passed}


def check_G2(s: SystemDef, times: Iterable[float] | None = None) -> G2Report:
    """``max |f(t_i, 0)|`` over the sample times; passes at most ``1e-12``."""
    ts = np.linspace(0.0, 50.0, 501) if times is None else np.asarray(list(times), dtype=float)
    z = np.zeros(s.n)
    vals = np.array([float(np.max(np.abs(s.vector_field(float(t), z)))) for t in ts])
    k = int(np.argmax(vals))
    return G2Report(float(vals[k]), float(ts[k]), bool(vals[k] <= G2_TOL))


def _variational_coeff(s: SystemDef, path) -> Callable[[float], np.ndarray]:
    return lambda t: s.jacobian(t, path(t))


def variational_spectrum(s: SystemDef, path, tol: float = 1e-3, step: float = 0.1,
                         integ_tol: float = 1e-10) -> SpectrumResult:
    """Dichotomy spectrum of ``x' = Jf(t, path(t)) x`` over the path's time span."""
    _path_ok(path)
    t0, t1 = float(path.times[0]), float(path.times[-1])
    eg = build_grid(_variational_coeff(s, path), TimeGrid.uniform(t0, t1, step), integ_tol)
    return compute_spectrum(eg, tol=tol)


@dataclass(frozen=True)
class G3Report:
    """Rightmost spectral point of the variational system along each probe path."""

    labels: tuple
    rightmost: tuple
    passed: bool
    relative_to: str = "probe family"

    def to_dict(self) -> dict:
        return {"paths": [{"label": l, "rightmost": r} for l, r in zip(self.labels, self.rightmost)],
                "passed": self.passed, "relative_to": self.relative_to}


def check_G3(s: SystemDef, paths: Sequence, labels: Sequence[str] | None = None, tol: float = 1e-3,
             step: float = 0.1, workers: int = 1) -> G3Report:
    labels = [getattr(p, "label", "") or f"path-{k}" for k, p in enumerate(paths)] if labels is None else labels
    res = _map(lambda p: variational_spectrum(s, p, tol, step).rightmost, list(paths), workers)
    return G3Report(tuple(labels), tuple(res), bool(all(r < 0.0 for r in res)))


# ---------------------------------------------------------------------------
# Triangular conditions

@dataclass(frozen=True)
class ConditionA:
    """Fit of ``int_s^t a_i <= ln k - alpha (t - s) + eps s`` along one path."""

    component: int
    path: str
    k: float
    alpha: float
    eps: float
    passed: bool

    def to_dict(self) -> dict:
        return {"component": self.component, "path": self.path, "k": self.k, "alpha": self.alpha,
                "eps": self.eps, "passed": self.passed}


@dataclass(frozen=True)
class ConditionB:
    """Sup of the column ``(df_1/dx_j, ..., df_{j-1}/dx_j)`` in the diagonal Lyapunov norm along one path."""

    column: int
    path: str
    sup: float
    argmax_time: float
    trend_ratio: float
    growth_flag: bool
    passed: bool

    def to_dict(self) -> dict:
        return {"column": self.column, "path": self.path, "sup": self.sup, "argmax_time": self.argmax_time,
                "trend_ratio": self.trend_ratio, "growth_flag": self.growth_flag, "passed": self.passed}


@dataclass(frozen=True)
class TriangularReport:
    a: tuple
    b: tuple

    @property
    def a_passed(self) -> bool:
        return all(c.passed for c in self.a)

    @property
    def b_passed(self) -> bool:
        return all(c.passed for c in self.b)

    def to_dict(self) -> dict:
        return {"a": [c.to_dict() for c in self.a], "b": [c.to_dict() for c in self.b],
                "a_passed": self.a_passed, "b_passed": self.b_passed}


def _diag_integrand(s: SystemDef, i: int, path, ts: np.ndarray) -> np.ndarray:
    return np.array([s.jacobian(float(t), path(float(t)))[i, i] for t in ts])


def _envelope_a(times: np.ndarray, I: np.ndarray, margin: float):
    i, j = np.triu_indices(times.size)  # j >= i: t = times[j], s = times[i]
    span = float(times[-1] - times[0])
    return fit_envelope(times[j] - times[i], times[i], I[j] - I[i], ref_lag=span / 4.0, margin=margin)


def _fit_condition_a(times: np.ndarray, I: np.ndarray, margin: float, alpha_min: float):
    """``(k, alpha, eps, passed)``; a finite grid admits any envelope with a large enough ``k``, so
    ``k`` must also stay within ``K_RATIO_MAX`` of the fit on the first half of the grid."""
    env = _envelope_a(times, I, margin)
    if not env.ok:
        return math.inf, math.nan, math.nan, False
    alpha, eps = -env.a, env.b
    half = _envelope_a(times[: times.size // 2 + 1], I[: times.size // 2 + 1], margin)
    stable = half.ok and env.c0 <= half.c0 + math.log(K_RATIO_MAX)
    return math.exp(env.c0), alpha, eps, bool(alpha >= alpha_min and eps < alpha and stable)


def check_triangular_conditions(s: SystemDef, paths: Sequence, labels: Sequence[str] | None = None,
                                step: float = 0.1, sub: int = 4, margin: float = 1e-3, alpha_min: float = 1e-3,
                                trend_ratio: float = 1.01, tail_frac: float = 0.2,
                                integ_tol: float = 1e-10) -> TriangularReport:
    """Conditions (a) and (b) of the triangular stability criterion along each path.

    (a) fits ``(ln k_i, alpha_i, eps_i)`` to the integrals of the diagonal
    partials (Simpson quadrature on a ``step / sub`` grid) with the envelope
    LP and requires ``alpha_i >= alpha_min``, ``eps_i < alpha_i`` and ``k_i``
    within a factor ``K_RATIO_MAX`` of the fit on the first half of the path.
    (b) measures each column above the diagonal in the Lyapunov norm of the
    diagonal scalar flows and flags growth when the sup over the final
    ``tail_frac`` of the resolved nodes exceeds ``trend_ratio`` times the
    earlier sup.
    """
    if s.kind != "nonlinear" or not s.triangular:
        raise PreconditionError("a triangular nonlinear system is required")
    labels = [getattr(p, "label", "") or f"path-{k}" for k, p in enumerate(paths)] if labels is None else labels
    A: list[ConditionA] = []
    B: list[ConditionB] = []
    for p, lab in zip(paths, labels):
        _path_ok(p)
        t0, t1 = float(p.times[0]), float(p.times[-1])
        nodes = TimeGrid.uniform(t0, t1, step).times
        fine = TimeGrid.uniform(t0, t1, step / sub).times
        fams = []
        for i in range(s.n):
            g = _diag_integrand(s, i, p, fine)
            I = cumulative_simpson(g, x=fine, initial=0.0)[::sub]
            k, al, ep, ok = _fit_condition_a(nodes, I, margin, alpha_min)
            A.append(ConditionA(i + 1, lab, k, al, ep, ok))
            if i < s.n - 1:
                fams.append(_scalar_family(s, i, p, nodes, integ_tol))
        for j in range(1, s.n):
            B.append(_condition_b(s, j, p, lab, nodes, fams[:j], trend_ratio, tail_frac))
    return TriangularReport(tuple(A), tuple(B))


def _scalar_family(s: SystemDef, i: int, p, nodes: np.ndarray, integ_tol: float):
    coeff = lambda t: np.array([[s.jacobian(t, p(t))[i, i]]])
    eg = build_grid(coeff, TimeGrid(nodes), integ_tol)
    an = DichotomyAnalyzer(eg)
    r, _ = an.rank_and_gap(0.0)
    cert = an.fit(r, 0.0)
    if not cert.feasible:
        return None
    return build_lyapunov_family(eg, cert, fit_growth(eg, "half"))


def _condition_b(s: SystemDef, j: int, p, lab: str, nodes: np.ndarray, fams, ratio: float,
                 tail_frac: float) -> ConditionB:
    if any(f is None for f in fams):
        return ConditionB(j + 1, lab, math.inf, math.nan, math.inf, True, False)
    # resolved nodes: Lyapunov windows complete for every family
    H = max(f.horizon for f in fams)
    last = int(np.searchsorted(nodes, nodes[-1] - H + 1e-9, side="right"))
    use = max(2, min(last, nodes.size))
    vals = np.empty(use)
    for k in range(use):
        t = float(nodes[k])
        col = s.jacobian(t, p(t))[:j, j]
        g = np.array([f.G[k, 0, 0] for f in fams])
        vals[k] = math.sqrt(float(np.sum(g * col ** 2)))
    kmax = int(np.argmax(vals))
    sup = float(vals[kmax])
    cut = int(math.floor((1.0 - tail_frac) * use))
    head = float(np.max(vals[:max(cut, 1)]))
    tail = float(np.max(vals[cut:]))
    tr = 0.0 if sup == 0.0 else (math.inf if head == 0.0 else tail / head)
    flag = tr > ratio
    return ConditionB(j + 1, lab, sup, float(nodes[kmax]), tr, flag, bool(math.isfinite(sup) and not flag))


# ---------------------------------------------------------------------------
# Quasilinear systems

@dataclass(frozen=True)
class T2Report:
    """Checks (i)-(iv) for ``x' = A(t) x + f(t, x)``.

    ``delta`` is the smallest ``delta`` satisfying the Jacobian budget along
    every probe; (iv) holds when it lies below ``delta_cap = alpha K``. The
    margins are computed with ``delta = delta_cap``.
    """

    contraction: bool
    K: float
    alpha: float
    eps: float
    growth: bool
    M: float
    nu: float
    growth_delta: float
    g2: G2Report
    delta: float
    delta_cap: float
    worst_margin: float
    worst_time: float
    margins: tuple = field(default=(), repr=False)

    @property
    def budget_ok(self) -> bool:
        return self.delta < self.delta_cap

    @property
    def passed(self) -> bool:
        return self.contraction and self.growth and self.g2.passed and self.budget_ok

    def to_dict(self) -> dict:
        return {"i": {"passed": self.contraction, "K": self.K, "alpha": self.alpha, "eps": self.eps},
                "ii": {"passed": self.growth, "M": self.M, "nu": self.nu, "delta": self.growth_delta},
                "iii": self.g2.to_dict(),
                "iv": {"passed": self.budget_ok, "delta": self.delta, "delta_cap": self.delta_cap,
                       "worst_margin": self.worst_margin, "worst_time": self.worst_time},
                "passed": self.passed}


def quasilinear_system(A: SystemDef, f: SystemDef, name: str = "") -> SystemDef:
    """Nonlinear system ``x' = A(t) x + f(t, x)``."""
    if A.kind != "linear" or f.kind != "nonlinear" or A.n != f.n:
        raise PreconditionError("need a linear A and a nonlinear f of equal dimension")
    comps = []
    for i in range(A.n):
        terms = [f"({to_text(A.entries[i][j])})*x{j + 1}" for j in range(A.n)]
        terms.append(f"({to_text(f.entries[i])})")
        comps.append(" + ".join(terms))
    return SystemDef.nonlinear(comps, name=name or f"{A.name}+{f.name}")


def check_quasilinear(A: SystemDef, f: SystemDef, probes: Sequence, t_end: float = 40.0, step: float = 0.1,
                      integ_tol: float = 1e-11) -> T2Report:
    """Contraction of ``A`` (projector ``I``), half growth, ``f(t,0) = 0`` and the Jacobian budget
    ``||Jf(t, y(t))|| < (delta / K^2) e^{-2 eps t}`` along every probe ``y``."""
    eg = build_grid(A, TimeGrid.uniform(0.0, t_end, step), integ_tol)
    ok, cert = is_contraction(eg)
    K, alpha, eps = cert.K, cert.alpha, cert.eps
    contraction = bool(ok and alpha > eps >= 0.0)
    gc = fit_growth(eg, "half")
    growth = bool(math.isfinite(gc.M) and math.isfinite(gc.nu))
    g2 = check_G2(f, eg.times)
    cap = alpha * K if contraction else math.nan
    need = 0.0
    worst, worst_t = math.inf, math.nan
    margins = []
    for y in probes:
        _path_ok(y)
        ts = eg.times[(eg.times >= y.times[0] - 1e-12) & (eg.times <= y.times[-1] + 1e-12)]
        J = np.array([float(np.linalg.norm(f.jacobian(float(t), y(float(t))), 2)) for t in ts])
        w = np.exp(2.0 * eps * ts)
        need = max(need, float(np.max(K ** 2 * w * J)))
        m = cap / K ** 2 / w - J
        margins.append(m)
        k = int(np.argmin(m))
        if m[k] < worst:
            worst, worst_t = float(m[k]), float(ts[k])
    return T2Report(contraction, K, alpha, eps, growth, gc.M, gc.nu, gc.delta, g2, need,
                    cap, worst, worst_t, tuple(margins))


# ---------------------------------------------------------------------------
# Stability probing

@dataclass(frozen=True, eq=False)
class StabilityReport:
    """Terminal convergence of every probe, empirical ``delta(t0, eta)`` and the triangular cascade."""

    trajectories: tuple = field(repr=False)
    converged: tuple
    delta_table: tuple
    cascade_residual: float
    cascade_times: tuple
    terminal_tol: float

    @property
    def passed(self) -> bool:
        return all(self.converged) and not self.cascade_residual > 1e-6

    def delta(self, t0: float, eta: float) -> float:
        for a, b, d in self.delta_table:
            if a == t0 and b == eta:
                return d
        raise KeyError((t0, eta))

    def to_dict(self) -> dict:
        return {"terminal_tol": self.terminal_tol,
                "probes": [dict(tr.to_dict(), converged=c) for tr, c in zip(self.trajectories, self.converged)],
                "delta": [{"t0": a, "eta": b, "delta": d} for a, b, d in self.delta_table],
                "cascade": {"residual": self.cascade_residual,
                            "convergence_times": [list(c) for c in self.cascade_times]},
                "passed": self.passed}


def _directions(x0s: Sequence, n: int) -> list[np.ndarray]:
    out = []
    for x in x0s:
        x = np.asarray(x, dtype=float).reshape(n)
        nx = float(np.linalg.norm(x))
        if nx > 0:
            u = x / nx
            if not any(np.allclose(u, v) for v in out):
                out.append(u)
    return out


def stability_probe(s: SystemDef, t0s: Sequence[float], x0s: Sequence, etas: Sequence[float] = (1.0,),
                    horizon: float = 40.0, terminal_tol: float = 1e-4, bisect_steps: int = 8, tol: float = 1e-10,
                    step: float = 0.1, workers: int = 1) -> StabilityReport:
    """Simulate every ``(t0, x0)`` and measure ``delta(t0, eta)`` by radius bisection.

    ``delta(t0, eta)`` is the largest probed radius ``r < eta`` such that every
    trajectory from ``r u`` (``u`` over the directions of ``x0s``) stays below
    ``eta`` on ``[t0, t0 + horizon]``. For triangular systems each tail
    subsystem is simulated standalone and compared with the matching
    components of the full solution (``cascade_residual``, relative).
    """
    jobs = [(float(t0), np.asarray(x, dtype=float)) for t0 in t0s for x in x0s]
    trajs = _map(lambda job: simulate(s, job[0], job[1], horizon, tol, step), jobs, workers)
    conv = tuple(bool(not tr.blowup and tr.terminal_norm <= terminal_tol) for tr in trajs)
    dirs = _directions(x0s, s.n)
    table = []
    for t0 in t0s:
        for eta in etas:
            lo, hi = 0.0, float(eta)
            for _ in range(bisect_steps):
                r = 0.5 * (lo + hi)
                runs = _map(lambda u: simulate(s, float(t0), r * u, horizon, max(tol, 1e-9), step), dirs, workers)
                if all(not tr.blowup and tr.sup_norm < eta for tr in runs):
                    lo = r
                else:
                    hi = r
            table.append((float(t0), float(eta), lo))
    casc = 0.0
    times: list[tuple] = []
    if s.triangular and s.n > 1:
        for tr in trajs:
            if tr.blowup:
                continue
            row = []
            for k in range(s.n, 0, -1):
                comp = k - 1
                row.append(tr.first_below(terminal_tol, comp))
                if k == 1:
                    continue
                sub = simulate(s.tail(k), tr.t0, tr.x0[comp:], horizon, tol, step)
                m = min(sub.times.size, tr.times.size)
                dev = float(np.max(np.abs(sub.states[:m] - tr.states[:m, comp:])))
                casc = max(casc, dev / (1.0 + float(np.max(np.abs(tr.states[:m, comp:])))))
            times.append(tuple(row))
    return StabilityReport(tuple(trajs), conv, tuple(table), casc, tuple(times), terminal_tol)


# ---------------------------------------------------------------------------
# Suite

CHECKS = ("G2", "G3", "a", "b", "T2", "stability")


@dataclass(frozen=True)
class ProbeSpec:
    """Probe family and enabled checks of a run.

    ``linear_part`` (rows of expressions) enables the quasilinear checks with
    ``f = F - A x``; ``tables`` are user paths ``{"times", "states", "kind"}``.
    """

    t0s: tuple = (0.0, 5.0, 10.0)
    x0s: tuple | None = None
    etas: tuple = (1.0,)
    horizon: float = 40.0
    step: float = 0.1
    terminal_tol: float = 1e-4
    bisect_steps: int = 8
    n_random: int = 2
    n_trajectory_paths: int = 2
    seed: int = 0
    amplitude: float = 2.0
    spectrum_tol: float = 1e-3
    tables: tuple = ()
    linear_part: tuple | None = None
    checks: tuple = CHECKS

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeSpec":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise PreconditionError(f"unknown probe-spec keys: {sorted(bad)}")
        kw = {}
        for k, v in d.items():
            if k in ("t0s", "etas", "checks"):
                v = tuple(v)
            elif k == "x0s" and v is not None:
                v = tuple(tuple(float(c) for c in x) for x in v)
            elif k == "tables":
                v = tuple(v)
            elif k == "linear_part" and v is not None:
                v = tuple(tuple(str(c) for c in r) for r in v)
            kw[k] = v
        spec = cls(**kw)
        unknown = set(spec.checks) - set(CHECKS)
        if unknown:
            raise PreconditionError(f"unknown checks: {sorted(unknown)}")
        return spec

    def initial_states(self, n: int) -> list[np.ndarray]:
        if self.x0s is not None:
            return [np.asarray(x, dtype=float).reshape(n) for x in self.x0s]
        eye = np.eye(n)
        out = [10.0 * eye[i] for i in range(n)] + [-10.0 * eye[i] for i in range(n)]
        out.append(10.0 * np.ones(n) / math.sqrt(n))
        out.append(np.ones(n) / math.sqrt(n))
        return out

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k in ("t0s", "etas", "checks", "tables"):
            d[k] = list(d[k])
        if d["x0s"] is not None:
            d["x0s"] = [list(x) for x in d["x0s"]]
        if d["linear_part"] is not None:
            d["linear_part"] = [list(r) for r in d["linear_part"]]
        return d


def load_probe_spec(path: str | Path) -> ProbeSpec:
    with open(path) as fh:
        return ProbeSpec.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class MycReport:
    system: str
    checks: dict
    g2: G2Report | None
    g3: G3Report | None
    triangular: TriangularReport | None
    t2: T2Report | None
    stability: StabilityReport | None

    @property
    def failed(self) -> set:
        return {k for k, v in self.checks.items() if not v}

    @property
    def passed(self) -> bool:
        return not self.failed

    def to_dict(self) -> dict:
        return {"system": self.system, "checks": dict(sorted(self.checks.items())),
                "verdict": "pass" if self.passed else "fail", "relative_to": "probe family",
                "G2": self.g2.to_dict() if self.g2 else None, "G3": self.g3.to_dict() if self.g3 else None,
                "triangular": self.triangular.to_dict() if self.triangular else None,
                "T2": self.t2.to_dict() if self.t2 else None,
                "stability": self.stability.to_dict() if self.stability else None}


def run_myc(s: SystemDef, spec: ProbeSpec | None = None, workers: int = 1) -> MycReport:
    """Run the enabled checks on the probe family.

    Probe paths are the first ``n_trajectory_paths`` trajectories started at
    the first ``t0``, the user tables and ``n_random`` random
    piecewise-constant paths; conditions (a)/(b) run only for triangular
    systems and the quasilinear checks only when a linear part is given.
    """
    spec = spec or ProbeSpec()
    if s.kind != "nonlinear":
        raise PreconditionError("the stability checks expect a nonlinear system")
    on = set(spec.checks)
    x0s = spec.initial_states(s.n)
    t0 = float(spec.t0s[0])
    checks: dict[str, bool] = {}
    g2 = g3 = tri = t2 = stab = None
    paths: list = []
    if on & {"G3", "a", "b", "T2"}:
        for x in x0s[: spec.n_trajectory_paths]:
            tr = simulate(s, t0, x, spec.horizon, 1e-10, spec.step)
            if not tr.blowup:
                paths.append(tr)
        for k, tab in enumerate(spec.tables):
            paths.append(PiecewisePath(tab["times"], tab["states"], tab.get("kind", "linear"),
                                       tab.get("label", f"table-{k}")))
        paths += random_paths(s.n, spec.n_random, t0, spec.horizon, spec.seed, spec.amplitude)
    labels = [getattr(p, "label", "") or f"trajectory-{k}" for k, p in enumerate(paths)]
    if "G2" in on:
        g2 = check_G2(s)
        checks["G2"] = g2.passed
    if "G3" in on:
        g3 = check_G3(s, paths, labels, spec.spectrum_tol, spec.step, workers)
        checks["G3"] = g3.passed
    if s.triangular and on & {"a", "b"}:
        tri = check_triangular_conditions(s, paths, labels, spec.step)
        if "a" in on:
            checks["a"] = tri.a_passed
        if "b" in on:
            checks["b"] = tri.b_passed
    if spec.linear_part is not None and "T2" in on:
        A = SystemDef.linear(spec.linear_part, name=f"{s.name}:A")
        f = _perturbation(s, A)
        t2 = check_quasilinear(A, f, paths, spec.horizon, spec.step)
        checks["T2"] = t2.passed
    if "stability" in on:
        stab = stability_probe(s, spec.t0s, x0s, spec.etas, spec.horizon, spec.terminal_tol, spec.bisect_steps,
                               step=spec.step, workers=workers)
        checks["stability"] = stab.passed
    return MycReport(s.name, checks, g2, g3, tri, t2, stab)


def _perturbation(s: SystemDef, A: SystemDef) -> SystemDef:
    comps = []
    for i in range(s.n):
        lin = " + ".join(f"({to_text(A.entries[i][j])})*x{j + 1}" for j in range(s.n))
        comps.append(f"({to_text(s.entries[i])}) - ({lin})")
    return SystemDef.nonlinear(comps, name=f"{s.name}:f")
