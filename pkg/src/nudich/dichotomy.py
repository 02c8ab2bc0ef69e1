"""Invariant projectors and exponential-envelope certificates.

Every certificate is an envelope ``f <= c0 + a*d + b*s`` fitted to log-norms
``f`` of evolution operators over grid pairs, where ``d`` is the elapsed time
and ``s`` the later/source time.  For a dichotomy ``c0 = log K``,
``a = -alpha`` and ``b = eps``; for bounded growth ``c0 = log M``, ``a = nu``
and ``b = delta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .errors import NoGapError, PreconditionError
from .evolution import EvolutionGrid

__all__ = [
    "Envelope", "fit_envelope", "PairSet",
    "GrowthCertificate", "ProjectorFamily", "DichotomyCertificate", "ViolationReport",
    "DichotomyAnalyzer", "growth_rates", "estimate_projectors", "fit_dichotomy", "fit_growth",
    "verify_certificate", "is_contraction", "classifier_params", "DEFAULT_GAP_TOL", "DEFAULT_MARGIN",
]

DEFAULT_GAP_TOL = 0.1
DEFAULT_MARGIN = 1e-3
ALPHA_MIN = 1e-3
K_RATIO_MAX = 10.0


# ---------------------------------------------------------------------------
# Envelope LP

@dataclass(frozen=True)
class Envelope:
    """Solution of the envelope LP. ``c0`` is recomputed exactly over all points."""

    c0: float
    a: float
    b: float
    ok: bool
    status: str
    n_points: int
    n_constraints: int
    n_active: int
    max_violation: float
    working_set: np.ndarray | None = field(default=None, repr=False, compare=False)


def _lexicographic(D, S, F, w: float, margin: float | None, fix_b: float | None, primary_only: bool = False):
    """LP stages on a working set: value at ``w``, then smallest ``b``, then smallest ``a``."""
    A_ub = np.column_stack([-np.ones_like(D), -D, -S])
    b_ub = -F
    if margin is not None:
        A_ub = np.vstack([A_ub, [0.0, 1.0, 1.0]])
        b_ub = np.append(b_ub, -margin)
    bounds = [(0.0, None), (None, None), (0.0, None) if fix_b is None else (fix_b, fix_b)]

    def solve(c, A, b):
        return linprog(c, A_ub=A, b_ub=b, bounds=bounds, method="highs")

    res = solve([1.0, w, w], A_ub, b_ub)
    if res.status != 0:
        return None, {2: "infeasible", 3: "unbounded"}.get(res.status, res.message)
    if primary_only:
        return res.x, "optimal"
    v = res.fun
    A2 = np.vstack([A_ub, [1.0, w, w]])
    b2 = np.append(b_ub, v + 1e-9 * (1.0 + abs(v)))
    r2 = solve([0.0, 0.0, 1.0], A2, b2)
    if r2.status != 0:
        return res.x, "optimal"
    bstar = float(r2.x[2])
    A3 = np.vstack([A2, [0.0, 0.0, 1.0]])
    b3 = np.append(b2, bstar + 1e-10 * (1.0 + abs(bstar)))
    r3 = solve([0.0, 1.0, 0.0], A3, b3)
    x = r3.x if r3.status == 0 else r2.x
    return np.array([x[0], x[1], bstar]), "optimal"


def _seed_points(d: np.ndarray, s: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Maximizers of ``f - a d - b s`` over a fan of trial slopes."""
    rng_f = float(np.ptp(f)) + 1.0
    sa = rng_f / max(float(np.max(d)), 1e-12)
    sb = rng_f / max(float(np.max(s)), 1e-12)
    idx = [int(np.argmax(f)), int(np.argmax(d)), int(np.argmax(s))]
    for a0 in np.linspace(-2.0, 2.0, 9) * sa:
        for b0 in (0.0, sb):
            idx.append(int(np.argmax(f - a0 * d - b0 * s)))
    return np.unique(idx)


def fit_envelope(d: np.ndarray, s: np.ndarray, f: np.ndarray, *, ref_lag: float | None = None,
                 margin: float | None = None, fix_b: float | None = None,
                 working_set: np.ndarray | None = None, tie_break: bool = True) -> Envelope:
    """Fit ``f <= c0 + a*d + b*s`` with ``c0 >= 0`` and ``b >= 0``.

    The primary objective ``c0 + w*(a + b)`` is the envelope value at lag and
    source time ``w`` (default a quarter of the largest lag). Ties are broken
    by smallest ``b`` and then smallest ``a``. Solved by constraint
    generation: the LP runs on a working set that grows by the most violated
    points until every point is satisfied.

    Parameters
    ----------
    d, s, f : array_like
        Lags, source times and log-norms.
    ref_lag : float, optional
        Reference lag ``w``.
    margin : float, optional
        If given, also impose ``a + b <= -margin`` (a decay rate exceeding the
        nonuniform exponent).
    fix_b : float, optional
        Fix ``b`` to this value (``0`` gives a uniform fit).
    working_set : array of int, optional
        Initial constraint indices (for instance the active set of a nearby fit).
    tie_break : bool
        Resolve ties after the primary objective (skipped by fast classifiers).
    """
    d = np.asarray(d, dtype=float)
    s = np.asarray(s, dtype=float)
    f = np.asarray(f, dtype=float)
    if d.size == 0:
        return Envelope(0.0, 0.0, 0.0, False, "no data", 0, 0, 0, 0.0)
    if not np.all(np.isfinite(f)):
        raise PreconditionError("log-norms must be finite")
    w = float(np.max(d)) / 4.0 if ref_lag is None else float(ref_lag)
    if working_set is not None and working_set.size and int(np.max(working_set)) < d.size:
        W = np.union1d(working_set, [int(np.argmax(f)), int(np.argmax(d))])
    else:
        W = _seed_points(d, s, f)
    # the offset is recomputed exactly afterwards, so the loop only needs near-feasibility
    tol = 1e-8 * (1.0 + float(np.max(np.abs(f))))
    primary = True
    for _ in range(400):
        x, status = _lexicographic(d[W], s[W], f[W], w, margin, fix_b, primary_only=primary)
        if x is None:
            return Envelope(math.inf, math.nan, math.nan, False, status, d.size, W.size, 0, math.inf)
        viol = f - (x[0] + x[1] * d + x[2] * s)
        bad = np.flatnonzero(viol > tol)
        if bad.size == 0:
            if primary and tie_break:
                primary = False  # primary clean: now resolve ties on the same working set
                continue
            break
        worst = bad if bad.size <= 128 else bad[np.argpartition(viol[bad], -128)[-128:]]
        grown = np.union1d(W, worst)
        if grown.size == W.size:
            # residual violations are LP solver tolerance on rows already present
            if primary and tie_break:
                primary = False
                continue
            break
        primary = True
        W = grown
    a, b = float(x[1]), float(x[2])
    if fix_b is not None:
        b = float(fix_b)
    elif b < 1e-12:
        b = 0.0
    slack = f - a * d - b * s
    c0 = max(0.0, float(np.max(slack)))
    act_tol = 1e-9 * (1.0 + abs(c0))
    n_active = int(np.count_nonzero(c0 - slack <= act_tol)) + int(c0 <= act_tol) + int(b == 0.0)
    if margin is not None and abs(a + b + margin) <= 1e-12:
        n_active += 1
    return Envelope(c0, a, b, True, "optimal", d.size, W.size, n_active, float(np.max(slack - c0)), W)


# ---------------------------------------------------------------------------
# Records

@dataclass(frozen=True)
class GrowthCertificate:
    """Bound ``||T(t,s)|| <= M exp(nu |t-s| + delta s)``."""

    M: float
    nu: float
    delta: float
    kind: str
    max_violation: float
    n_pairs: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("half", "full", "backward"):
            raise PreconditionError(f"unknown growth kind {self.kind!r}")

    def bound(self, d, s):
        return self.M * np.exp(self.nu * np.asarray(d) + self.delta * np.asarray(s))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "M": self.M, "nu": self.nu, "delta": self.delta,
                "max_violation": self.max_violation, "n_pairs": self.n_pairs}


@dataclass(frozen=True, eq=False)
class ProjectorFamily:
    """Invariant projectors ``P(t_i)`` of constant rank on a grid."""

    P: np.ndarray = field(repr=False)
    rank: int
    invariance_residual: float
    anchor: int = 0
    horizon: float = 0.0
    gap: float = math.inf
    rates: tuple = ()
    basis_cond: float = 1.0
    method: str = "qr-subspaces"

    @property
    def n(self) -> int:
        return self.P.shape[1]

    def __len__(self) -> int:
        return self.P.shape[0]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.P[i]

    @cached_property
    def Q(self) -> np.ndarray:
        return np.eye(self.n)[None, :, :] - self.P

    @cached_property
    def idempotency_residual(self) -> float:
        return float(np.max(np.linalg.norm(self.P @ self.P - self.P, 2, axis=(1, 2))))

    @classmethod
    def constant(cls, P: np.ndarray, N: int) -> "ProjectorFamily":
        P = np.asarray(P, dtype=float)
        return cls(np.broadcast_to(P, (N + 1,) + P.shape).copy(), int(round(np.trace(P))), 0.0,
                   method="constant")


@dataclass(frozen=True, eq=False)
class DichotomyCertificate:
    """Bounds ``||T(t,s)P(s)|| <= K e^{-alpha(t-s)+eps s}`` (t >= s) and
    ``||T(t,s)Q(s)|| <= K e^{-alpha(s-t)+eps s}`` (s >= t)."""

    K: float
    alpha: float
    eps: float
    projectors: ProjectorFamily = field(repr=False)
    stable_violation: float
    unstable_violation: float
    feasible: bool
    reason: str = ""
    lam: float = 0.0
    span: float = 0.0
    n_active: int = 0

    @property
    def rank(self) -> int:
        return self.projectors.rank

    def to_dict(self) -> dict:
        return {"K": self.K, "alpha": self.alpha, "eps": self.eps, "rank": self.rank,
                "feasible": self.feasible, "reason": self.reason, "shift": self.lam,
                "residuals": {"stable": self.stable_violation, "unstable": self.unstable_violation,
                              "invariance": self.projectors.invariance_residual,
                              "idempotency": self.projectors.idempotency_residual},
                "grid_ref": {"span": self.span, "nodes": len(self.projectors)},
                "projector_method": self.projectors.method}


@dataclass(frozen=True)
class ViolationReport:
    """Maximum signed log-violation per inequality; certificate valid iff all ``<= 0``."""

    stable: float
    unstable: float

    @property
    def valid(self) -> bool:
        return self.stable <= 0.0 and self.unstable <= 0.0

    @property
    def worst(self) -> float:
        return max(self.stable, self.unstable)


# ---------------------------------------------------------------------------
# Pair log-norms

@dataclass(frozen=True, eq=False)
class PairSet:
    """Lag ``d``, envelope time ``s`` and log-norm ``f`` for a family of node pairs."""

    d: np.ndarray
    s: np.ndarray
    f: np.ndarray
    i: np.ndarray
    j: np.ndarray

    @property
    def size(self) -> int:
        return self.d.size

    def subset(self, mask: np.ndarray) -> "PairSet":
        return PairSet(self.d[mask], self.s[mask], self.f[mask], self.i[mask], self.j[mask])

    @staticmethod
    def empty() -> "PairSet":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=int)
        return PairSet(z, z, z, zi, zi)


def _opnorms(U: np.ndarray) -> np.ndarray:
    if U.shape[1] == 1 or U.shape[2] == 1:
        return np.sqrt(np.sum(U * U, axis=(1, 2)))
    return np.linalg.norm(U, 2, axis=(1, 2))


def _collect(parts: list[tuple[np.ndarray, ...]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    i, j, nrm = (np.concatenate(p) for p in zip(*parts))
    keep = nrm > 0.0
    return i[keep], j[keep], np.log(nrm[keep])


def _block_norms(U: np.ndarray, block) -> np.ndarray:
    return _opnorms(U if block is None else U[:, block[0], block[1]])


def forward_pairs(eg: EvolutionGrid, P: np.ndarray | None = None, block=None) -> PairSet:
    """Log-norms of ``T(t_i,t_j)P(t_j)`` for all ``i >= j``.

    Chains are re-projected with ``P(t_i)`` after every step, which keeps
    them inside the (invariant) range of ``P``. ``block = (rows, cols)``
    restricts the norm to a sub-block; pairs with a zero norm are omitted.
    """
    N, n = eg.N, eg.n
    t = eg.times
    parts = []
    first = np.eye(n) if P is None else P[0]
    U = first[None].copy()
    parts.append((np.zeros(1, dtype=int), np.zeros(1, dtype=int), _block_norms(U, block)))
    for k in range(N):
        U = np.matmul(eg.steps[k], U)
        if P is not None:
            U = np.matmul(P[k + 1], U)
        new = (np.eye(n) if P is None else P[k + 1])[None]
        U = np.concatenate([U, new], axis=0)
        if not np.all(np.isfinite(U)):
            raise PreconditionError("overflow while propagating transition chains")
        parts.append((np.full(k + 2, k + 1), np.arange(k + 2), _block_norms(U, block)))
    i, j, f = _collect(parts)
    return PairSet(t[i] - t[j], t[j], f, i, j)


def backward_pairs(eg: EvolutionGrid, Q: np.ndarray | None = None, block=None) -> PairSet:
    """Log-norms of ``T(t_i,t_j)Q(t_j)`` for all ``i <= j``; ``d = t_j - t_i``, ``s = t_j``."""
    N, n = eg.N, eg.n
    t = eg.times
    parts = []
    V = (np.eye(n) if Q is None else Q[N])[None].copy()
    parts.append((np.full(1, N), np.full(1, N), _block_norms(V, block)))
    for k in range(N - 1, -1, -1):
        lu = sla.lu_factor(eg.steps[k], check_finite=False)
        m = V.shape[0]
        flat = np.transpose(V, (1, 0, 2)).reshape(n, m * n)
        V = np.transpose(sla.lu_solve(lu, flat, check_finite=False).reshape(n, m, n), (1, 0, 2))
        if Q is not None:
            V = np.matmul(Q[k], V)
        V = np.concatenate([(np.eye(n) if Q is None else Q[k])[None], V], axis=0)
        if not np.all(np.isfinite(V)):
            raise PreconditionError("overflow while propagating reverse transition chains")
        # V[q] holds the chain with source j = k + q
        parts.append((np.full(m + 1, k), np.arange(k, k + m + 1), _block_norms(V, block)))
    i, j, f = _collect(parts)
    return PairSet(t[j] - t[i], t[j], f, i, j)


# ---------------------------------------------------------------------------
# Rates and projectors

@dataclass(frozen=True, eq=False)
class RateInfo:
    """Forward QR pass: orthonormal frames ``Qf[k]`` and exponential rates per column."""

    rates: np.ndarray
    frames: np.ndarray
    anchor: int
    horizon: float
    window: tuple


def growth_rates(eg: EvolutionGrid, anchor: int = 0, horizon: float | None = None,
                 seed: int = 0) -> RateInfo:
    """Exponential rates of the grid from a product-QR pass started at ``anchor``.

    The rate of column ``k`` is the mean of ``log |R_kk|`` over the second half
    of ``[t_anchor, t_anchor + H]``, which discounts transient (non-normal)
    growth near the anchor. Columns are generically ordered by decreasing rate.
    """
    t = eg.times
    if not 0 <= anchor < eg.N:
        raise PreconditionError(f"anchor {anchor} outside the grid")
    H = t[-1] - t[anchor] if horizon is None else float(horizon)
    if H <= 0.0 or t[anchor] + H > t[-1] * (1 + 1e-12):
        raise PreconditionError("anchor + horizon must lie inside the grid")
    end = int(np.searchsorted(t, t[anchor] + H - 1e-9 * max(1.0, H)))
    end = min(max(end, anchor + 1), eg.N)
    mid = int(np.searchsorted(t, t[anchor] + H / 2 - 1e-12))
    mid = min(max(mid, anchor), end - 1)
    n = eg.n
    rng = np.random.default_rng(seed)
    Q0 = np.linalg.qr(rng.standard_normal((n, n)))[0] if n > 1 else np.eye(1)
    frames = np.empty((eg.N + 1, n, n))
    frames[anchor] = Q0
    logs = np.zeros((eg.N + 1, n))
    Q = Q0
    for k in range(anchor, eg.N):
        Q, R = np.linalg.qr(eg.steps[k] @ Q)
        sg = np.sign(np.diag(R))
        sg[sg == 0] = 1.0
        Q = Q * sg
        logs[k + 1] = logs[k] + np.log(np.abs(np.diag(R)))
        frames[k + 1] = Q
    Q = Q0
    for k in range(anchor - 1, -1, -1):
        Q = np.linalg.qr(np.linalg.solve(eg.steps[k], Q))[0]
        frames[k] = Q
    span = t[end] - t[mid]
    # least-squares slope damps bounded oscillations far better than an endpoint difference
    tw = t[mid:end + 1] - t[mid]
    tc = tw - tw.mean()
    rates = tc @ (logs[mid:end + 1] - logs[mid:end + 1].mean(axis=0)) / (tc @ tc)
    # per-column uncertainty: swing of the cumulative log about its fitted line
    dev = logs[mid:end + 1] - np.outer(tw, rates)
    unc = (dev.max(axis=0) - dev.min(axis=0)) / span
    quarter = int(np.searchsorted(t, t[anchor] + H / 4 - 1e-12))
    quarter = min(max(quarter, anchor), mid)
    rates = _merge_unresolved(rates, unc, logs[[quarter, mid, end]])
    return RateInfo(rates, frames, anchor, H, (int(mid), int(end)))


def _merge_unresolved(rates: np.ndarray, unc: np.ndarray, marks: np.ndarray) -> np.ndarray:
    """Replace clusters of unresolved neighbouring rates by the cluster mean.

    Two neighbours are unresolved when their rates differ by less than their
    summed uncertainties, or when their log-separation grows sublinearly:
    ``marks`` holds the cumulative logs at ``t_a + H/4``, ``t_a + H/2`` and
    ``t_a + H``, and an exponential separation roughly doubles its increment
    over the doubled window, while a polynomial one (Jordan block) does not.
    Columns spanning a rotating subspace (complex pair) are caught by the
    first test, since only their summed exponent is resolved.
    """
    order = np.argsort(rates)
    out = rates.copy()

    def unresolved(a: int, b: int) -> bool:
        if rates[b] - rates[a] <= unc[a] + unc[b]:
            return True
        sep = marks[:, b] - marks[:, a]
        first, second = sep[1] - sep[0], sep[2] - sep[1]
        return first > 0.0 and second < 1.5 * first

    k = 0
    while k < order.size:
        grp = [order[k]]
        while k + 1 < order.size and unresolved(grp[-1], order[k + 1]):
            k += 1
            grp.append(order[k])
        if len(grp) > 1:
            out[grp] = np.mean(rates[grp])
        k += 1
    return out


def _orth(B: np.ndarray) -> np.ndarray:
    return np.linalg.qr(B)[0]


def _complement(B: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of ``range(B)``."""
    n, k = B.shape
    return np.linalg.qr(np.hstack([_orth(B), np.eye(n)]))[0][:, k:n]


def _projectors_for_rank(eg: EvolutionGrid, info: RateInfo, r: int) -> ProjectorFamily:
    N, n = eg.N, eg.n
    gap_meta = dict(anchor=info.anchor, horizon=info.horizon, rates=tuple(float(x) for x in info.rates))
    if r == 0:
        return ProjectorFamily(np.zeros((N + 1, n, n)), 0, 0.0, method="zero", **gap_meta)
    if r == n:
        return ProjectorFamily(np.broadcast_to(np.eye(n), (N + 1, n, n)).copy(), n, 0.0,
                               method="identity", **gap_meta)
    u = n - r
    a = info.anchor
    # Leading frames of a generic forward pass span an unstable family. Its
    # orthogonal complement at the last node, propagated backward, gives the
    # stable family; the unstable family is then restarted orthogonally to the
    # stable subspace at the anchor. Each family is propagated only in its
    # numerically stable direction.
    Es = np.empty((N + 1, n, r))
    Es[N] = _complement(info.frames[N][:, :u])
    for k in range(N - 1, -1, -1):
        Es[k] = _orth(np.linalg.solve(eg.steps[k], Es[k + 1]))
    Eu = np.empty((N + 1, n, u))
    Eu[a] = _complement(Es[a])
    for k in range(a, N):
        Eu[k + 1] = _orth(eg.steps[k] @ Eu[k])
    for k in range(a - 1, -1, -1):
        Eu[k] = _orth(np.linalg.solve(eg.steps[k], Eu[k + 1]))
    P = np.empty((N + 1, n, n))
    cond = 1.0
    for k in range(N + 1):
        B = np.hstack([Es[k], Eu[k]])
        cond = max(cond, float(np.linalg.cond(B)))
        coeff = np.linalg.solve(B, np.eye(n))[:r]
        P[k] = Es[k] @ coeff
    res = _step_invariance(eg, P)
    return ProjectorFamily(P, r, res, basis_cond=cond, **gap_meta)


def _step_invariance(eg: EvolutionGrid, P: np.ndarray) -> float:
    """Max over steps of ``||S_k P_k - P_{k+1} S_k|| / (||S_k|| (1 + ||P||))``."""
    S = eg.steps
    lhs = np.matmul(S, P[:-1]) - np.matmul(P[1:], S)
    scale = _opnorms(S) * (1.0 + np.maximum(_opnorms(P[:-1]), _opnorms(P[1:])))
    return float(np.max(_opnorms(lhs) / scale))


def estimate_projectors(eg: EvolutionGrid, anchor: int = 0, horizon: float | None = None,
                        gap_tol: float = DEFAULT_GAP_TOL, lam: float = 0.0) -> ProjectorFamily:
    """Invariant projector family of the (``lam``-shifted) grid.

    The rank is the number of negative rates from :func:`growth_rates`; the
    splitting is accepted only if every rate is at least ``gap_tol / 2`` away
    from zero. The unstable family is the forward-propagated leading frame and
    the stable family is propagated backward from the last node.

    Raises
    ------
    NoGapError
        When some rate lies within ``gap_tol / 2`` of zero.
    """
    return DichotomyAnalyzer(eg, anchor, horizon).projectors_at(lam, gap_tol)


# ---------------------------------------------------------------------------
# Analyzer (caches everything independent of the shift)

class DichotomyAnalyzer:
    """Shift-independent cache for one grid: rates, projectors, pair data, active sets.

    Shifting by ``lam`` multiplies ``T(t,s)`` by ``e^{-lam (t-s)}``, so the
    projector for a given rank and the pair data are unchanged; only ``f`` is
    sheared by ``-lam d`` (forward) or ``+lam d`` (backward).
    """

    def __init__(self, eg: EvolutionGrid, anchor: int = 0, horizon: float | None = None):
        self.eg = eg
        self.anchor = anchor
        self.horizon = horizon
        self._proj: dict[int, ProjectorFamily] = {}
        self._pairs: dict[tuple, PairSet] = {}
        self._active: dict[tuple, np.ndarray] = {}
        self.half_N = max(1, eg.N // 2)

    @cached_property
    def rate_info(self) -> RateInfo:
        return growth_rates(self.eg, self.anchor, self.horizon)

    @property
    def rates(self) -> np.ndarray:
        return self.rate_info.rates

    def rank_and_gap(self, lam: float = 0.0) -> tuple[int, float]:
        sh = self.rates - lam
        return int(np.count_nonzero(sh < 0.0)), float(np.min(np.abs(sh)))

    def projectors(self, r: int) -> ProjectorFamily:
        if r not in self._proj:
            pf = _projectors_for_rank(self.eg, self.rate_info, r)
            self._proj[r] = pf
        return self._proj[r]

    def projectors_at(self, lam: float, gap_tol: float = DEFAULT_GAP_TOL) -> ProjectorFamily:
        r, gap = self.rank_and_gap(lam)
        if gap < gap_tol / 2.0:
            raise NoGapError(f"rate within {gap:.3g} of the shift {lam}: no splitting", gap)
        pf = self.projectors(r)
        return ProjectorFamily(pf.P, pf.rank, pf.invariance_residual, pf.anchor, pf.horizon, gap,
                               pf.rates, pf.basis_cond, pf.method)

    def pairs(self, r: int, part: str) -> PairSet:
        key = (r, part)
        if key not in self._pairs:
            pf = self.projectors(r)
            if part == "stable":
                ps = forward_pairs(self.eg, pf.P) if r > 0 else PairSet.empty()
            elif part == "unstable":
                ps = backward_pairs(self.eg, pf.Q) if r < self.eg.n else PairSet.empty()
            else:
                raise ValueError(part)
            self._pairs[key] = ps
        return self._pairs[key]

    def _merged(self, r: int, lam: float, half: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
        """Stacked constraint data (stable then unstable) of the shifted grid."""
        st, un = self.pairs(r, "stable"), self.pairs(r, "unstable")
        if half:
            st = st.subset(st.i <= self.half_N)
            un = un.subset(un.j <= self.half_N)
        d = np.concatenate([st.d, un.d])
        s = np.concatenate([st.s, un.s])
        f0 = np.concatenate([st.f, un.f])
        sign = np.concatenate([-np.ones(st.size), np.ones(un.size)])
        return d, s, f0 + sign * lam * d, st.size

    def fit(self, r: int, lam: float = 0.0, *, margin: float = DEFAULT_MARGIN, fix_eps: float | None = None,
            half: bool = False, alpha_min: float = ALPHA_MIN, tie_break: bool = True) -> DichotomyCertificate:
        pf = self.projectors(r)
        d, s, f, nst = self._merged(r, lam, half)
        span = float(self.eg.times[self.half_N if half else -1] - self.eg.times[0])
        key = (r, half, fix_eps)
        env = fit_envelope(d, s, f, ref_lag=span / 4.0, margin=margin, fix_b=fix_eps,
                           working_set=self._active.get(key), tie_break=tie_break)
        if not env.ok:
            return DichotomyCertificate(math.inf, math.nan, math.nan, pf, math.inf, math.inf, False,
                                        env.status, lam, span)
        alpha, eps = -env.a, env.b
        logK = env.c0
        viol = f - (logK - alpha * d + eps * s)
        # warm start for nearby shifts: the final working set, trimmed to its tightest rows
        ws = env.working_set
        if ws.size > 512:
            ws = ws[np.argpartition(viol[ws], -512)[-512:]]
        self._active[key] = ws
        sv = float(np.max(viol[:nst])) if nst else -math.inf
        uv = float(np.max(viol[nst:])) if viol.size > nst else -math.inf
        feasible = alpha >= alpha_min * (1.0 - 1e-9) and eps < alpha
        reason = "" if feasible else f"decay rate {alpha:.3g} below {alpha_min:g}"
        return DichotomyCertificate(math.exp(logK), alpha, eps, pf, sv, uv, feasible, reason, lam, span,
                                    env.n_active)

    def verdict(self, lam: float = 0.0, *, gap_tol: float = DEFAULT_GAP_TOL, margin: float = DEFAULT_MARGIN,
                alpha_min: float = ALPHA_MIN, force_rank: int | None = None,
                k_ratio: float = K_RATIO_MAX, tie_break: bool = True) -> tuple[bool, DichotomyCertificate | None, str, int]:
        """Classify the shifted grid: ``(has_dichotomy, certificate, reason, rank)``.

        A dichotomy is certified iff the rate splitting is accepted, the fit
        has ``alpha >= alpha_min`` (and ``eps < alpha``), and ``K`` fitted on
        the full grid is below ``k_ratio`` times ``K`` fitted on its first half.
        """
        r, gap = self.rank_and_gap(lam)
        if gap < gap_tol / 2.0:
            return False, None, f"no gap: rate within {gap:.3g} of the shift", r
        if force_rank is not None and r != force_rank:
            return False, None, f"splitting has rank {r}, not {force_rank}", r
        cert = self.fit(r, lam, margin=margin, alpha_min=alpha_min, tie_break=tie_break)
        if not cert.feasible:
            return False, cert, cert.reason, r
        half = self.fit(r, lam, margin=margin, alpha_min=alpha_min, half=True, tie_break=tie_break)
        if not half.feasible:
            return False, cert, "half-horizon fit: " + half.reason, r
        if cert.K > k_ratio * half.K:
            return False, cert, f"K grows with the horizon ({half.K:.3g} -> {cert.K:.3g})", r
        return True, cert, "", r


# ---------------------------------------------------------------------------
# Public operations

def fit_dichotomy(eg: EvolutionGrid, pf: ProjectorFamily, *, margin: float = DEFAULT_MARGIN,
                  fix_eps: float | None = None, alpha_min: float = ALPHA_MIN) -> DichotomyCertificate:
    """Fit ``(K, alpha, eps)`` for a given projector family on all grid pairs.

    ``fix_eps=0`` gives the forced-uniform fit. ``feasible`` is False when the
    best decay rate is below ``alpha_min``.
    """
    if len(pf) != eg.N + 1 or pf.n != eg.n:
        raise PreconditionError("projector family does not match the grid")
    st = forward_pairs(eg, pf.P) if pf.rank > 0 else PairSet.empty()
    un = backward_pairs(eg, pf.Q) if pf.rank < eg.n else PairSet.empty()
    d = np.concatenate([st.d, un.d])
    s = np.concatenate([st.s, un.s])
    f = np.concatenate([st.f, un.f])
    span = float(eg.times[-1] - eg.times[0])
    env = fit_envelope(d, s, f, ref_lag=span / 4.0, margin=margin, fix_b=fix_eps)
    if not env.ok:
        return DichotomyCertificate(math.inf, math.nan, math.nan, pf, math.inf, math.inf, False, env.status,
                                    0.0, span)
    alpha, eps = -env.a, env.b
    viol = f - (env.c0 - alpha * d + eps * s)
    sv = float(np.max(viol[:st.size])) if st.size else -math.inf
    uv = float(np.max(viol[st.size:])) if un.size else -math.inf
    feasible = alpha >= alpha_min * (1.0 - 1e-9) and eps < alpha
    return DichotomyCertificate(math.exp(env.c0), alpha, eps, pf, sv, uv, feasible,
                                "" if feasible else f"decay rate {alpha:.3g} below {alpha_min:g}",
                                0.0, span, env.n_active)


def growth_pairs(eg: EvolutionGrid, kind: str) -> PairSet:
    if kind == "half":
        return forward_pairs(eg)
    if kind == "backward":
        return backward_pairs(eg)
    if kind == "full":
        fw, bw = forward_pairs(eg), backward_pairs(eg)
        return PairSet(*(np.concatenate([getattr(fw, a), getattr(bw, a)]) for a in ("d", "s", "f", "i", "j")))
    raise PreconditionError(f"unknown growth kind {kind!r}")


def fit_growth(eg: EvolutionGrid, kind: str = "half") -> GrowthCertificate:
    """Fit ``||T(t,s)|| <= M exp(nu |t-s| + delta s)``.

    ``kind`` is ``half`` (pairs ``t >= s``), ``full`` (both orders) or
    ``backward`` (only ``t <= s``; used to bound the spectrum from below).
    """
    ps = growth_pairs(eg, kind)
    env = fit_envelope(ps.d, ps.s, ps.f, ref_lag=float(eg.times[-1] - eg.times[0]) / 4.0)
    return GrowthCertificate(math.exp(env.c0), env.a, env.b, kind, env.max_violation, ps.size)


def verify_certificate(eg: EvolutionGrid, cert) -> ViolationReport:
    """Exhaustive sweep of a certificate over all grid pairs.

    For a :class:`DichotomyCertificate` the projector family must live on
    ``eg`` or be constant; a constant family may be checked on any grid.
    """
    if isinstance(cert, GrowthCertificate):
        ps = growth_pairs(eg, cert.kind)
        v = ps.f - (math.log(cert.M) + cert.nu * ps.d + cert.delta * ps.s)
        worst = float(np.max(v)) if v.size else -math.inf
        return ViolationReport(worst, -math.inf)
    pf = cert.projectors
    if len(pf) != eg.N + 1:
        if pf.method in ("constant", "identity", "zero"):
            pf = ProjectorFamily.constant(pf.P[0], eg.N)
        else:
            raise PreconditionError("projector family does not match the grid")
    eg = eg.shifted(cert.lam)
    logK = math.log(cert.K)
    out = []
    for part in ("stable", "unstable"):
        if part == "stable":
            ps = forward_pairs(eg, pf.P) if pf.rank > 0 else PairSet.empty()
        else:
            ps = backward_pairs(eg, pf.Q) if pf.rank < eg.n else PairSet.empty()
        v = ps.f - (logK - cert.alpha * ps.d + cert.eps * ps.s)
        out.append(float(np.max(v)) if v.size else -math.inf)
    return ViolationReport(*out)


def classifier_params(tol: float) -> dict:
    """Verdict thresholds at resolution ``tol``."""
    small = min(DEFAULT_MARGIN, tol / 2.0)
    return dict(gap_tol=tol, margin=small, alpha_min=small)


def is_contraction(eg: EvolutionGrid, *, tol: float = 1e-3,
                   analyzer: DichotomyAnalyzer | None = None) -> tuple[bool, DichotomyCertificate]:
    """Exponential contraction test: dichotomy with ``P = I``.

    ``tol`` is the rate resolution, shared with the spectrum classifier so
    that a contraction verdict matches a rightmost endpoint below ``-tol``.
    Returns the verdict and the certificate fitted with the identity projector
    (always produced, even when the verdict is negative).
    """
    an = analyzer or DichotomyAnalyzer(eg)
    ok, cert, _, _ = an.verdict(0.0, force_rank=eg.n, **classifier_params(tol))
    if cert is None or cert.rank != eg.n:
        cert = an.fit(eg.n, 0.0)
        ok = False
    return ok, cert
