"""Time-parametrized quadratic (Lyapunov) norms on a grid.

A family of symmetric positive-definite weights ``G(t_i)`` defines
``|x|_i = sqrt(x^T G_i x)``. Weights are built from a dichotomy certificate
so that, measured in the family, the dichotomy becomes (nearly) uniform.
Operator norms between nodes, sandwich constants and the sup-norm of an
off-diagonal coupling block are computed exactly for quadratic families.
"""
from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from .dichotomy import DichotomyCertificate, GrowthCertificate, backward_pairs, fit_envelope, forward_pairs
from .errors import PreconditionError
from .evolution import EvolutionGrid

__all__ = [
    "NormFamily", "SandwichReport", "UniformizedCertificate", "CSupReport",
    "build_lyapunov_family", "identity_family", "vector_norm", "op_norm", "check_sandwich",
    "fit_sandwich", "uniformize", "c_sup_norm", "write_family_csv", "EPS_REG",
]

EPS_REG = 1e-8


@dataclass(frozen=True, eq=False)
class NormFamily:
    """Weights ``G[i]`` with measured sandwich ``L1 |x| <= |x|_i <= L2[i] |x|``.

    Attributes
    ----------
    times : ndarray, shape (N+1,)
    G : ndarray, shape (N+1, n, n)
    M, K, theta : float
        Declared envelope ``L2(t) <= (M + K) e^{theta t}`` from the growth and
        dichotomy certificates used in the build (``nan`` when not built from
        certificates).
    horizon : float
        Truncation horizon of the weight sums.
    """

    times: np.ndarray
    G: np.ndarray = field(repr=False)
    M: float = math.nan
    K: float = math.nan
    theta: float = math.nan
    horizon: float = 0.0
    eps_reg: float = EPS_REG

    def __post_init__(self) -> None:
        G = np.asarray(self.G, dtype=float)
        if G.ndim != 3 or G.shape[1] != G.shape[2] or G.shape[0] != len(self.times):
            raise PreconditionError("weights must have shape (len(times), n, n)")
        if not np.allclose(G, np.transpose(G, (0, 2, 1)), rtol=1e-12, atol=1e-14):
            raise PreconditionError("weights must be symmetric")
        G = 0.5 * (G + np.transpose(G, (0, 2, 1)))
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        if not np.all(self._eig[0] > 0.0):
            raise PreconditionError("weights must be positive definite")

    @property
    def n(self) -> int:
        return self.G.shape[1]

    @property
    def N(self) -> int:
        return self.G.shape[0] - 1

    @cached_property
    def _eig(self) -> tuple[np.ndarray, np.ndarray]:
        return np.linalg.eigh(self.G)

    @cached_property
    def sqrt(self) -> np.ndarray:
        """``G_i^{1/2}`` for every node."""
        w, V = self._eig
        return np.einsum("kij,kj,klj->kil", V, np.sqrt(w), V)

    @cached_property
    def inv_sqrt(self) -> np.ndarray:
        """``G_i^{-1/2}`` for every node."""
        w, V = self._eig
        return np.einsum("kij,kj,klj->kil", V, 1.0 / np.sqrt(w), V)

    @property
    def eigmin(self) -> np.ndarray:
        return self._eig[0][:, 0]

    @property
    def eigmax(self) -> np.ndarray:
        return self._eig[0][:, -1]

    @property
    def L1(self) -> float:
        """Uniform lower sandwich constant ``min_i sqrt(eigmin G_i)``."""
        return float(np.sqrt(np.min(self.eigmin)))

    @property
    def L2(self) -> np.ndarray:
        """Per-node upper sandwich constants ``sqrt(eigmax G_i)``."""
        return np.sqrt(self.eigmax)

    def conjugate(self, eg: EvolutionGrid, target: "NormFamily | None" = None) -> np.ndarray:
        """Steps expressed in the family: ``G_{k+1}^{1/2} S_k G_k^{-1/2}``."""
        tgt = self if target is None else target
        return np.matmul(np.matmul(tgt.sqrt[1:], eg.steps), self.inv_sqrt[:-1])


def identity_family(times, n: int) -> NormFamily:
    """Euclidean norm at every node."""
    t = np.asarray(times, dtype=float)
    return NormFamily(t, np.broadcast_to(np.eye(n), (t.size, n, n)).copy(), eps_reg=0.0)


def build_lyapunov_family(eg: EvolutionGrid, dc: DichotomyCertificate, gc: GrowthCertificate | None = None,
                          horizon: float | None = None, eps_reg: float = EPS_REG) -> NormFamily:
    """Quadratic Lyapunov weights adapted to a dichotomy certificate.

    ``G(t) = eps_reg I + sum_{t <= tau <= t+H} w e^{2 alpha (tau-t)} (T(tau,t)P(t))^T (T(tau,t)P(t))
    + sum_{t-H <= tau <= t} w e^{2 alpha (t-tau)} (T(tau,t)Q(t))^T (T(tau,t)Q(t))``
    where the weight ``w`` is 1 at ``tau = t`` and the grid step elsewhere.

    Parameters
    ----------
    eg : EvolutionGrid
        Grid on which ``dc`` was fitted (the certificate shift is applied).
    dc : DichotomyCertificate
    gc : GrowthCertificate, optional
        Supplies ``M`` and ``delta`` of the declared envelope.
    horizon : float, optional
        Truncation horizon ``H``; defaults to ``max(5 / alpha, span / 4)``
        capped by the grid span. The window must outlast the transients of
        the coefficients (one period for oscillating ones), which ``5 / alpha``
        alone does not guarantee.
    """
    pf = dc.projectors
    if len(pf) != eg.N + 1 or pf.n != eg.n:
        raise PreconditionError("certificate projectors do not match the grid")
    if not (dc.alpha > 0.0 and math.isfinite(dc.alpha)):
        raise PreconditionError("certificate needs a positive decay rate")
    span = float(eg.times[-1] - eg.times[0])
    H = min(max(5.0 / dc.alpha, span / 4.0), span) if horizon is None else float(horizon)
    if H < 0.0 or H > span * (1 + 1e-12):
        raise PreconditionError(f"horizon {H} outside [0, {span}]")
    g = eg.shifted(dc.lam)
    t = g.times
    n, N = g.n, g.N
    a = dc.alpha
    P, Q = pf.P, pf.Q
    G = np.broadcast_to(eps_reg * np.eye(n), (N + 1, n, n)).copy()
    # forward window: chains T(tau, t_i) P(t_i), advanced for all i at once
    U = P.copy()
    active = np.arange(N + 1)
    G += np.matmul(np.transpose(U, (0, 2, 1)), U)
    for k in range(1, N + 1):
        active = active[(active + k <= N) & (t[np.minimum(active + k, N)] - t[active] <= H * (1 + 1e-12))]
        if active.size == 0:
            break
        U = np.matmul(g.steps[active + k - 1], U[np.searchsorted(prev, active)] if k > 1 else U[active])
        U = np.matmul(P[active + k], U)
        w = (t[active + k] - t[active + k - 1]) * np.exp(2.0 * a * (t[active + k] - t[active]))
        G[active] += w[:, None, None] * np.matmul(np.transpose(U, (0, 2, 1)), U)
        prev = active
    # backward window: chains T(tau, t_i) Q(t_i) for tau <= t_i, by solves
    V = Q.copy()
    active = np.arange(N + 1)
    G += np.matmul(np.transpose(V, (0, 2, 1)), V)
    for k in range(1, N + 1):
        active = active[(active - k >= 0) & (t[active] - t[np.maximum(active - k, 0)] <= H * (1 + 1e-12))]
        if active.size == 0:
            break
        base = V[np.searchsorted(prev, active)] if k > 1 else V[active]
        V = np.linalg.solve(g.steps[active - k], base)
        V = np.matmul(Q[active - k], V)
        w = (t[active - k + 1] - t[active - k]) * np.exp(2.0 * a * (t[active] - t[active - k]))
        G[active] += w[:, None, None] * np.matmul(np.transpose(V, (0, 2, 1)), V)
        prev = active
    G = 0.5 * (G + np.transpose(G, (0, 2, 1)))
    eps = dc.eps if math.isfinite(dc.eps) else 0.0
    M, delta = (gc.M, gc.delta) if gc is not None else (math.nan, 0.0)
    theta = max(delta, eps)
    return NormFamily(t.copy(), G, M, dc.K, theta, H, eps_reg)


def vector_norm(nf: NormFamily, x, i: int) -> float:
    """``|x|_{t_i} = sqrt(x^T G_i x)``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (nf.n,):
        raise PreconditionError(f"vector of length {nf.n} expected")
    return float(math.sqrt(max(0.0, float(x @ nf.G[i] @ x))))


def op_norm(nf: NormFamily, U, j: int, i: int, source: NormFamily | None = None) -> float:
    """``||U||_{t_j, t_i} = sup |U x|_{t_i} / |x|_{t_j}``.

    The target norm is ``nf`` at node ``i``; the source norm is ``source``
    (default ``nf``) at node ``j``. Rectangular ``U`` needs both families.
    """
    src = nf if source is None else source
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.shape != (nf.n, src.n):
        raise PreconditionError(f"matrix of shape {(nf.n, src.n)} expected, got {U.shape}")
    return float(np.linalg.norm(nf.sqrt[i] @ U @ src.inv_sqrt[j], 2))


@dataclass(frozen=True)
class SandwichReport:
    """Fitted ``(L, theta)`` with ``L1 |x| <= |x|_t <= L e^{theta t} L1 |x|``."""

    L1: float
    L: float
    theta: float
    lower_violation: np.ndarray = field(repr=False)
    upper_violation: np.ndarray = field(repr=False)

    @property
    def valid(self) -> bool:
        return bool(np.max(self.lower_violation) <= 0.0 and np.max(self.upper_violation) <= 0.0)

    def to_dict(self) -> dict:
        return {"L1": self.L1, "L": self.L, "theta": self.theta,
                "max_lower_violation": float(np.max(self.lower_violation)),
                "max_upper_violation": float(np.max(self.upper_violation)), "valid": self.valid}


def fit_sandwich(times, L2, L1: float) -> tuple[float, float]:
    """Smallest ``(L, theta)``, ``theta >= 0``, with ``L2_i <= L L1 e^{theta t_i}``.

    Solved as a two-variable LP in the log domain: minimize
    ``log(L L1) + theta * mean(t)`` (the log-envelope at the mean time).
    """
    t = np.asarray(times, dtype=float)
    y = np.log(np.asarray(L2, dtype=float) / L1)
    res = linprog([1.0, float(np.mean(t))], A_ub=np.column_stack([-np.ones_like(t), -t]), b_ub=-y,
                  bounds=[(None, None), (0.0, None)], method="highs")
    c, theta = (float(res.x[0]), float(res.x[1])) if res.status == 0 else (float(np.max(y)), 0.0)
    if theta < 1e-12:
        theta = 0.0
    # exact offset for the chosen rate
    c = float(np.max(y - theta * t))
    return math.exp(c), theta


def check_sandwich(nf: NormFamily) -> SandwichReport:
    """Verify the sandwich on the eigen-extremes of every weight and fit ``(L, theta)``."""
    L1 = nf.L1
    L, theta = fit_sandwich(nf.times, nf.L2, L1)
    lower = L1 - np.sqrt(nf.eigmin)
    upper = nf.L2 - L * L1 * np.exp(theta * nf.times)
    # relative rounding of the exp/log round trip
    upper = np.where(np.abs(upper) <= 1e-12 * nf.L2, 0.0, upper)
    return SandwichReport(L1, L, theta, lower, upper)


@dataclass(frozen=True)
class UniformizedCertificate:
    """Uniform bounds in the family: contraction ``kappa e^{-alpha(t-s)}``, expansion
    ``kappa_tilde e^{-alpha_tilde(s-t)}``, growth ``mu e^{omega (t-s)}``."""

    kappa: float
    alpha: float
    kappa_tilde: float
    alpha_tilde: float
    mu: float
    omega: float
    residual: float

    @property
    def slack(self) -> float:
        """Truncation deficit: the untruncated construction gives ``kappa = kappa_tilde = 1``."""
        return max(self.kappa, self.kappa_tilde) - 1.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("kappa", "alpha", "kappa_tilde", "alpha_tilde", "mu", "omega", "residual", "slack")}


def _conjugated_grid(eg: EvolutionGrid, nf: NormFamily) -> EvolutionGrid:
    return EvolutionGrid.from_steps(eg.times, nf.conjugate(eg))


def uniformize(eg: EvolutionGrid, nf: NormFamily, dc: DichotomyCertificate) -> UniformizedCertificate:
    """Measure the certificate in the family over all grid pairs.

    ``kappa = max ||T(t,s)P(s)||_{s,t} e^{alpha(t-s)}`` over ``t >= s`` and
    ``kappa_tilde`` likewise for ``Q`` over ``t <= s``; the growth part
    ``(mu, omega)`` is the smallest uniform envelope of ``||T(t,s)||_{s,t}``.
    The residual of the three inequalities with the reported constants is
    nonpositive up to rounding.
    """
    g = eg.shifted(dc.lam)
    if nf.N != g.N or nf.n != g.n:
        raise PreconditionError("family does not match the grid")
    h = _conjugated_grid(g, nf)
    Pc = np.matmul(np.matmul(nf.sqrt, dc.projectors.P), nf.inv_sqrt)
    Qc = np.eye(nf.n)[None] - Pc
    a = dc.alpha
    kappa, kappa_t, res = 1.0, 1.0, -math.inf
    if dc.rank > 0:
        st = forward_pairs(h, Pc)
        kappa = max(1.0, float(np.exp(np.max(st.f + a * st.d))))
        res = max(res, float(np.max(st.f - (math.log(kappa) - a * st.d))))
    if dc.rank < nf.n:
        un = backward_pairs(h, Qc)
        kappa_t = max(1.0, float(np.exp(np.max(un.f + a * un.d))))
        res = max(res, float(np.max(un.f - (math.log(kappa_t) - a * un.d))))
    gr = forward_pairs(h)
    env = fit_envelope(gr.d, gr.s, gr.f, fix_b=0.0)
    mu, omega = math.exp(env.c0), env.a
    res = max(res, float(np.max(gr.f - (env.c0 + omega * gr.d))))
    return UniformizedCertificate(kappa, a, kappa_t, a, mu, omega, res)


@dataclass(frozen=True)
class CSupReport:
    """``sup_tau ||C(tau)||_{tau,tau}`` with its per-node trace and the sandwich proxy."""

    sup: float
    proxy: float
    trace: np.ndarray = field(repr=False)
    proxy_trace: np.ndarray = field(repr=False)
    argmax: int

    def to_dict(self) -> dict:
        return {"sup": self.sup, "proxy": self.proxy, "argmax": self.argmax}


def c_sup_norm(C, nfA: NormFamily, nfB: NormFamily) -> CSupReport:
    """Sup over nodes of the coupling block measured from the B-family into the A-family.

    Parameters
    ----------
    C : array, shape (N+1, n, m)
        Off-diagonal block at every node.
    nfA, nfB : NormFamily
        Families of the first (target, dimension ``n``) and second (source,
        dimension ``m``) diagonal blocks on the same nodes.

    Notes
    -----
    The proxy ``sup L2_A(tau) ||C(tau)|| / L1_B`` bounds the sup from above
    using only Euclidean norms and the sandwich constants.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim == 2:
        C = C[:, :, None] if nfB.n == 1 else C[None]
    if C.shape != (nfA.N + 1, nfA.n, nfB.n) or nfA.N != nfB.N:
        raise PreconditionError(f"coupling block of shape {(nfA.N + 1, nfA.n, nfB.n)} expected")
    M = np.matmul(np.matmul(nfA.sqrt, C), nfB.inv_sqrt)
    tr = np.linalg.norm(M, 2, axis=(1, 2)) if min(nfA.n, nfB.n) > 1 else np.sqrt(np.sum(M * M, axis=(1, 2)))
    plain = np.linalg.norm(C, 2, axis=(1, 2)) if min(nfA.n, nfB.n) > 1 else np.sqrt(np.sum(C * C, axis=(1, 2)))
    proxy = nfA.L2 * plain / nfB.L1
    k = int(np.argmax(tr))
    return CSupReport(float(tr[k]), float(np.max(proxy)), tr, proxy, k)


def write_family_csv(nf: NormFamily, path: str | Path) -> None:
    """Columns ``t, L2_measured, eigmin_G, eigmax_G``; written atomically."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "L2_measured", "eigmin_G", "eigmax_G"])
            for row in zip(nf.times, nf.L2, nf.eigmin, nf.eigmax):
                w.writerow([repr(float(v)) for v in row])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
