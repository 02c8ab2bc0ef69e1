"""Block upper-triangular systems ``[[A, C], [0, B]]``.

The evolution operator of the composed system is ``[[X, W], [0, Y]]`` with
``W(t,s) = int_s^t X(t,tau) C(tau) Y(tau,s) dtau``. From dichotomies of the
diagonal blocks one builds the composed invariant projector
``[[P_A, R], [0, P_B]]``, predicts its dichotomy constants, and checks every
intermediate inequality on the grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from math import comb

import numpy as np

from .dichotomy import (DichotomyAnalyzer, DichotomyCertificate, GrowthCertificate, ProjectorFamily,
                        backward_pairs, fit_dichotomy, fit_growth, forward_pairs)
from .errors import PreconditionError, QuadratureError
from .evolution import EvolutionGrid, TimeGrid, build_grid
from .normfam import (NormFamily, UniformizedCertificate, build_lyapunov_family, c_sup_norm, fit_sandwich,
                      op_norm, uniformize)
from .spectrum import SpectrumResult, compute_spectrum, interval_hausdorff
from .sysdef import SystemDef, compile_exprs

__all__ = [
    "gregory_weights", "interpolatory_weights", "BlockAnalysis", "analyze_block", "PredictedConstants", "predicted_constants",
    "TriangularComposition", "build_composition", "compute_W", "compute_linking", "compute_R",
    "compose_projector", "verify_invariance", "verify_bound_R", "verify_composed_dichotomy",
    "CompositionReport", "check_coupling_bound", "w_split_identity", "diagonal_significance", "SignificanceReport",
]

_GREGORY = (1 / 12, 1 / 24, 19 / 720, 3 / 160, 863 / 60480)


# ---------------------------------------------------------------------------
# Quadrature

def gregory_weights(m: int, order: int = 5) -> np.ndarray:
    """Weights (in units of the step) of the endpoint-corrected trapezoid rule on ``m`` intervals.

    Trapezoid weights plus Gregory end corrections with differences up to
    ``min(order, m)``; exact for polynomials of that degree.
    """
    if m < 1:
        return np.zeros(max(m + 1, 1))
    W = np.ones(m + 1)
    W[0] = W[-1] = 0.5
    for k in range(1, min(order, m) + 1):
        c = _GREGORY[k - 1]
        for j in range(k + 1):
            fwd = (-1) ** (k - j) * comb(k, j)
            bwd = (-1) ** j * comb(k, j)
            W[j] += c * fwd if k % 2 == 1 else -c * fwd
            W[m - j] -= c * bwd
    return W


_SHORT = 6  # interpolation degree for intervals too short for the corrected rule


def interpolatory_weights(nodes, a: float, b: float) -> np.ndarray:
    """Weights of ``int_a^b p`` for the polynomial ``p`` interpolating at ``nodes`` (unit-step coordinates)."""
    x = np.asarray(nodes, dtype=float)
    j = np.arange(x.size)
    V = x[None, :] ** j[:, None]
    mom = (b ** (j + 1) - a ** (j + 1)) / (j + 1)
    return np.linalg.solve(V, mom)


def _stencil(lo: int, hi: int, N: int) -> np.ndarray:
    """At least ``_SHORT + 1`` consecutive nodes covering ``[lo, hi]`` inside ``0..N``."""
    k = min(max(_SHORT, hi - lo), N)
    start = max(0, min(lo, N - k))
    return np.arange(start, start + k + 1)


def _quad(t: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Integrate samples ``F[k]`` (leading axis over nodes ``t``)."""
    m = t.size - 1
    if m < 1:
        return np.zeros(F.shape[1:])
    h = np.diff(t)
    if np.ptp(h) <= 1e-9 * float(np.max(h)):
        w = gregory_weights(m) * float(np.mean(h))
    else:
        w = np.zeros(m + 1)
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
    return np.tensordot(w, F, axes=(0, 0))


def _quad_checked(t: np.ndarray, F: np.ndarray, rtol: float) -> tuple[np.ndarray, float]:
    """Quadrature plus an error estimate from the rule on every other node."""
    val = _quad(t, F)
    m = t.size - 1
    if m >= 8 and m % 2 == 0:
        coarse = _quad(t[::2], F[::2])
        # the coarse rule has order min(5, m/2) + 1; Richardson scaling of the difference
        order = min(len(_GREGORY), m // 2) + 1
        err = float(np.max(np.abs(val - coarse))) / (2.0 ** order - 1.0) if val.size else 0.0
        scale = 1.0 + float(np.max(np.abs(val))) if val.size else 1.0
        if err > rtol * scale:
            raise QuadratureError(f"refinement disagreement {err:.3e} exceeds {rtol:g}")
        return val, err
    return val, 0.0


# ---------------------------------------------------------------------------
# Diagonal blocks

@dataclass(frozen=True, eq=False)
class BlockAnalysis:
    """Dichotomy, growth, Lyapunov family and uniformized constants of one diagonal block."""

    grid: EvolutionGrid = field(repr=False)
    certificate: DichotomyCertificate
    growth: GrowthCertificate
    family: NormFamily = field(repr=False)
    uniform: UniformizedCertificate
    certified: bool
    reason: str

    @property
    def P(self) -> np.ndarray:
        return self.certificate.projectors.P

    @property
    def Q(self) -> np.ndarray:
        return self.certificate.projectors.Q

    @property
    def kappa(self) -> float:
        return max(self.uniform.kappa, self.uniform.kappa_tilde)

    def to_dict(self) -> dict:
        c = self.certificate
        return {"K": c.K, "alpha": c.alpha, "eps": c.eps, "rank": c.rank, "certified": self.certified,
                "reason": self.reason, "growth": self.growth.to_dict(), "uniform": self.uniform.to_dict(),
                "L1": self.family.L1}


def analyze_block(eg: EvolutionGrid, gap_tol: float = 0.1, horizon: float | None = None) -> BlockAnalysis:
    """Certify a dichotomy of a diagonal block at shift zero and uniformize it.

    Raises
    ------
    PreconditionError
        When the block has no rate splitting at zero (zero is spectral).
    """
    an = DichotomyAnalyzer(eg)
    ok, _, reason, r = an.verdict(0.0, gap_tol=gap_tol)
    _, gap = an.rank_and_gap(0.0)
    if gap < gap_tol / 2.0:
        raise PreconditionError(f"block without dichotomy: {reason}")
    cert = an.fit(r, 0.0)
    if not cert.feasible:
        raise PreconditionError(f"block without dichotomy: {cert.reason}")
    gc = fit_growth(eg, "half")
    fam = build_lyapunov_family(eg, cert, gc, horizon=horizon)
    return BlockAnalysis(eg, cert, gc, fam, uniformize(eg, fam, cert), ok, reason)


# ---------------------------------------------------------------------------
# Predicted constants

@dataclass(frozen=True)
class PredictedConstants:
    """Constants of the off-diagonal estimates and of the composed dichotomy.

    ``branch`` is ``"distinct"`` (``alpha != alpha_tilde``) or ``"equal"``.
    Entries of the branch not taken are ``nan``. ``K_bar``, ``M_bar``,
    ``omega_bar`` and ``theta_bar`` are filled from fits on the composed grid.
    """

    kappa_I: float
    L: float
    theta: float
    c_sup: float
    branch: str
    K1: float
    alpha1: float
    K2: float
    alpha2: float
    gamma: float
    K3: float
    alpha3: float
    eps3: float
    M1: float
    omega1: float
    M2: float
    omega2: float
    M3: float
    omega3: float
    alpha_bar: float
    eps_bar: float
    K_bar: float = math.nan
    M_bar: float = math.nan
    omega_bar: float = math.nan
    theta_bar: float = math.nan

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def predicted_constants(alpha: float, alpha_t: float, kappa_I: float, c_sup: float, L: float, theta: float, *,
                        mu_I: float = 1.0, omega: float = 0.0, omega_t: float = 0.0, gamma: float | None = None,
                        rate_rtol: float = 1e-3) -> PredictedConstants:
    """Constants of the off-diagonal dichotomy and growth estimates.

    Distinct rates: ``K1 = max{1, L c kappa_I^2 [1/|alpha - alpha_t| + 2/(alpha + alpha_t)]}``,
    ``alpha1 = min{alpha, alpha_t}``. Equal rates: ``K2 = max{1, 2 L c kappa_I^2 / gamma}``,
    ``alpha2 = alpha - gamma`` with ``gamma`` defaulting to ``min{alpha/2, (alpha - theta)/2}``.
    Growth: ``M1 = max{1, 2 L c mu_I^2 / |omega_t - omega|}``, ``omega1 = max{omega, omega_t}``
    (distinct), ``M2 = max{1, L c mu_I^2}``, ``omega2 = omega + 1`` (equal).
    ``K3, alpha3, M3, omega3`` take the branch values; ``eps3 = theta``.

    Raises
    ------
    PreconditionError
        If ``theta`` is not below the resulting decay rate, or ``gamma`` is
        outside ``(0, alpha)`` in the equal-rate branch.
    """
    nan = math.nan
    if not (alpha > 0 and alpha_t > 0):
        raise PreconditionError("decay rates must be positive")
    LC = L * c_sup
    equal = abs(alpha - alpha_t) <= rate_rtol * max(alpha, alpha_t)
    if not equal:
        K1 = max(1.0, LC * kappa_I ** 2 * (1.0 / abs(alpha - alpha_t) + 2.0 / (alpha + alpha_t)))
        a1 = min(alpha, alpha_t)
        if not theta < a1:
            raise PreconditionError(f"theta={theta:.6g} is not below min(alpha, alpha_tilde)={a1:.6g}")
        K2 = a2 = g = nan
        K3, a3 = K1, a1
    else:
        a = min(alpha, alpha_t)
        if not theta < a:
            raise PreconditionError(f"theta={theta:.6g} is not below alpha={a:.6g}")
        g = min(a / 2.0, (a - theta) / 2.0) if gamma is None else float(gamma)
        if not (0.0 < g < a and theta < a - g):
            raise PreconditionError(f"gamma={g:.6g} needs 0 < gamma < alpha and theta < alpha - gamma")
        K2 = max(1.0, 2.0 * LC * kappa_I ** 2 / g)
        a2 = a - g
        K1 = a1 = nan
        K3, a3 = K2, a2
    if abs(omega - omega_t) > rate_rtol * max(1.0, abs(omega), abs(omega_t)):
        M1 = max(1.0, LC * mu_I ** 2 * 2.0 / abs(omega_t - omega))
        w1 = max(omega, omega_t)
        M2 = w2 = nan
        M3, w3 = M1, w1
    else:
        M2 = max(1.0, LC * mu_I ** 2)
        w2 = max(omega, omega_t) + 1.0
        M1 = w1 = nan
        M3, w3 = M2, w2
    return PredictedConstants(kappa_I, L, theta, c_sup, "equal" if equal else "distinct", K1, a1, K2, a2,
                              g, K3, a3, theta, M1, w1, M2, w2, M3, w3, a3, theta)


# ---------------------------------------------------------------------------
# Composition

def _right_solve(Z: np.ndarray, S: np.ndarray) -> np.ndarray:
    """``Z S^{-1}`` for stacks."""
    return np.swapaxes(np.linalg.solve(np.swapaxes(S, -1, -2), np.swapaxes(Z, -1, -2)), -1, -2)


class TriangularComposition:
    """Composed grid ``[[X, W], [0, Y]]`` with the objects built from block dichotomies.

    Parameters
    ----------
    full : EvolutionGrid
        Grid of the composed system of dimension ``n + m``.
    n : int
        Dimension of the first diagonal block.
    C : ndarray, shape (N+1, n, m)
        Coupling block at the nodes.
    horizon : float, optional
        Truncation of the improper integrals (linking operator and ``R_1``).
        Nodes closer than this to the grid end are outside the valid range.
    """

    def __init__(self, full: EvolutionGrid, n: int, C: np.ndarray, *, horizon: float | None = None,
                 gap_tol: float = 0.1, quad_rtol: float = 1e-5, name: str = ""):
        if not 0 < n < full.n:
            raise PreconditionError(f"split {n} outside 1..{full.n - 1}")
        lower = full.steps[:, n:, :n]
        if np.max(np.abs(lower), initial=0.0) > 1e-12 * max(1.0, float(np.max(np.abs(full.steps)))):
            raise PreconditionError("composed grid is not block upper triangular")
        self.full = full
        self.n, self.m = n, full.n - n
        self.name = name
        self.C = np.asarray(C, dtype=float).reshape(full.N + 1, self.n, self.m)
        self.quad_rtol = quad_rtol
        self.X = EvolutionGrid(full.grid, full.steps[:, :n, :n], full.tol, f"{name}:X")
        self.Y = EvolutionGrid(full.grid, full.steps[:, n:, n:], full.tol, f"{name}:Y")
        self.A = analyze_block(self.X, gap_tol)
        self.B = analyze_block(self.Y, gap_tol)
        a, at = self.A.certificate.alpha, self.B.certificate.alpha
        span = float(full.times[-1] - full.times[0])
        self.horizon = min(span / 2.0, 25.0 / (a + at)) if horizon is None else float(horizon)
        t = full.times
        self.n_valid = int(np.searchsorted(t, t[-1] - self.horizon + 1e-9 * max(1.0, span), side="right") - 1)
        if self.n_valid < 2:
            raise PreconditionError("grid too short for the integration horizon")

    # -- shape ----------------------------------------------------------
    @property
    def times(self) -> np.ndarray:
        return self.full.times

    @property
    def N(self) -> int:
        return self.full.N

    # -- constants --------------------------------------------------------
    @cached_property
    def c_sup(self):
        return c_sup_norm(self.C, self.A.family, self.B.family)

    @cached_property
    def sandwich(self) -> tuple[float, float]:
        """``(L, theta)`` with ``L2_A(t), L2_B(t) <= L min(L1_A, L1_B) e^{theta t}``.

        The larger of the certificate form ``(M + K)/L1`` with
        ``theta = max{delta, delta~, eps, eps~}`` and a direct fit of the
        measured families, so the bound holds on the grid by construction.
        """
        A, B = self.A, self.B
        L_cert = max((A.growth.M + A.certificate.K) / A.family.L1, (B.growth.M + B.certificate.K) / B.family.L1)
        th_cert = max(A.growth.delta, B.growth.delta, A.certificate.eps, B.certificate.eps)
        L_fit, th_fit = fit_sandwich(self.times, np.maximum(A.family.L2, B.family.L2),
                                     min(A.family.L1, B.family.L1))
        return max(L_cert, L_fit), max(th_cert, th_fit)

    def predicted(self, gamma: float | None = None) -> PredictedConstants:
        L, theta = self.sandwich
        A, B = self.A, self.B
        return predicted_constants(A.certificate.alpha, B.certificate.alpha, max(A.kappa, B.kappa),
                                   self.c_sup.sup, L, theta, mu_I=max(A.uniform.mu, B.uniform.mu),
                                   omega=A.uniform.omega, omega_t=B.uniform.omega, gamma=gamma)

    # -- integrals -------------------------------------------------------
    def tail_bound(self, i: int) -> float:
        """Bound on the part of ``R_1(t_i)`` beyond the truncation."""
        L, theta = self.sandwich
        a, at = self.A.certificate.alpha, self.B.certificate.alpha
        h = min(self.horizon, float(self.times[-1] - self.times[i]))
        return (self.A.kappa * self.B.kappa * L * math.exp(theta * self.times[i]) * self.c_sup.sup
                * math.exp(-(a + at) * h) / (a + at))

    @cached_property
    def R1(self) -> np.ndarray:
        """``-int_t^{t+H} X(t,tau) Q_A(tau) C(tau) P_B(tau) Y(tau,t) dtau`` at every node."""
        N, n, m = self.N, self.n, self.m
        t = self.times
        out = np.zeros((N + 1, n, m))
        QA, PB = self.A.Q, self.B.P
        if not np.any(QA) or not np.any(PB):
            return out
        H = self.horizon
        idx = np.arange(N + 1)
        last = np.array([int(np.searchsorted(t, t[i] + H + 1e-9 * max(1.0, H), side="right") - 1) for i in idx])
        last = np.minimum(last, N)
        length = last - idx
        # chains Xq = X(t_i, tau) Q_A(tau) (backward, stable) and Yp = P_B(tau) Y(tau, t_i) (forward, stable)
        Xq = QA.copy()
        Yp = PB.copy()
        samples = [np.matmul(np.matmul(Xq, self.C), Yp)]
        for k in range(1, int(np.max(length)) + 1):
            act = idx[length >= k]
            Xq = np.matmul(_right_solve(Xq[: act.size], self.X.steps[act + k - 1]), QA[act + k])
            Yp = np.matmul(PB[act + k], np.matmul(self.Y.steps[act + k - 1], Yp[: act.size]))
            F = np.zeros((N + 1, n, m))
            F[act] = np.matmul(np.matmul(Xq, self.C[act + k]), Yp)
            samples.append(F)
        S = np.stack(samples)  # (k, node, n, m)
        for i in idx:
            L_i = length[i]
            if L_i == 0:
                continue
            if self.full.grid.is_uniform and L_i < 2 * len(_GREGORY) and N >= _SHORT:
                out[i] = -_integral(self, i, i + L_i, i, i, QA, PB)
            else:
                out[i] = -_quad(t[i: i + L_i + 1], S[: L_i + 1, i])
        return out

    @cached_property
    def R2(self) -> np.ndarray:
        """``-int_0^t X(t,tau) P_A(tau) C(tau) Q_B(tau) Y(tau,t) dtau`` at every node."""
        N, n, m = self.N, self.n, self.m
        t = self.times
        out = np.zeros((N + 1, n, m))
        PA, QB = self.A.P, self.B.Q
        if not np.any(PA) or not np.any(QB):
            return out
        idx = np.arange(N + 1)
        # offsets k = i - node: Xp = X(t_i, tau) P_A(tau) (forward), Yq = Q_B(tau) Y(tau, t_i) (backward)
        Xp = PA.copy()
        Yq = QB.copy()
        samples = [np.matmul(np.matmul(Xp, self.C), Yq)]
        for k in range(1, N + 1):
            act = idx[idx >= k]
            src = act - k
            Xp = np.matmul(np.matmul(Xp[-act.size:], self.X.steps[src]), PA[src])
            Yq = np.matmul(QB[src], np.linalg.solve(self.Y.steps[src], Yq[-act.size:]))
            F = np.zeros((N + 1, n, m))
            F[act] = np.matmul(np.matmul(Xp, self.C[src]), Yq)
            samples.append(F)
        S = np.stack(samples)
        for i in idx[1:]:
            if self.full.grid.is_uniform and i < 2 * len(_GREGORY) and N >= _SHORT:
                out[i] = -_integral(self, 0, i, i, i, PA, QB)
            else:
                # samples[k][i] sits at node i - k; reverse to increasing time
                out[i] = -_quad(t[: i + 1], S[i::-1, i])
        return out

    @cached_property
    def R(self) -> np.ndarray:
        return self.R1 + self.R2

    @cached_property
    def projectors(self) -> np.ndarray:
        """Composed projectors ``[[P_A, R], [0, P_B]]`` at every node."""
        n, m = self.n, self.m
        P = np.zeros((self.N + 1, n + m, n + m))
        P[:, :n, :n] = self.A.P
        P[:, :n, n:] = self.R
        P[:, n:, n:] = self.B.P
        return P

    @cached_property
    def valid_grid(self) -> EvolutionGrid:
        """Composed grid truncated to the nodes where ``R`` is fully resolved."""
        return self.full.truncated(self.n_valid)

    @cached_property
    def valid_family(self) -> ProjectorFamily:
        P = self.projectors[: self.n_valid + 1]
        r = self.A.certificate.rank + self.B.certificate.rank
        return ProjectorFamily(P, r, _invariance(self.valid_grid, P), method="composed")


def _invariance(eg: EvolutionGrid, P: np.ndarray) -> float:
    """Max over pairs ``t >= s`` of ``||T(t,s)P(s) - P(t)T(t,s)|| / (||T(t,s)|| max ||P||)``."""
    N, n = eg.N, eg.n
    pmax = max(1.0, float(np.max(np.linalg.norm(P, 2, axis=(1, 2)))))
    worst = 0.0
    T = np.eye(n)[None].copy()
    for k in range(N):
        T = np.concatenate([np.matmul(eg.steps[k], T), np.eye(n)[None]], axis=0)
        # T[q] = T(t_{k+1}, t_q)
        D = np.matmul(T, P[: k + 2]) - np.matmul(P[k + 1], T)
        nt = np.linalg.norm(T, 2, axis=(1, 2))
        worst = max(worst, float(np.max(np.linalg.norm(D, 2, axis=(1, 2)) / (nt * pmax))))
    return worst


def _coupling_nodes(C_rows, times: np.ndarray, n: int, m: int) -> np.ndarray:
    fn = compile_exprs([e for row in C_rows for e in row])
    return np.array([fn(float(t)) for t in times], dtype=float).reshape(times.size, n, m)


def build_composition(s: SystemDef, grid: TimeGrid, tol: float = 1e-11, horizon: float | None = None,
                      gap_tol: float = 0.1) -> TriangularComposition:
    """Composition for a linear system with a block split (``[[A, C], [0, B]]``)."""
    if s.kind != "linear" or s.block_split is None:
        raise PreconditionError("a linear system with a block split is required")
    _, _, C_rows = s.blocks()
    p = s.block_split
    eg = build_grid(s, grid, tol)
    C = _coupling_nodes(C_rows, eg.times, p, s.n - p)
    return TriangularComposition(eg, p, C, horizon=horizon, gap_tol=gap_tol, name=s.name)


# ---------------------------------------------------------------------------
# Operations

def compute_W(tc: TriangularComposition, i: int, j: int) -> np.ndarray:
    """``W(t_i, t_j)`` by endpoint-corrected quadrature over the nodes between ``t_j`` and ``t_i``.

    For ``i < j`` the block inverse relation ``W(t_i,t_j) = -X(t_i,t_j) W(t_j,t_i) Y(t_i,t_j)`` is used.

    Raises
    ------
    QuadratureError
        If halving the node set changes the result beyond the tolerance.
    """
    if i < j:
        return -tc.X.transition(i, j) @ compute_W(tc, j, i) @ tc.Y.transition(i, j)
    return _integral(tc, j, i, i, j, check=True)


@dataclass(frozen=True)
class LinkingResult:
    """``R(0) = L P_B(0)`` (the linking operator on the range of ``P_B(0)``) and its tail bound."""

    matrix: np.ndarray
    tail_bound: float
    horizon: float

    def apply(self, eta) -> np.ndarray:
        return self.matrix @ np.asarray(eta, dtype=float)


def compute_linking(tc: TriangularComposition) -> LinkingResult:
    """Linking operator ``-int_0^inf Q_A(0) X(0,tau) C(tau) Y(tau,0) dtau`` on ``range P_B(0)``."""
    return LinkingResult(tc.R1[0].copy(), tc.tail_bound(0), tc.horizon)


@dataclass(frozen=True)
class RResult:
    R: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    tail_bound: float
    crosscheck: float


def compute_R(tc: TriangularComposition, i: int, check: bool = True) -> RResult:
    """``R(t_i) = R_1 + R_2`` with a cross-check against the propagation form

    ``X(t,0) R(0) Y(0,t) + int_0^t X(t,tau) [C P_B - P_A C](tau) Y(tau,t) dtau``.

    The cross-check (relative residual) is computed when requested; the
    propagation form inverts ``Y`` and is only well conditioned for
    moderate ``t_i``.
    """
    if not 0 <= i <= tc.n_valid:
        raise PreconditionError(f"node {i} outside the resolved range 0..{tc.n_valid}")
    R = tc.R[i]
    cross = math.nan
    if check:
        alt = _R_propagated(tc, i)
        cross = float(np.linalg.norm(alt - R, 2)) / max(1.0, float(np.linalg.norm(R, 2)))
    return RResult(R.copy(), tc.R1[i].copy(), tc.R2[i].copy(), tc.tail_bound(i), cross)


def _R_propagated(tc: TriangularComposition, i: int) -> np.ndarray:
    R0 = tc.R[0]
    X = tc.X.forward(i, 0)
    Yinv = tc.Y.transition(0, i)
    ks = np.arange(0, i + 1)
    PA, PB = tc.A.P, tc.B.P
    G = np.matmul(tc.C[ks], PB[ks]) - np.matmul(PA[ks], tc.C[ks])
    Xs = np.empty((ks.size, tc.n, tc.n))
    Xs[-1] = np.eye(tc.n)
    for q in range(ks.size - 2, -1, -1):
        Xs[q] = Xs[q + 1] @ tc.X.steps[ks[q]]
    Ys = np.empty((ks.size, tc.m, tc.m))
    Ys[-1] = np.eye(tc.m)
    for q in range(ks.size - 2, -1, -1):
        Ys[q] = np.linalg.solve(tc.Y.steps[ks[q]], Ys[q + 1])
    integral = _quad(tc.times[ks], np.matmul(np.matmul(Xs, G), Ys))
    return X @ R0 @ Yinv + integral


def compose_projector(tc: TriangularComposition, i: int) -> np.ndarray:
    """``[[P_A(t_i), R(t_i)], [0, P_B(t_i)]]``."""
    return tc.projectors[i].copy()


@dataclass(frozen=True)
class InvarianceReport:
    projector: float
    identity: float
    idempotency: float
    rank: int

    def to_dict(self) -> dict:
        return {"projector": self.projector, "identity": self.identity, "idempotency": self.idempotency,
                "rank": self.rank}


def verify_invariance(tc: TriangularComposition) -> InvarianceReport:
    """Relative invariance residual of the composed projector over all valid pairs ``t >= s``.

    Also checks the block identity ``R(t)Y(t,s) + P_A(t)W(t,s) = W(t,s)P_B(s) + X(t,s)R(s)``
    (the upper-right block of the invariance relation) separately.
    """
    eg = tc.valid_grid
    P = tc.projectors[: tc.n_valid + 1]
    n = tc.n
    N, d = eg.N, eg.n
    pmax = max(1.0, float(np.max(np.linalg.norm(P, 2, axis=(1, 2)))))
    worst = ident = 0.0
    T = np.eye(d)[None].copy()
    for k in range(N):
        T = np.concatenate([np.matmul(eg.steps[k], T), np.eye(d)[None]], axis=0)
        D = np.matmul(T, P[: k + 2]) - np.matmul(P[k + 1], T)
        nt = np.linalg.norm(T, 2, axis=(1, 2)) * pmax
        worst = max(worst, float(np.max(np.linalg.norm(D, 2, axis=(1, 2)) / nt)))
        blk = D[:, :n, n:]
        nb = np.linalg.norm(blk, 2, axis=(1, 2)) if min(blk.shape[1:]) > 1 else np.sqrt(np.sum(blk ** 2, axis=(1, 2)))
        ident = max(ident, float(np.max(nb / nt)))
    idem = float(np.max(np.linalg.norm(np.matmul(P, P) - P, 2, axis=(1, 2))))
    r = tc.A.certificate.rank + tc.B.certificate.rank
    return InvarianceReport(worst, ident, idem, r)


@dataclass(frozen=True)
class BoundRReport:
    residual: float
    worst_node: int
    bound_at_worst: float
    norm_at_worst: float

    @property
    def valid(self) -> bool:
        return self.residual <= 0.0

    def to_dict(self) -> dict:
        return {"residual": self.residual, "worst_node": self.worst_node, "bound": self.bound_at_worst,
                "norm": self.norm_at_worst, "valid": self.valid}


def verify_bound_R(tc: TriangularComposition, kappa_scale: float = 1.0) -> BoundRReport:
    """Max over valid nodes of ``||R(t)|| - 2 kappa kappa~ L e^{theta t} ||C|| / (alpha + alpha~)``.

    ``kappa_scale`` multiplies both ``kappa`` values (for falsification tests).
    """
    L, theta = tc.sandwich
    a, at = tc.A.certificate.alpha, tc.B.certificate.alpha
    kk = (kappa_scale * tc.A.kappa) * (kappa_scale * tc.B.kappa)
    t = tc.times[: tc.n_valid + 1]
    R = tc.R[: tc.n_valid + 1]
    nR = np.linalg.norm(R, 2, axis=(1, 2)) if min(tc.n, tc.m) > 1 else np.sqrt(np.sum(R ** 2, axis=(1, 2)))
    bound = 2.0 * kk / (a + at) * L * np.exp(theta * t) * tc.c_sup.sup
    diff = nR - bound
    k = int(np.argmax(diff))
    return BoundRReport(float(diff[k]), k, float(bound[k]), float(nR[k]))


@dataclass(frozen=True, eq=False)
class CompositionReport:
    """All residuals of the composed-dichotomy verification (nonpositive means the bound holds)."""

    predicted: PredictedConstants
    invariance: InvarianceReport
    offdiag_stable: float
    offdiag_unstable: float
    fitted: DichotomyCertificate
    fitted_rate_ok: bool
    rate_floor: float
    growth: GrowthCertificate
    w_growth: float
    bound_R: BoundRReport
    composed_certified: bool
    blocks_certified: tuple
    restriction_ok: bool
    blocks: tuple = field(repr=False)

    @property
    def passed(self) -> bool:
        return (self.offdiag_stable <= 0.0 and self.offdiag_unstable <= 0.0 and self.fitted_rate_ok
                and self.bound_R.valid and self.w_growth <= 0.0 and self.restriction_ok)

    def to_dict(self) -> dict:
        f = self.fitted
        return {
            "predicted": self.predicted.to_dict(),
            "invariance": self.invariance.to_dict(),
            "residuals": {"offdiag_stable": self.offdiag_stable, "offdiag_unstable": self.offdiag_unstable,
                          "W_growth": self.w_growth, "bound_R": self.bound_R.to_dict()},
            "fitted": {"K": f.K, "alpha": f.alpha, "eps": f.eps, "rank": f.rank, "feasible": f.feasible,
                       "rate_floor": self.rate_floor, "rate_ok": self.fitted_rate_ok},
            "growth": self.growth.to_dict(),
            "restriction": {"composed_certified": self.composed_certified,
                            "blocks_certified": list(self.blocks_certified), "ok": self.restriction_ok},
            "blocks": [b.to_dict() for b in self.blocks],
            "passed": self.passed,
        }


def verify_composed_dichotomy(tc: TriangularComposition, gamma: float | None = None,
                              slack: float = 0.05) -> CompositionReport:
    """Check the composed dichotomy against the predicted constants on the valid grid.

    The off-diagonal blocks ``W P_B + X R`` (``t >= s``) and ``Q_A W - R Y``
    (``t <= s``) are compared with ``K3 e^{-alpha3 |t-s| + eps3 s}``; a fresh
    certificate is fitted with the composed projector and its rate compared
    with ``alpha3 - slack``; half growth of the composed operator and the
    bound ``||W(t,s)|| <= M3 e^{omega3 (t-s) + theta s}`` are checked.
    """
    pc = tc.predicted(gamma)
    eg = tc.valid_grid
    pf = tc.valid_family
    blk = (slice(0, tc.n), slice(tc.n, tc.n + tc.m))
    logK3 = math.log(pc.K3)
    r = pf.rank
    d1 = d2 = -math.inf
    if r > 0:
        ps = forward_pairs(eg, pf.P, block=blk)
        if ps.size:
            d1 = float(np.max(ps.f - (logK3 - pc.alpha3 * ps.d + pc.eps3 * ps.s)))
    if r < eg.n:
        ps = backward_pairs(eg, pf.Q, block=blk)
        if ps.size:
            d2 = float(np.max(ps.f - (logK3 - pc.alpha3 * ps.d + pc.eps3 * ps.s)))
    fitted = fit_dichotomy(eg, pf)
    floor = pc.alpha3 - slack
    gc = fit_growth(eg, "half")
    wp = forward_pairs(eg, None, block=blk)
    wg = float(np.max(wp.f - (math.log(pc.M3) + pc.omega3 * wp.d + pc.theta * wp.s))) if wp.size else -math.inf
    pc = PredictedConstants(**{**pc.to_dict(), "K_bar": fitted.K, "M_bar": gc.M, "omega_bar": gc.nu,
                               "theta_bar": gc.delta})
    ok_full, _, _, _ = DichotomyAnalyzer(eg).verdict(0.0)
    blocks_ok = (tc.A.certified, tc.B.certified)
    return CompositionReport(pc, verify_invariance(tc), d1, d2, fitted,
                             bool(fitted.feasible and fitted.alpha >= floor), floor, gc, wg, verify_bound_R(tc),
                             bool(ok_full), blocks_ok, (not ok_full) or all(blocks_ok), (tc.A, tc.B))


# ---------------------------------------------------------------------------
# Identities

def check_coupling_bound(tc: TriangularComposition, triples) -> float:
    """Largest log-residual of the four-projector estimate over sampled ``(t, tau, s)`` node triples.

    ``||X(t,tau) Z C(tau) V Y(tau,s)|| <= L e^{theta s} ||C||_{tau,inf} ||X(t,tau) Z||_{tau,t} ||V Y(tau,s)||_{s,tau}``
    for ``Z`` in ``{P_A, Q_A}`` and ``V`` in ``{P_B, Q_B}`` at ``tau``.
    """
    L, theta = tc.sandwich
    csup = tc.c_sup.sup
    fa, fb = tc.A.family, tc.B.family
    worst = -math.inf
    for i, k, j in triples:
        X = tc.X.transition(i, k)
        Y = tc.Y.transition(k, j)
        for Z in (tc.A.P[k], tc.A.Q[k]):
            for V in (tc.B.P[k], tc.B.Q[k]):
                lhs = float(np.linalg.norm(X @ Z @ tc.C[k] @ V @ Y, 2))
                if lhs == 0.0:
                    continue
                rhs = (L * math.exp(theta * tc.times[j]) * csup * op_norm(fa, X @ Z, k, i)
                       * op_norm(fb, V @ Y, j, k))
                worst = max(worst, math.log(lhs) - math.log(rhs) if rhs > 0 else math.inf)
    return worst


def w_split_identity(tc: TriangularComposition, i: int, j: int) -> float:
    """Relative residual of the three-integral split of ``W(t,s)P_B(s) + X(t,s)R(s)`` (``t_i >= t_j``).

    ``D1 - D2 - D3`` with ``D1 = int_s^t X P_A C P_B Y``, ``D2 = int_t^{t+H} X Q_A C P_B Y`` and
    ``D3 = int_0^s X P_A C Q_B Y`` (integrand ``X(t,tau) . Y(tau,s)``).
    """
    if not (0 <= j <= i <= tc.n_valid):
        raise PreconditionError("need 0 <= j <= i <= n_valid")
    direct = compute_W(tc, i, j) @ tc.B.P[j] + tc.X.forward(i, j) @ tc.R[j]
    PA, QA, PB, QB, C = tc.A.P, tc.A.Q, tc.B.P, tc.B.Q, tc.C
    # D1: X(t_i, tau_k) forward part, Y(tau_k, t_j) forward
    D1 = (compute_W_projected(tc, i, j, PA, PB) if i > j else np.zeros((tc.n, tc.m)))
    # D2 = X(t_i,t_i)... = R1-like integral started at t_i, times Y(t_i, t_j) on the right
    D2 = -tc.R1[i] @ tc.Y.forward(i, j)
    # D3 = X(t_i, t_j) R2(t_j) with sign: -D3 = X(t_i,t_j) R2(t_j)
    D3 = -tc.X.forward(i, j) @ tc.R2[j]
    split = D1 - D2 - D3
    return float(np.linalg.norm(split - direct, 2)) / max(1.0, float(np.linalg.norm(direct, 2)))


def compute_W_projected(tc: TriangularComposition, i: int, j: int, Z: np.ndarray, V: np.ndarray) -> np.ndarray:
    """``int_{t_j}^{t_i} X(t_i,tau) Z(tau) C(tau) V(tau) Y(tau,t_j) dtau``."""
    return _integral(tc, j, i, i, j, Z, V)


def _integral(tc: TriangularComposition, lo: int, hi: int, ix: int, jy: int, Z=None, V=None,
              check: bool = False) -> np.ndarray:
    """``int_{t_lo}^{t_hi} X(t_ix,tau) Z C V Y(tau,t_jy) dtau`` (``Z``, ``V`` default to identities).

    Intervals with fewer than ``2 * 5`` steps on a uniform grid use an
    interpolatory rule of degree 6 whose stencil may extend past the interval.
    """
    if hi <= lo:
        return np.zeros((tc.n, tc.m))
    t = tc.times
    uniform = tc.full.grid.is_uniform
    short = uniform and hi - lo < 2 * len(_GREGORY) and tc.N >= _SHORT
    ks = _stencil(lo, hi, tc.N) if short else np.arange(lo, hi + 1)
    Xs = _x_chain(tc, ix, ks)
    Ys = _y_chain(tc, jy, ks)
    M = tc.C[ks]
    if Z is not None:
        M = np.matmul(Z[ks], M)
    if V is not None:
        M = np.matmul(M, V[ks])
    F = np.matmul(np.matmul(Xs, M), Ys)
    if short:
        h = float(t[1] - t[0])
        w = interpolatory_weights(ks - ks[0], lo - ks[0], hi - ks[0]) * h
        return np.tensordot(w, F, axes=(0, 0))
    if check:
        return _quad_checked(t[ks], F, tc.quad_rtol)[0]
    return _quad(t[ks], F)


def _x_chain(tc: TriangularComposition, i: int, ks: np.ndarray) -> np.ndarray:
    """``X(t_i, t_k)`` for consecutive nodes ``ks``."""
    out = np.empty((ks.size, tc.n, tc.n))
    a = int(np.clip(i, ks[0], ks[-1]))
    base = tc.X.transition(i, a)
    q0 = a - ks[0]
    out[q0] = base
    for q in range(q0 - 1, -1, -1):
        out[q] = out[q + 1] @ tc.X.steps[ks[q]]
    for q in range(q0 + 1, ks.size):
        out[q] = np.linalg.solve(tc.X.steps[ks[q] - 1].T, out[q - 1].T).T
    return out


def _y_chain(tc: TriangularComposition, j: int, ks: np.ndarray) -> np.ndarray:
    """``Y(t_k, t_j)`` for consecutive nodes ``ks``."""
    out = np.empty((ks.size, tc.m, tc.m))
    a = int(np.clip(j, ks[0], ks[-1]))
    base = tc.Y.transition(a, j)
    q0 = a - ks[0]
    out[q0] = base
    for q in range(q0 + 1, ks.size):
        out[q] = tc.Y.steps[ks[q] - 1] @ out[q - 1]
    for q in range(q0 - 1, -1, -1):
        out[q] = np.linalg.solve(tc.Y.steps[ks[q]], out[q + 1])
    return out


# ---------------------------------------------------------------------------
# Diagonal significance

@dataclass(frozen=True, eq=False)
class SignificanceReport:
    full: SpectrumResult
    parts: tuple
    union: tuple
    distance: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.distance <= self.threshold

    def to_dict(self) -> dict:
        return {"full": self.full.to_dict(), "parts": [p.to_dict() for p in self.parts],
                "union": [list(iv) for iv in self.union], "distance": self.distance,
                "threshold": self.threshold, "passed": self.passed}


def _union(intervals) -> tuple:
    ivs = sorted(intervals)
    out: list[list[float]] = []
    for a, b in ivs:
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return tuple((a, b) for a, b in out)


def diagonal_significance(s: SystemDef, grid: TimeGrid, tol: float = 1e-3, integ_tol: float = 1e-11,
                          blocks: list[SystemDef] | None = None) -> SignificanceReport:
    """Spectrum of a triangular system against the union of its diagonal spectra.

    The diagonal parts are the blocks of ``block_split`` when present, the
    diagonal scalars when the triangular flag is set, or ``blocks`` when
    given explicitly. Passes when the Hausdorff distance is at most ``2 tol``.
    """
    if blocks is None:
        if s.block_split is not None:
            A, B, _ = s.blocks()
            blocks = [A, B]
        elif s.triangular:
            blocks = s.diagonal_scalars()
        else:
            raise PreconditionError("system is neither block split nor triangular")
    full = compute_spectrum(build_grid(s, grid, integ_tol), tol=tol)
    parts = tuple(compute_spectrum(build_grid(b, grid, integ_tol), tol=tol) for b in blocks)
    union = _union([(iv.a, iv.b) for p in parts for iv in p.intervals])
    dist = interval_hausdorff([(iv.a, iv.b) for iv in full.intervals], list(union))
    return SignificanceReport(full, parts, union, dist, 2.0 * tol)
