"""Dichotomy spectrum by shift scanning and bisection.

A shift ``lam`` belongs to the resolvent when the grid of ``x' = (A - lam I) x``
carries a certified dichotomy; the spectrum is the complement inside the scan
range, reported as closed intervals separated by gaps of constant projector rank.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dichotomy import DichotomyAnalyzer, DichotomyCertificate, classifier_params, fit_growth
from .evolution import EvolutionGrid

__all__ = [
    "Interval", "Gap", "SpectrumResult", "DichotomyTest", "shifted_grid", "dichotomy_test",
    "compute_spectrum", "check_rank_monotonicity", "scan_range", "hausdorff",
]


@dataclass(frozen=True)
class Interval:
    a: float
    b: float
    left_unbounded: bool = False
    right_unbounded: bool = False

    def to_dict(self) -> dict:
        return {"a": None if self.left_unbounded else self.a, "b": None if self.right_unbounded else self.b,
                "left_unbounded": self.left_unbounded, "right_unbounded": self.right_unbounded}


@dataclass(frozen=True)
class Gap:
    lo: float
    hi: float
    rank: int

    def to_dict(self) -> dict:
        return {"lo": None if math.isinf(self.lo) else self.lo, "hi": None if math.isinf(self.hi) else self.hi,
                "rank": self.rank}


@dataclass(frozen=True)
class SpectrumResult:
    """Spectral intervals in increasing order and the gaps around them."""

    intervals: tuple
    gaps: tuple
    tol: float
    scan: tuple
    n: int
    growth: dict = field(default_factory=dict)
    warnings: tuple = ()
    evaluations: int = 0

    @property
    def ranks(self) -> list[int]:
        return [g.rank for g in self.gaps]

    @property
    def rightmost(self) -> float:
        if not self.intervals:
            return -math.inf
        last = self.intervals[-1]
        return math.inf if last.right_unbounded else last.b

    def points(self) -> np.ndarray:
        """Interval endpoints, for Hausdorff comparisons."""
        return np.array([x for iv in self.intervals for x in (iv.a, iv.b)])

    def to_dict(self) -> dict:
        return {"intervals": [iv.to_dict() for iv in self.intervals], "gaps": [g.to_dict() for g in self.gaps],
                "tol": self.tol, "scan": {"lo": self.scan[0], "hi": self.scan[1]}, "n": self.n,
                "growth": self.growth, "warnings": list(self.warnings)}


@dataclass(frozen=True)
class DichotomyTest:
    in_resolvent: bool
    certificate: DichotomyCertificate | None
    reason: str
    rank: int


def shifted_grid(eg: EvolutionGrid, lam: float) -> EvolutionGrid:
    """Grid of the shifted system; steps are scaled by ``exp(-lam dt)``, nothing is re-integrated."""
    return eg.shifted(lam)


def dichotomy_test(eg: EvolutionGrid, lam: float, *, tol: float = 1e-3,
                   analyzer: DichotomyAnalyzer | None = None) -> DichotomyTest:
    """Classify ``lam`` as resolvent (dichotomy certified) or spectral.

    ``tol`` sets the resolution: rates closer than ``tol / 2`` to the shift,
    and decay rates below ``min(1e-3, tol / 2)``, count as failure.
    """
    an = analyzer or DichotomyAnalyzer(eg)
    ok, cert, reason, rank = an.verdict(lam, **classifier_params(tol))
    return DichotomyTest(ok, cert, reason, rank)


def scan_range(eg: EvolutionGrid) -> tuple[float, float, dict]:
    """Scan interval from forward and backward growth fits.

    A half growth bound with rate ``nu`` and nonuniform exponent ``delta``
    makes every shift above ``nu + delta`` a contraction; the backward bound
    makes every shift below ``-(nu_b + delta_b)`` an expansion. One unit of
    slack is added on each side.
    """
    fw = fit_growth(eg, "half")
    bw = fit_growth(eg, "backward")
    hi = fw.nu + fw.delta + 1.0
    lo = -(bw.nu + bw.delta) - 1.0
    return lo, hi, {"half": fw.to_dict(), "backward": bw.to_dict()}


def compute_spectrum(eg: EvolutionGrid, lam_lo: float | None = None, lam_hi: float | None = None,
                     coarse_step: float | None = None, tol: float = 1e-3,
                     analyzer: DichotomyAnalyzer | None = None) -> SpectrumResult:
    """Spectral intervals of the grid within ``[lam_lo, lam_hi]``.

    Parameters
    ----------
    eg : EvolutionGrid
    lam_lo, lam_hi : float, optional
        Scan range; defaults come from :func:`scan_range`.
    coarse_step : float, optional
        Defaults to a 64th of the range.
    tol : float
        Bisection tolerance for interval endpoints.
    """
    an = analyzer or DichotomyAnalyzer(eg)
    lo, hi, growth = scan_range(eg)
    lo = lo if lam_lo is None else float(lam_lo)
    hi = hi if lam_hi is None else float(lam_hi)
    if not hi > lo:
        raise ValueError(f"empty scan range [{lo}, {hi}]")
    step = (hi - lo) / 64.0 if coarse_step is None else float(coarse_step)
    params = classifier_params(tol)
    cache: dict[float, tuple[bool, int]] = {}
    warnings: list[str] = []

    def classify(lam: float) -> tuple[bool, int]:
        if lam not in cache:
            ok, _, _, r = an.verdict(lam, tie_break=False, **params)
            cache[lam] = (ok, r)
        return cache[lam]

    m = max(2, int(math.ceil((hi - lo) / step - 1e-9)))
    lams = np.linspace(lo, hi, m + 1)
    marks = [classify(float(x)) for x in lams]

    def boundary(res: float, spec: float) -> float:
        """Bisect between a resolvent point and a spectral point; returns a point within tol/4 of the switch."""
        while abs(spec - res) > tol / 4.0:
            mid = 0.5 * (res + spec)
            if classify(mid)[0]:
                res = mid
            else:
                spec = mid
        return spec

    intervals: list[list[float]] = []

    def hidden(x0: float, x1: float, depth: int = 0) -> None:
        """Resolvent endpoints with different ranks: locate the spectrum between them."""
        (_, r0), (_, r1) = classify(x0), classify(x1)
        if r0 == r1:
            return
        if x1 - x0 <= tol / 4.0 or depth > 60:
            mid = 0.5 * (x0 + x1)
            intervals.append([mid, mid])
            return
        mid = 0.5 * (x0 + x1)
        ok, rm = classify(mid)
        if ok:
            hidden(x0, mid, depth + 1)
            hidden(mid, x1, depth + 1)
            return
        a = boundary(x0, mid)
        b = boundary(x1, mid)
        intervals.append([a, b])
        # further spectrum could hide between x0 and a only if ranks disagree there; the
        # rank at x0 and just left of a are equal by construction of the bisection
        return

    i = 0
    while i <= m:
        ok, r = marks[i]
        if ok:
            if i < m and marks[i + 1][0]:
                hidden(float(lams[i]), float(lams[i + 1]))
            i += 1
            continue
        j = i
        while j + 1 <= m and not marks[j + 1][0]:
            j += 1
        a = float(lams[i]) if i == 0 else boundary(float(lams[i - 1]), float(lams[i]))
        b = float(lams[j]) if j == m else boundary(float(lams[j + 1]), float(lams[j]))
        intervals.append([a, b])
        i = j + 1

    intervals.sort()
    merged: list[list[float]] = []
    for a, b in intervals:
        if merged and a <= merged[-1][1] + tol / 2.0:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])

    n = eg.n
    ivs = []
    for k, (a, b) in enumerate(merged):
        left = k == 0 and not marks[0][0]
        right = k == len(merged) - 1 and not marks[-1][0]
        ivs.append(Interval(-math.inf if left else a, math.inf if right else b, left, right))
        if left:
            warnings.append("spectral at the lower scan end: first interval reported left-unbounded")
        if right:
            warnings.append("spectral at the upper scan end: growth bound not respected")

    spans = []
    prev = -math.inf
    for iv in ivs:
        if not iv.left_unbounded:
            spans.append((prev, iv.a))
        prev = iv.b
    if not (ivs and ivs[-1].right_unbounded):
        spans.append((prev, math.inf))
    gaps = []
    for glo, ghi in spans:
        inside = sorted(x for x, (o, _) in cache.items() if o and glo < x < ghi)
        if not inside:
            probe = _gap_probe(glo, ghi, lo, hi)
            if probe is not None and classify(probe)[0]:
                inside = [probe]
        if not inside:
            warnings.append(f"no resolvent point certified in gap ({glo}, {ghi})")
            continue
        gaps.append(Gap(glo, ghi, classify(inside[0])[1]))
    if m > 0 and len(ivs) > n:
        warnings.append(f"{len(ivs)} intervals exceed the dimension {n}")
    delta = growth.get("half", {}).get("delta", 0.0)
    if delta > 1.0:
        warnings.append(f"large nonuniform growth exponent {delta:.3g}: interval structure may be unreliable")
    return SpectrumResult(tuple(ivs), tuple(gaps), tol, (lo, hi), n, growth, tuple(warnings), len(cache))


def _gap_probe(glo: float, ghi: float, lo: float, hi: float) -> float | None:
    if math.isinf(glo) and math.isinf(ghi):
        return 0.5 * (lo + hi)
    if math.isinf(glo):
        return lo if lo < ghi else None
    if math.isinf(ghi):
        return hi if hi > glo else None
    return 0.5 * (glo + ghi)


def check_rank_monotonicity(sr: SpectrumResult) -> bool:
    """Ranks strictly increase across gaps and the rightmost gap has full rank."""
    ranks = sr.ranks
    if not ranks:
        return False
    if any(b <= a for a, b in zip(ranks, ranks[1:])):
        return False
    if not sr.intervals or not sr.intervals[-1].right_unbounded:
        if ranks[-1] != sr.n:
            return False
    return True


def hausdorff(A, B) -> float:
    """Hausdorff distance between two finite point sets on the line."""
    A = np.asarray(list(A), dtype=float)
    B = np.asarray(list(B), dtype=float)
    if A.size == 0 and B.size == 0:
        return 0.0
    if A.size == 0 or B.size == 0:
        return math.inf
    D = np.abs(A[:, None] - B[None, :])
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


def interval_hausdorff(X: SpectrumResult | list, Y: SpectrumResult | list) -> float:
    """Hausdorff distance between two finite unions of bounded closed intervals."""
    def ivs(Z):
        if isinstance(Z, SpectrumResult):
            return [(iv.a, iv.b) for iv in Z.intervals]
        return [(float(a), float(b)) for a, b in Z]

    U, V = ivs(X), ivs(Y)
    if not U and not V:
        return 0.0
    if not U or not V:
        return math.inf

    def dist(x: float, S) -> float:
        return min(0.0 if a <= x <= b else min(abs(x - a), abs(x - b)) for a, b in S)

    def one_sided(S, T) -> float:
        # sup over S of distance to T is attained at endpoints of S or at midpoints of T's gaps inside S
        cands = [x for a, b in S for x in (a, b)]
        ends = sorted(x for a, b in T for x in (a, b))
        for a, b in S:
            for k in range(1, len(ends) - 1, 2):
                mid = 0.5 * (ends[k] + ends[k + 1])
                if a <= mid <= b:
                    cands.append(mid)
        return max(dist(x, T) for x in cands)

    return max(one_sided(U, V), one_sided(V, U))
