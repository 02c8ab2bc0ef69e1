"""Evolution operators of linear systems ``x' = A(t) x`` on a time grid.

The operator ``T(t, s)`` is stored as per-step increments
``S_i = T(t_{i+1}, t_i)``; any ``T(t_i, t_j)`` is a product of increments
(forward) or a linear solve against such a product (backward).
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Union

import numpy as np
import scipy.linalg as sla

from .errors import (ChecksumError, GridFormatError, IntegrationError, PreconditionError,
                     SingularTransitionError, VersionError)
from .sysdef import SystemDef

__all__ = [
    "TimeGrid", "EvolutionGrid", "integrate_transition", "build_grid", "default_step",
    "transition", "save_grid", "load_grid", "GRID_MAGIC", "GRID_VERSION",
]

CoeffLike = Union[SystemDef, Callable[[float], np.ndarray]]

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

SINGULAR_COND = 1e13


def _coeff_fn(A: CoeffLike) -> tuple[Callable[[float], np.ndarray], bool]:
    """Return ``(t -> A(t) as float array, is_autonomous)``."""
    if isinstance(A, SystemDef):
        f = A.matrix_function()
        return f, A.is_autonomous
    return (lambda t: np.atleast_2d(np.asarray(A(t), dtype=float))), False


def _checked(f: Callable[[float], np.ndarray], t: float) -> np.ndarray:
    M = f(t)
    if not np.all(np.isfinite(M)):
        raise IntegrationError("non-finite coefficient evaluation", t)
    return M


def _dp_step(f, t: float, h: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """One Dormand-Prince step of ``Y' = A(t) Y`` from ``Y = I``.

    Returns the fifth-order propagator and the embedded error matrix.
    """
    eye = np.eye(n)
    K = []
    for i in range(7):
        Y = eye.copy()
        for a, k in zip(_A[i], K):
            if a != 0.0:
                Y += (h * a) * k
        K.append(_checked(f, t + _C[i] * h) @ Y)
    Phi = eye + h * sum(b * k for b, k in zip(_B5, K) if b != 0.0)
    Err = h * sum(e * k for e, k in zip(_E, K) if e != 0.0)
    return Phi, Err


def _integrate(f, n: int, a: float, b: float, tol: float, h0: float | None = None) -> tuple[np.ndarray, int]:
    """Adaptive propagation from ``a`` to ``b``; returns ``(T(b, a), accepted steps)``."""
    T = np.eye(n)
    if b == a:
        return T, 0
    span = b - a
    t = a
    if h0 is None:
        scale = max(1e-12, float(np.linalg.norm(_checked(f, a), 2)))
        h0 = min(span, 0.5 / scale, 0.5)
    h = min(h0, span)
    steps = 0
    while t < b:
        h = min(h, b - t)
        if h <= 1e-14 * max(1.0, abs(t)):
            raise IntegrationError("step size underflow", t)
        Phi, Err = _dp_step(f, t, h, n)
        if not (np.all(np.isfinite(Phi)) and np.all(np.isfinite(Err))):
            h *= 0.25
            continue
        err = float(np.max(np.abs(Err))) / (tol * (1.0 + float(np.max(np.abs(Phi)))))
        if err <= 1.0:
            T = Phi @ T
            t = b if b - t - h <= 1e-15 * max(1.0, abs(b)) else t + h
            steps += 1
        fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        h *= fac
    return T, steps


def _scalar_fn(A: CoeffLike) -> Callable[[float], float]:
    if isinstance(A, SystemDef):
        raw = A._coeff_fn
        return lambda t: raw(t, None)[0]
    return lambda t: float(np.asarray(A(t), dtype=float).reshape(-1)[0])


def _integrate_scalar(f, a: float, b: float, tol: float) -> float:
    """Float-only version of :func:`_integrate` for ``n = 1``."""
    if b == a:
        return 1.0
    C, B5, E = _C.tolist(), _B5.tolist(), _E.tolist()
    t, T = a, 1.0
    h = min(b - a, 0.5 / max(1e-12, abs(f(a))), 0.5)
    while t < b:
        h = min(h, b - t)
        if h <= 1e-14 * max(1.0, abs(t)):
            raise IntegrationError("step size underflow", t)
        K = []
        for i in range(7):
            y = 1.0
            for c, k in zip(_A[i], K):
                y += h * c * k
            v = f(t + C[i] * h)
            if not math.isfinite(v):
                raise IntegrationError("non-finite coefficient evaluation", t + C[i] * h)
            K.append(v * y)
        phi = 1.0 + h * sum(c * k for c, k in zip(B5, K))
        err_abs = abs(h * sum(c * k for c, k in zip(E, K)))
        if not (math.isfinite(phi) and math.isfinite(err_abs)):
            h *= 0.25
            continue
        err = err_abs / (tol * (1.0 + abs(phi)))
        if err <= 1.0:
            T *= phi
            t = b if b - t - h <= 1e-15 * max(1.0, abs(b)) else t + h
        h *= 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
    return T


def integrate_transition(s: CoeffLike, a: float, b: float, tol: float = 1e-11) -> np.ndarray:
    """Evolution operator ``T(b, a)`` of ``x' = A(t) x``.

    Parameters
    ----------
    s : SystemDef or callable
        Linear system, or any function returning ``A(t)``.
    a, b : float
        Start and end time, ``0 <= a <= b``.
    tol : float
        Relative local tolerance in ``(1e-13, 1e-2)``. Each accepted step
        satisfies ``|error| <= tol * (1 + |step propagator|)``.

    Raises
    ------
    IntegrationError
        On step-size underflow or non-finite coefficients.
    """
    _check_tol(tol)
    if not (0.0 <= a <= b):
        raise PreconditionError(f"need 0 <= a <= b, got a={a}, b={b}")
    f, _ = _coeff_fn(s)
    n = _checked(f, a).shape[0]
    if n == 1:
        return np.array([[_integrate_scalar(_scalar_fn(s), float(a), float(b), tol)]])
    return _integrate(f, n, float(a), float(b), tol)[0]


def _check_tol(tol: float) -> None:
    if not (1e-13 < tol < 1e-2):
        raise PreconditionError(f"tolerance must lie in (1e-13, 1e-2), got {tol}")


# ---------------------------------------------------------------------------
# Grids

@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing node times on the half line ``[0, inf)``."""

    times: np.ndarray

    def __post_init__(self) -> None:
        t = np.ascontiguousarray(np.asarray(self.times, dtype=float))
        if t.ndim != 1 or t.size < 2:
            raise PreconditionError("a time grid needs at least two nodes (one step)")
        if not np.all(np.isfinite(t)):
            raise PreconditionError("grid times must be finite")
        if t[0] < 0.0:
            raise PreconditionError(f"grid must start at t0 >= 0, got {t[0]}")
        if np.any(np.diff(t) <= 0.0):
            raise PreconditionError("grid times must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @property
    def is_uniform(self) -> bool:
        h = np.diff(self.times)
        return bool(h.size) and float(np.ptp(h)) <= 1e-9 * float(np.max(h))

    @classmethod
    def uniform(cls, t0: float, t_end: float, h: float) -> "TimeGrid":
        """Uniform grid with step as close to ``h`` as divides ``[t0, t_end]`` evenly."""
        if not h > 0.0:
            raise PreconditionError(f"step must be positive, got {h}")
        span = t_end - t0
        if not span > 0.0:
            raise PreconditionError(f"empty grid: t_end={t_end} <= t0={t0}")
        N = max(1, int(round(span / h)))
        if abs(N * h - span) > 1e-9 * span:
            N = max(1, math.ceil(span / h - 1e-9))
        return cls(t0 + span * np.arange(N + 1) / N)

    @property
    def N(self) -> int:
        return self.times.size - 1

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def index_of(self, t: float, atol: float = 1e-9) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > atol * max(1.0, abs(t)):
            raise PreconditionError(f"time {t} is not a grid node")
        return i

    def __len__(self) -> int:
        return self.times.size

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TimeGrid) and np.array_equal(self.times, other.times)

    def __hash__(self) -> int:
        return hash(self.times.tobytes())


def default_step(s: CoeffLike, t0: float, t_end: float, samples: int = 257, cap: float = 0.1) -> float:
    """Step ``h`` with ``max ||A(t)|| * h <= 0.2`` over ``samples`` sample times, at most ``cap``."""
    f, _ = _coeff_fn(s)
    ts = np.linspace(t0, t_end, samples)
    norm = max(float(np.linalg.norm(_checked(f, float(t)), 2)) for t in ts)
    return cap if norm == 0.0 else min(cap, 0.2 / norm)


@dataclass(frozen=True, eq=False)
class EvolutionGrid:
    """Per-step transition matrices on a :class:`TimeGrid`.

    Attributes
    ----------
    grid : TimeGrid
    steps : ndarray, shape (N, n, n)
        ``steps[i] = T(t_{i+1}, t_i)``.
    tol : float
        Integration tolerance used to produce the steps.
    cond : ndarray, shape (N,)
        2-norm condition number of each step.
    """

    grid: TimeGrid
    steps: np.ndarray
    tol: float = 0.0
    name: str = ""
    cond: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        S = np.ascontiguousarray(np.asarray(self.steps, dtype=float))
        if S.ndim != 3 or S.shape[1] != S.shape[2]:
            raise PreconditionError("steps must have shape (N, n, n)")
        if S.shape[0] != self.grid.N:
            raise PreconditionError(f"{S.shape[0]} steps for a grid with {self.grid.N} intervals")
        if not np.all(np.isfinite(S)):
            raise PreconditionError("step matrices must be finite")
        S.setflags(write=False)
        object.__setattr__(self, "steps", S)
        if self.cond is None:
            c = np.linalg.cond(S) if S.shape[1] > 1 else np.ones(S.shape[0])
            c = np.where(np.isfinite(c), c, np.inf)
            c.setflags(write=False)
            object.__setattr__(self, "cond", c)

    # -- shape --------------------------------------------------------
    @property
    def n(self) -> int:
        return self.steps.shape[1]

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def max_step_cond(self) -> float:
        return float(np.max(self.cond))

    @classmethod
    def from_steps(cls, times, steps, tol: float = 0.0, name: str = "") -> "EvolutionGrid":
        """Wrap given increments; scalar increments may be passed as a 1-D array."""
        S = np.asarray(steps, dtype=float)
        if S.ndim == 1:
            S = S[:, None, None]
        return cls(TimeGrid(np.asarray(times, dtype=float)), S, tol, name)

    # -- access -------------------------------------------------------
    def _check_index(self, i: int) -> int:
        if not (0 <= i <= self.N):
            raise IndexError(f"node index {i} outside 0..{self.N}")
        return int(i)

    def forward(self, i: int, j: int) -> np.ndarray:
        """``T(t_i, t_j)`` for ``i >= j`` as the ordered product ``S_{i-1} ... S_j``."""
        i, j = self._check_index(i), self._check_index(j)
        if i < j:
            raise PreconditionError("forward() needs i >= j")
        T = np.eye(self.n)
        for k in range(j, i):
            T = self.steps[k] @ T
        return T

    def transition(self, i: int, j: int) -> np.ndarray:
        """``T(t_i, t_j)`` for any node pair.

        Raises
        ------
        SingularTransitionError
            If ``i < j`` and the forward product is numerically singular.
        """
        if i >= j:
            return self.forward(i, j)
        F = self.forward(j, i)
        c = float(np.linalg.cond(F))
        if not np.isfinite(c) or c > SINGULAR_COND:
            raise SingularTransitionError(f"reverse transition T({j}->{i})", c)
        return sla.lu_solve(sla.lu_factor(F, check_finite=False), np.eye(self.n), check_finite=False)

    def forward_chain(self, j: int) -> np.ndarray:
        """Stack ``T(t_i, t_j)`` for ``i = j..N``; shape ``(N - j + 1, n, n)``."""
        j = self._check_index(j)
        out = np.empty((self.N - j + 1, self.n, self.n))
        out[0] = np.eye(self.n)
        for k in range(j, self.N):
            out[k - j + 1] = self.steps[k] @ out[k - j]
        return out

    def fundamental(self, anchor: int = 0) -> np.ndarray:
        """``T(t_i, t_anchor)`` for every node ``i`` (reverse entries via solves)."""
        out = np.empty((self.N + 1, self.n, self.n))
        out[anchor:] = self.forward_chain(anchor)
        T = np.eye(self.n)
        for k in range(anchor - 1, -1, -1):
            # T(t_k, t_a) = S_k^{-1} T(t_{k+1}, t_a)
            T = np.linalg.solve(self.steps[k], T)
            out[k] = T
        return out

    def cocycle_residual(self, i: int, j: int, k: int) -> float:
        """Relative residual of ``T(i,j) T(j,k) = T(i,k)`` in the spectral norm."""
        a, b, c = self.transition(i, j), self.transition(j, k), self.transition(i, k)
        scale = max(1.0, float(np.linalg.norm(a, 2) * np.linalg.norm(b, 2)))
        return float(np.linalg.norm(a @ b - c, 2)) / scale

    # -- derived grids -------------------------------------------------
    def shifted(self, lam: float) -> "EvolutionGrid":
        """Grid of ``x' = (A(t) - lam I) x``: each step scaled by ``exp(-lam dt)``."""
        if lam == 0.0:
            return self
        fac = np.exp(-lam * self.grid.dt)
        return EvolutionGrid(self.grid, self.steps * fac[:, None, None], self.tol, self.name, self.cond)

    def truncated(self, N: int) -> "EvolutionGrid":
        """Grid restricted to the first ``N`` steps."""
        if not 1 <= N <= self.N:
            raise PreconditionError(f"cannot truncate to {N} steps")
        return EvolutionGrid(TimeGrid(self.times[: N + 1]), self.steps[:N], self.tol, self.name, self.cond[:N])

    def coarsened(self, k: int) -> "EvolutionGrid":
        """Grid keeping every ``k``-th node (``N`` must be divisible by ``k``)."""
        if k < 1 or self.N % k:
            raise PreconditionError(f"N={self.N} not divisible by {k}")
        if k == 1:
            return self
        S = np.stack([self.forward((q + 1) * k, q * k) for q in range(self.N // k)])
        return EvolutionGrid(TimeGrid(self.times[::k]), S, self.tol, self.name)

    def block(self, rows: slice, cols: slice) -> np.ndarray:
        """Sub-blocks of all steps (no cocycle meaning unless the system is block triangular)."""
        return self.steps[:, rows, cols]


def build_grid(s: CoeffLike, g: TimeGrid, tol: float = 1e-11, workers: int = 1) -> EvolutionGrid:
    """Integrate every step ``S_i = T(t_{i+1}, t_i)`` of ``g``.

    For autonomous systems equal step lengths share one integration.
    ``workers`` is accepted for interface stability; steps run sequentially.
    """
    _check_tol(tol)
    if not isinstance(g, TimeGrid):
        raise PreconditionError("build_grid needs a TimeGrid")
    f, autonomous = _coeff_fn(s)
    n = _checked(f, g.t0).shape[0]
    times = g.times
    steps = np.empty((g.N, n, n))
    memo: dict[float, np.ndarray] = {}
    sf = _scalar_fn(s) if n == 1 else None
    for i in range(g.N):
        a, b = float(times[i]), float(times[i + 1])
        if autonomous:
            key = round(b - a, 14)
            if key not in memo:
                memo[key] = _integrate(f, n, 0.0, b - a, tol)[0]
            steps[i] = memo[key]
        elif n == 1:
            steps[i, 0, 0] = _integrate_scalar(sf, a, b, tol)
        else:
            steps[i] = _integrate(f, n, a, b, tol)[0]
    return EvolutionGrid(g, steps, tol, getattr(s, "name", ""))


def transition(eg: EvolutionGrid, i: int, j: int) -> np.ndarray:
    """Functional alias of :meth:`EvolutionGrid.transition`."""
    return eg.transition(i, j)


# ---------------------------------------------------------------------------
# Binary cache

GRID_MAGIC = b"NUDG"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sHIId")
_CRC = struct.Struct("<I")


def grid_to_bytes(eg: EvolutionGrid) -> bytes:
    body = _HEADER.pack(GRID_MAGIC, GRID_VERSION, eg.n, eg.N, float(eg.tol))
    body += np.asarray(eg.times, dtype="<f8").tobytes()
    body += np.asarray(eg.steps, dtype="<f8").tobytes(order="C")
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def grid_from_bytes(raw: bytes, name: str = "") -> EvolutionGrid:
    if len(raw) < _HEADER.size + _CRC.size:
        raise GridFormatError("file too short for a grid header")
    magic, version, n, N, tol = _HEADER.unpack_from(raw, 0)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"bad magic {magic!r}")
    if version != GRID_VERSION:
        raise VersionError(f"grid format version {version} is not supported (expected {GRID_VERSION})")
    expected = _HEADER.size + 8 * (N + 1) + 8 * N * n * n + _CRC.size
    if len(raw) != expected:
        raise ChecksumError(f"length {len(raw)} does not match header ({expected} bytes expected)")
    body, (crc,) = raw[:-_CRC.size], _CRC.unpack_from(raw, len(raw) - _CRC.size)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 checksum mismatch")
    off = _HEADER.size
    times = np.frombuffer(raw, dtype="<f8", count=N + 1, offset=off).astype(float)
    off += 8 * (N + 1)
    steps = np.frombuffer(raw, dtype="<f8", count=N * n * n, offset=off).astype(float).reshape(N, n, n)
    return EvolutionGrid(TimeGrid(times), steps, tol, name)


def save_grid(eg: EvolutionGrid, path: str | Path) -> None:
    """Write ``eg`` atomically (temporary file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(grid_to_bytes(eg))
    tmp.replace(path)


def load_grid(path: str | Path) -> EvolutionGrid:
    """Read a grid written by :func:`save_grid`, verifying version and checksum."""
    return grid_from_bytes(Path(path).read_bytes())


def iter_pairs(N: int) -> Iterator[tuple[int, int]]:
    """All node pairs ``(i, j)`` with ``i >= j``."""
    for j in range(N + 1):
        for i in range(j, N + 1):
            yield i, j
