"""Command-line interface: ``nudich {spectrum,dichotomy,compose,myc,cache}``.

Every analysis writes one JSON report (sorted keys, floats at 17 significant
digits, a ``schema`` field) and prints a short summary derived from it.
Exit codes: 0 success, 1 input/output or parse errors, 2 unmet preconditions.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .dichotomy import DichotomyAnalyzer, fit_growth
from .errors import (ChecksumError, GridFormatError, NudichError, ParseError, PreconditionError, SystemDefError,
                     VersionError)
from .evolution import EvolutionGrid, TimeGrid, build_grid, default_step, load_grid, save_grid
from .myc import ProbeSpec, load_probe_spec, run_myc
from .spectrum import compute_spectrum
from .sysdef import SystemDef, load_system

__all__ = ["main", "build_parser", "RunConfig", "dumps", "cache_key", "EXIT_OK", "EXIT_IO", "EXIT_PRECONDITION"]

EXIT_OK = 0
EXIT_IO = 1
EXIT_PRECONDITION = 2
CACHE_ENV = "NUDICH_CACHE_DIR"
SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Deterministic JSON

def _norm(x):
    if isinstance(x, dict):
        return {str(k): _norm(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_norm(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_norm(v) for v in x.tolist()]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x)
    return x


def _emit(x, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(x, dict):
        if not x:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_emit(x[k], indent, level + 1)}" for k in sorted(x)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(x, list):
        if not x:
            return "[]"
        return "[\n" + ",\n".join(pad + _emit(v, indent, level + 1) for v in x) + "\n" + end + "]"
    if isinstance(x, bool) or x is None:
        return json.dumps(x)
    if isinstance(x, float):
        if math.isnan(x):
            return '"nan"'
        if math.isinf(x):
            return '"inf"' if x > 0 else '"-inf"'
        return format(x, ".17g")
    return json.dumps(x)


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, two-space indent, floats with 17 significant digits,
    non-finite floats as the strings ``"nan"``, ``"inf"``, ``"-inf"``."""
    return _emit(_norm(obj), 2, 0) + "\n"


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Config and cache

@dataclass(frozen=True)
class RunConfig:
    command: str
    system: Path | None
    t_end: float
    step: float | None
    tol: float
    bisect_tol: float
    cache_dir: Path
    out: Path | None
    workers: int
    no_build: bool
    probe_spec: Path | None
    extra: dict

    @classmethod
    def from_args(cls, ns: argparse.Namespace) -> "RunConfig":
        cache = ns.cache_dir or os.environ.get(CACHE_ENV) or str(Path.home() / ".cache" / "nudich")
        known = {"command", "system", "t_end", "step", "tol", "bisect_tol", "cache_dir", "out", "workers",
                 "no_build", "probe_spec"}
        extra = {k: v for k, v in vars(ns).items() if k not in known and k != "func"}
        cfg = cls(ns.command, Path(ns.system) if getattr(ns, "system", None) else None, ns.t_end, ns.step, ns.tol,
                  ns.bisect_tol, Path(cache), Path(ns.out) if ns.out else None, ns.workers, ns.no_build,
                  Path(ns.probe_spec) if getattr(ns, "probe_spec", None) else None, extra)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not (1e-13 < self.tol < 1e-2):
            raise PreconditionError(f"--tol must lie in (1e-13, 1e-2), got {self.tol}")
        if not (0.0 < self.bisect_tol <= 0.5):
            raise PreconditionError(f"--bisect-tol must lie in (0, 0.5], got {self.bisect_tol}")
        if not self.t_end > 0:
            raise PreconditionError(f"--t-end must be positive, got {self.t_end}")
        if self.step is not None and not (0.0 < self.step <= self.t_end):
            raise PreconditionError(f"--step must lie in (0, t_end], got {self.step}")
        if self.workers < 1:
            raise PreconditionError("--workers must be at least 1")
        if self.system is not None and not self.system.is_file():
            raise FileNotFoundError(f"system file not found: {self.system}")
        if self.probe_spec is not None and not self.probe_spec.is_file():
            raise FileNotFoundError(f"probe spec not found: {self.probe_spec}")


def _system_digest(s: SystemDef) -> str:
    return hashlib.sha256(dumps(s.to_dict()).encode()).hexdigest()


def cache_key(s: SystemDef, grid: TimeGrid, tol: float) -> str:
    """Content hash of the system definition, the node times and the tolerance."""
    h = hashlib.sha256()
    h.update(_system_digest(s).encode())
    h.update(np.ascontiguousarray(grid.times, dtype="<f8").tobytes())
    h.update(format(float(tol), ".17g").encode())
    return h.hexdigest()[:32]


def _grid_for(cfg: RunConfig, s: SystemDef) -> tuple[TimeGrid, float]:
    h = cfg.step if cfg.step is not None else default_step(s, 0.0, cfg.t_end)
    return TimeGrid.uniform(0.0, cfg.t_end, h), h


def obtain_grid(cfg: RunConfig, s: SystemDef) -> tuple[EvolutionGrid, dict]:
    """Load the cached grid for ``(system, grid, tol)`` or integrate and store it."""
    g, h = _grid_for(cfg, s)
    key = cache_key(s, g, cfg.tol)
    path = cfg.cache_dir / f"{key}.nudg"
    info = {"key": key, "t0": 0.0, "t_end": cfg.t_end, "step": h, "N": g.N, "tol": cfg.tol}
    if path.is_file():
        eg = load_grid(path)
        if eg.N != g.N or not np.allclose(eg.times, g.times, rtol=0, atol=1e-12):
            raise ChecksumError(f"cache entry {path} does not match its key")
        return EvolutionGrid(eg.grid, eg.steps, eg.tol, s.name), info
    if cfg.no_build:
        raise PreconditionError(f"no cached grid {key} in {cfg.cache_dir} and --no-build given")
    eg = build_grid(s, g, cfg.tol, workers=cfg.workers)
    cfg.cache_dir.mkdir(parents=True, exist_ok=True)
    save_grid(eg, path)
    meta = {"key": key, "system": s.name, "system_sha256": _system_digest(s), "t_end": cfg.t_end, "step": h,
            "N": g.N, "tol": cfg.tol, "n": s.n}
    _atomic_write(cfg.cache_dir / f"{key}.json", dumps(meta).encode())
    return eg, info


def _header(kind: str, s: SystemDef | None, grid: dict | None) -> dict:
    d = {"schema": f"nudich.{kind}/{SCHEMA_VERSION}", "version": __version__}
    if s is not None:
        d["system"] = {"name": s.name, "n": s.n, "kind": s.kind, "sha256": _system_digest(s)}
    if grid is not None:
        d["grid"] = grid
    return d


# ---------------------------------------------------------------------------
# Commands

def _load_linear(cfg: RunConfig) -> SystemDef:
    s = load_system(cfg.system)
    if s.kind != "linear":
        raise PreconditionError(f"{cfg.command} needs a linear system")
    return s


def cmd_spectrum(cfg: RunConfig) -> tuple[dict, str]:
    s = _load_linear(cfg)
    eg, gi = obtain_grid(cfg, s)
    sr = compute_spectrum(eg, cfg.extra.get("lam_lo"), cfg.extra.get("lam_hi"), tol=cfg.bisect_tol)
    rep = _header("spectrum", s, gi)
    rep["spectrum"] = sr.to_dict()
    ivs = ", ".join(f"[{iv.a:.6g}, {iv.b:.6g}]" for iv in sr.intervals) or "empty"
    return rep, f"{s.name or cfg.system.name}: spectrum {ivs}; gap ranks {sr.ranks}"


def cmd_dichotomy(cfg: RunConfig) -> tuple[dict, str]:
    s = _load_linear(cfg)
    eg, gi = obtain_grid(cfg, s)
    lam = float(cfg.extra.get("lam") or 0.0)
    an = DichotomyAnalyzer(eg)
    ok, cert, reason, rank = an.verdict(lam)
    rep = _header("dichotomy", s, gi)
    body = {"lam": lam, "certified": ok, "reason": reason, "rank": rank,
            "rates": an.rates.tolist(), "growth": fit_growth(eg, "half").to_dict()}
    if cert is not None:
        body["certificate"] = cert.to_dict()
    rep["dichotomy"] = body
    if ok:
        line = f"dichotomy at shift {lam:g}: K={cert.K:.6g} alpha={cert.alpha:.6g} eps={cert.eps:.6g} rank {rank}"
    else:
        line = f"no dichotomy at shift {lam:g}: {reason}"
    return rep, line


def cmd_compose(cfg: RunConfig) -> tuple[dict, str]:
    from .triangular import (TriangularComposition, _coupling_nodes, compute_linking, diagonal_significance,
                             verify_composed_dichotomy)

    s = _load_linear(cfg)
    if s.block_split is None:
        raise PreconditionError("compose needs a system with a block split")
    eg, gi = obtain_grid(cfg, s)
    p = s.block_split
    _, _, C_rows = s.blocks()
    tc = TriangularComposition(eg, p, _coupling_nodes(C_rows, eg.times, p, s.n - p), name=s.name)
    cr = verify_composed_dichotomy(tc)
    link = compute_linking(tc)
    rep = _header("compose", s, gi)
    body = cr.to_dict()
    body["linking"] = {"R0": link.matrix.tolist(), "tail_bound": link.tail_bound, "horizon": link.horizon}
    body["valid_nodes"] = tc.n_valid
    body["c_sup"] = tc.c_sup.to_dict()
    if cfg.extra.get("significance"):
        g, _ = _grid_for(cfg, s)
        body["significance"] = diagonal_significance(s, g, cfg.bisect_tol, cfg.tol).to_dict()
    rep["composition"] = body
    pc = cr.predicted
    line = (f"composition {'passed' if cr.passed else 'failed'}: "
            f"offdiag_stable {cr.offdiag_stable:.3g}, offdiag_unstable {cr.offdiag_unstable:.3g}, "
            f"K3={pc.K3:.6g} alpha3={pc.alpha3:.6g} eps3={pc.eps3:.6g}, fitted alpha={cr.fitted.alpha:.6g}")
    return rep, line


def cmd_myc(cfg: RunConfig) -> tuple[dict, str]:
    s = load_system(cfg.system)
    if s.kind != "nonlinear":
        raise PreconditionError("myc needs a nonlinear system")
    spec = load_probe_spec(cfg.probe_spec) if cfg.probe_spec else ProbeSpec(horizon=cfg.t_end)
    if cfg.step is not None:
        spec = ProbeSpec.from_dict({**spec.to_dict(), "step": cfg.step})
    mr = run_myc(s, spec, cfg.workers)
    rep = _header("myc", s, None)
    rep["probe_spec"] = spec.to_dict()
    rep["myc"] = mr.to_dict()
    csv_dir = cfg.extra.get("csv_dir")
    if csv_dir and mr.stability is not None:
        d = Path(csv_dir)
        d.mkdir(parents=True, exist_ok=True)
        for k, tr in enumerate(mr.stability.trajectories):
            tr.write_csv(d / f"trajectory_{k:03d}.csv")
    failed = sorted(mr.failed)
    line = "myc verdict: pass" if mr.passed else f"myc verdict: fail ({', '.join(failed)})"
    return rep, line


def cmd_cache(cfg: RunConfig) -> tuple[dict, str]:
    action = cfg.extra.get("action") or "list"
    keys = cfg.extra.get("key") or []
    root = cfg.cache_dir
    files = sorted(root.glob("*.nudg")) if root.is_dir() else []
    if keys:
        files = [f for f in files if f.stem in keys]
    entries = []
    bad = []
    for f in files:
        e = {"key": f.stem, "bytes": f.stat().st_size}
        meta = f.with_suffix(".json")
        if meta.is_file():
            try:
                e["meta"] = json.loads(meta.read_text())
            except json.JSONDecodeError:
                e["meta"] = None
        if action in ("validate", "evict"):
            try:
                eg = load_grid(f)
                e.update(valid=True, n=eg.n, N=eg.N)
            except (ChecksumError, VersionError, GridFormatError, OSError) as exc:
                e.update(valid=False, error=str(exc))
                bad.append(f)
        entries.append(e)
    removed = []
    if action == "evict":
        targets = bad if cfg.extra.get("corrupt_only") else files
        for f in targets:
            f.unlink(missing_ok=True)
            f.with_suffix(".json").unlink(missing_ok=True)
            removed.append(f.stem)
    rep = _header("cache", None, None)
    rep["cache"] = {"dir": str(root), "action": action, "entries": entries, "removed": removed}
    if action == "validate" and bad:
        raise _CacheInvalid(rep, "; ".join(f"{f.stem}: {e['error']}" for f, e in
                                           ((f, next(x for x in entries if x["key"] == f.stem)) for f in bad)))
    line = f"cache {root}: {len(entries)} entries" + (f", removed {len(removed)}" if action == "evict" else "")
    return rep, line


class _CacheInvalid(NudichError):
    def __init__(self, report: dict, message: str):
        self.report = report
        super().__init__(f"checksum or format failure: {message}")


COMMANDS = {"spectrum": cmd_spectrum, "dichotomy": cmd_dichotomy, "compose": cmd_compose, "myc": cmd_myc,
            "cache": cmd_cache}


# ---------------------------------------------------------------------------
# Entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--t-end", type=float, default=40.0, help="grid end time (default 40)")
    common.add_argument("--step", type=float, default=None, help="grid step (default from the coefficient size)")
    common.add_argument("--tol", type=float, default=1e-11, help="integration tolerance")
    common.add_argument("--bisect-tol", type=float, default=1e-3, help="spectrum endpoint tolerance")
    common.add_argument("--cache-dir", default=None, help=f"grid cache directory (default ${CACHE_ENV})")
    common.add_argument("--out", default=None, help="report path (default: print the report)")
    common.add_argument("--workers", type=int, default=1, help="worker cap")
    common.add_argument("--no-build", action="store_true", help="fail instead of integrating a missing grid")

    p = argparse.ArgumentParser(prog="nudich", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"nudich {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("spectrum", parents=[common], help="dichotomy spectrum of a linear system")
    sp.add_argument("--system", required=True)
    sp.add_argument("--lam-lo", type=float, default=None)
    sp.add_argument("--lam-hi", type=float, default=None)
    dp = sub.add_parser("dichotomy", parents=[common], help="dichotomy certificate at one shift")
    dp.add_argument("--system", required=True)
    dp.add_argument("--lam", type=float, default=0.0)
    cp = sub.add_parser("compose", parents=[common], help="triangular composition report")
    cp.add_argument("--system", required=True)
    cp.add_argument("--significance", action="store_true", help="also compare full and diagonal spectra")
    mp = sub.add_parser("myc", parents=[common], help="stability checks for a nonlinear system")
    mp.add_argument("--system", required=True)
    mp.add_argument("--probe-spec", default=None)
    mp.add_argument("--csv-dir", default=None, help="dump probe trajectories as CSV")
    kp = sub.add_parser("cache", parents=[common], help="list, validate or evict cached grids")
    kp.add_argument("action", nargs="?", choices=("list", "validate", "evict"), default="list")
    kp.add_argument("--key", action="append", default=None)
    kp.add_argument("--corrupt-only", action="store_true")
    return p


def _emit_report(cfg: RunConfig, rep: dict, line: str) -> None:
    text = dumps(rep)
    if cfg.out is not None:
        _atomic_write(cfg.out, text.encode())
        print(line)
    else:
        sys.stdout.write(text)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_IO
    try:
        cfg = RunConfig.from_args(ns)
        rep, line = COMMANDS[cfg.command](cfg)
        _emit_report(cfg, rep, line)
        return EXIT_OK
    except _CacheInvalid as exc:
        _emit_report(cfg, exc.report, str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ParseError, SystemDefError, ChecksumError, VersionError, GridFormatError, OSError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NudichError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
