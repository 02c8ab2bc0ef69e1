from __future__ import annotations

import json
import math
import subprocess
import sys

import pytest

from nudich.cli import cache_key, dumps, main
from nudich.evolution import TimeGrid
from nudich.sysdef import SystemDef


def _write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


@pytest.fixture
def linear_sys(tmp_path):
    return _write(tmp_path, "lin.json", {"kind": "linear", "n": 2, "name": "saddle",
                                         "entries": [["-1", "1"], ["0", "1"]], "block_split": 1})


@pytest.fixture
def common(tmp_path):
    return ["--t-end", "20", "--step", "0.2", "--cache-dir", str(tmp_path / "cache")]


def _run(argv, capsys):
    rc = main(argv)
    out = capsys.readouterr()
    return rc, out.out, out.err


def test_dumps_canonical():
    text = dumps({"b": 0.1, "a": [math.nan, math.inf, -math.inf, 1, True, None]})
    assert text.index('"a"') < text.index('"b"')
    doc = json.loads(text)
    assert doc["a"][:3] == ["nan", "inf", "-inf"]
    assert doc["b"] == 0.1


def test_spectrum_report(linear_sys, common, capsys):
    rc, out, _ = _run(["spectrum", "--system", linear_sys, *common], capsys)
    assert rc == 0
    rep = json.loads(out)
    assert rep["schema"] == "nudich.spectrum/1"
    ivs = rep["spectrum"]["intervals"]
    assert [round(iv["a"], 2) for iv in ivs] == [-1.0, 1.0]


def test_dichotomy_and_out_file(linear_sys, common, tmp_path, capsys):
    out = tmp_path / "rep.json"
    rc, line, _ = _run(["dichotomy", "--system", linear_sys, "--lam", "0", "--out", str(out), *common], capsys)
    assert rc == 0 and line.startswith("dichotomy at shift 0")
    rep = json.loads(out.read_text())
    assert rep["dichotomy"]["certified"] and rep["dichotomy"]["rank"] == 1


def test_cache_reuse_and_listing(linear_sys, common, tmp_path, capsys):
    _run(["dichotomy", "--system", linear_sys, *common], capsys)
    files = list((tmp_path / "cache").glob("*.nudg"))
    assert len(files) == 1
    key = cache_key(SystemDef.linear([["-1", "1"], ["0", "1"]], block_split=1, name="saddle"),
                    TimeGrid.uniform(0.0, 20.0, 0.2), 1e-11)
    assert files[0].stem == key
    rc, out, _ = _run(["cache", "validate", *common], capsys)
    assert rc == 0 and json.loads(out)["cache"]["entries"][0]["valid"]
    rc, _, _ = _run(["dichotomy", "--system", linear_sys, "--no-build", *common], capsys)
    assert rc == 0


def test_corrupt_cache_exit_code(linear_sys, common, tmp_path, capsys):
    _run(["dichotomy", "--system", linear_sys, *common], capsys)
    f = next((tmp_path / "cache").glob("*.nudg"))
    raw = bytearray(f.read_bytes())
    raw[60] ^= 1
    f.write_bytes(bytes(raw))
    rc, _, err = _run(["dichotomy", "--system", linear_sys, *common], capsys)
    assert rc == 1 and "CRC32" in err
    rc, out, _ = _run(["cache", "validate", *common], capsys)
    assert rc == 1 and json.loads(out)["cache"]["entries"][0]["valid"] is False
    rc, out, _ = _run(["cache", "evict", "--corrupt-only", *common], capsys)
    assert rc == 0 and json.loads(out)["cache"]["removed"] == [f.stem]
    assert not f.exists()


def test_no_build_missing_grid(linear_sys, common, capsys):
    rc, _, err = _run(["dichotomy", "--system", linear_sys, "--no-build", *common], capsys)
    assert rc == 2 and "--no-build" in err


@pytest.mark.parametrize("argv, code", [
    (["spectrum", "--system", "/nonexistent.json"], 1),
    (["spectrum", "--system", "SYS", "--tol", "1"], 2),
    (["bogus"], 1),
])
def test_exit_codes(argv, code, linear_sys, common, capsys):
    argv = [linear_sys if a == "SYS" else a for a in argv]
    rc, _, _ = _run(argv + common, capsys)
    assert rc == code


def test_parse_error_exit(tmp_path, common, capsys):
    bad = _write(tmp_path, "bad.json", {"kind": "linear", "n": 1, "entries": [["-1 +* t"]]})
    rc, _, err = _run(["spectrum", "--system", bad, *common], capsys)
    assert rc == 1 and "byte" in err


def test_compose_requires_split(tmp_path, common, capsys):
    s = _write(tmp_path, "nosplit.json", {"kind": "linear", "n": 1, "entries": [["-1"]]})
    rc, _, _ = _run(["compose", "--system", s, *common], capsys)
    assert rc == 2


def test_compose_report(tmp_path, capsys):
    s = _write(tmp_path, "tri.json", {"kind": "linear", "n": 2, "entries": [["-1", "1"], ["0", "-2"]],
                                      "block_split": 1})
    rc, out, _ = _run(["compose", "--system", s, "--step", "0.1", "--cache-dir", str(tmp_path / "c")], capsys)
    assert rc == 0
    comp = json.loads(out)["composition"]
    assert comp["passed"] and comp["invariance"]["projector"] <= 1e-6


def test_myc_csv(tmp_path, capsys):
    s = _write(tmp_path, "decay.json", {"kind": "nonlinear", "n": 1, "entries": ["-x1"], "triangular": True})
    spec = _write(tmp_path, "spec.json", {"t0s": [0.0], "horizon": 15.0, "bisect_steps": 2, "n_random": 1,
                                          "n_trajectory_paths": 1, "checks": ["G2", "a", "stability"]})
    rc, out, _ = _run(["myc", "--system", s, "--probe-spec", spec, "--csv-dir", str(tmp_path / "csv"),
                       "--cache-dir", str(tmp_path / "c")], capsys)
    assert rc == 0
    rep = json.loads(out)
    assert rep["myc"]["verdict"] == "pass"
    assert len(list((tmp_path / "csv").glob("trajectory_*.csv"))) == 4


def test_console_script_version():
    r = subprocess.run([sys.executable, "-m", "nudich", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("nudich ")
