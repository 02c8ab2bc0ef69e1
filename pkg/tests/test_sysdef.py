from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nudich.errors import ArityError, DomainError, ParseError, SystemDefError, UnknownVariableError
from nudich.sysdef import (SystemDef, differentiate, eval_expr, load_system, parse_expr, simplify,
                           system_from_dict, to_text, variables)

# random expression text over t, x1, x2 built from safe operations
_leaf = st.sampled_from(["t", "x1", "x2", "1", "2.5", "pi", "0.5"])
_expr = st.recursive(
    _leaf,
    lambda c: st.one_of(
        st.tuples(c, st.sampled_from(["+", "-", "*"]), c).map(lambda p: f"({p[0]} {p[1]} {p[2]})"),
        c.map(lambda a: f"-{a}"),
        st.tuples(st.sampled_from(["sin", "cos", "tanh"]), c).map(lambda p: f"{p[0]}({p[1]})"),
        c.map(lambda a: f"({a})^2"),
    ),
    max_leaves=8,
)
_point = st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))


@given(_expr, _point)
def test_print_parse_roundtrip(text, p):
    e = parse_expr(text, n=2)
    e2 = parse_expr(to_text(e), n=2)
    assert to_text(e2) == to_text(e)
    t, x1, x2 = p
    assert eval_expr(e2, t, [x1, x2]) == pytest.approx(eval_expr(e, t, [x1, x2]), rel=1e-12, abs=1e-12)


@given(_expr, _point)
def test_simplify_preserves_value(text, p):
    e = parse_expr(text, n=2)
    t, x1, x2 = p
    assert eval_expr(simplify(e), t, [x1, x2]) == pytest.approx(eval_expr(e, t, [x1, x2]), rel=1e-10, abs=1e-10)


@given(_expr, _point, st.sampled_from(["t", "x1", "x2"]))
def test_derivative_matches_central_difference(text, p, var):
    e = parse_expr(text, n=2)
    d = differentiate(e, var)
    t, x1, x2 = p
    h = 1e-5

    def f(shift):
        args = {"t": t, "x1": x1, "x2": x2}
        args[var] += shift
        return eval_expr(e, args["t"], [args["x1"], args["x2"]])

    fd = (f(h) - f(-h)) / (2 * h)
    exact = eval_expr(d, t, [x1, x2])
    assert exact == pytest.approx(fd, rel=1e-5, abs=1e-5 * (1 + abs(f(0))))


def test_precedence_power_binds_tighter_than_negation():
    assert eval_expr(parse_expr("-x1^2", n=1), 0, [3.0]) == -9.0
    assert eval_expr(parse_expr("2^3^2"), 0) == 2.0 ** 9


def test_constants_and_functions():
    assert eval_expr(parse_expr("sqrt(abs(-4)) + log(e) + cos(pi)")) == pytest.approx(2.0)


def test_variables():
    assert variables(parse_expr("x1*t + sin(x2)", n=2)) == {"x1", "t", "x2"}


@pytest.mark.parametrize("text, exc, offset", [
    ("1 + * 2", ParseError, 4),
    ("x3", UnknownVariableError, 0),
    ("foo(t)", UnknownVariableError, 0),
    ("sin(1, 2)", ArityError, None),
    ("(t + 1", ParseError, None),
    ("", ParseError, 0),
])
def test_parse_errors(text, exc, offset):
    with pytest.raises(exc) as ei:
        parse_expr(text, n=2)
    if offset is not None:
        assert ei.value.offset == offset


def test_state_variable_rejected_in_linear_entry():
    with pytest.raises(ParseError):
        parse_expr("x1", n=1, allow_state=False)


@pytest.mark.parametrize("text, t", [("log(t)", -1.0), ("sqrt(t)", -1.0), ("1/t", 0.0)])
def test_domain_errors(text, t):
    with pytest.raises(DomainError):
        eval_expr(parse_expr(text), t)


def test_linear_system_matrix_and_autonomy():
    s = SystemDef.linear([["-1", "sin(t)"], ["0", "-2"]])
    assert not s.is_autonomous
    np.testing.assert_allclose(s.matrix(math.pi / 2), [[-1, 1], [0, -2]])
    assert SystemDef.linear([["-1"]]).is_autonomous


def test_nonlinear_jacobian_symbolic():
    s = SystemDef.nonlinear(["-x1 + exp(-2*t)*sin(x2)", "-x2"])
    J = s.jacobian(1.0, [0.3, 0.7])
    np.testing.assert_allclose(J, [[-1, math.exp(-2) * math.cos(0.7)], [0, -1]], rtol=1e-14)


def test_triangular_and_block_split_validation():
    with pytest.raises(SystemDefError):
        SystemDef.linear([["-1", "0"], ["1", "-2"]], triangular=True)
    with pytest.raises(SystemDefError):
        SystemDef.linear([["-1", "0"], ["1", "-2"]], block_split=1)
    with pytest.raises(SystemDefError):
        SystemDef.nonlinear(["-x1 + x2", "-x2 + x1"], triangular=True)
    SystemDef.linear([["-1", "1"], ["0", "-2"]], block_split=1)


def test_load_system_roundtrip(tmp_path):
    doc = {"kind": "linear", "n": 2, "entries": [["-1", "exp(-t)"], ["0", "2"]], "block_split": 1,
           "name": "demo"}
    p = tmp_path / "sys.json"
    p.write_text(json.dumps(doc))
    s = load_system(p)
    assert s.block_split == 1 and s.name == "demo"
    np.testing.assert_allclose(s.matrix(0.0), [[-1, 1], [0, 2]])


@pytest.mark.parametrize("doc", [
    {"kind": "linear", "n": 2, "entries": [["-1"]]},
    {"kind": "weird", "n": 1, "entries": [["-1"]]},
    {"kind": "nonlinear", "n": 1, "entries": ["-x1"], "block_split": 1},
])
def test_invalid_documents(doc):
    with pytest.raises(SystemDefError):
        system_from_dict(doc)


def test_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(SystemDefError):
        load_system(p)
