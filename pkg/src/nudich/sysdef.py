"""Expression language and system definitions.

Entries of a linear coefficient matrix ``A(t)`` and components of a nonlinear
vector field ``f(t, x)`` are written in a small infix language::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right associative
    atom   := NUMBER | 't' | 'x<k>' | 'pi' | 'e' | FUNC '(' expr ')' | '(' expr ')'

``^`` binds tighter than unary minus, so ``-x1^2`` is ``-(x1^2)``.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Union

import numpy as np

from .errors import ArityError, DomainError, ParseError, SystemDefError, UnknownVariableError

__all__ = [
    "Expr", "Num", "Const", "Var", "Neg", "Call", "BinOp",
    "FUNCTIONS", "CONSTANTS", "parse_expr", "to_text", "eval_expr", "differentiate",
    "simplify", "variables", "compile_expr", "SystemDef", "jacobian",
    "load_system", "system_from_dict", "SYSTEM_SCHEMA",
]

FUNCTIONS = ("sin", "cos", "exp", "log", "tanh", "abs", "sqrt")
CONSTANTS = {"pi": math.pi, "e": math.e}


# ---------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Const:
    name: str


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class Call:
    fn: str
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Num, Const, Var, Neg, Call, BinOp]

ZERO = Num(0.0)
ONE = Num(1.0)


def state_var(k: int) -> Var:
    return Var(f"x{k}")


def _var_index(name: str) -> int:
    """1-based state index of ``x<k>``, 0 for ``t``."""
    return 0 if name == "t" else int(name[1:])


# ---------------------------------------------------------------------------
# Parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    """Split into (kind, value, byte_offset) tokens, terminated by an ``end`` token."""
    tokens = []
    pos = 0
    raw = text.encode("utf-8")
    # byte offsets differ from character offsets only for non-ASCII input
    char_to_byte = None if len(raw) == len(text) else [len(text[:i].encode("utf-8")) for i in range(len(text) + 1)]

    def boff(i: int) -> int:
        return i if char_to_byte is None else char_to_byte[i]

    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            j = pos
            while j < len(text) and text[j].isspace():
                j += 1
            raise ParseError(f"unexpected character {text[j]!r}", boff(j), text)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), boff(start)))
        pos = m.end()
    tokens.append(("end", "", boff(len(text))))
    return tokens


class _Parser:
    def __init__(self, text: str, n: int, allow_state: bool):
        self.text = text
        self.n = n
        self.allow_state = allow_state
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.toks[self.i]

    def take(self) -> tuple[str, str, int]:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, value: str) -> None:
        kind, val, off = self.take()
        if val != value or kind != "op":
            found = "end of input" if kind == "end" else repr(val)
            raise ParseError(f"expected {value!r}, found {found}", off, self.text)

    def parse(self) -> Expr:
        e = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {val!r}", off, self.text)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.term())
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.unary())
        return e

    def unary(self) -> Expr:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, val, off = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if val not in FUNCTIONS:
                    raise UnknownVariableError(f"unknown function {val!r}", off, self.text)
                self.take()
                if self.peek()[1] == ")":
                    raise ArityError(f"{val}() takes exactly one argument, got 0", self.peek()[2], self.text)
                arg = self.expr()
                if self.peek()[1] == ",":
                    raise ArityError(f"{val}() takes exactly one argument", self.peek()[2], self.text)
                self.expect(")")
                return Call(val, arg)
            if val in FUNCTIONS:
                raise ArityError(f"function {val!r} used without an argument", off, self.text)
            if val in CONSTANTS:
                return Const(val)
            if val == "t":
                return Var("t")
            m = re.fullmatch(r"x([1-9]\d*)", val)
            if m and self.allow_state and int(m.group(1)) <= self.n:
                return Var(val)
            raise UnknownVariableError(f"unknown variable {val!r}", off, self.text)
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect(")")
            return e
        found = "end of input" if kind == "end" else repr(val)
        raise ParseError(f"unexpected {found}", off, self.text)


def parse_expr(text: str, n: int = 0, allow_state: bool = True) -> Expr:
    """Parse ``text`` into an AST.

    Parameters
    ----------
    text : str
        Expression source.
    n : int
        Number of declared state variables ``x1..xn``.
    allow_state : bool
        If False, only ``t`` may appear (linear coefficient entries).

    Raises
    ------
    ParseError, UnknownVariableError, ArityError
        With the byte offset of the offending token.
    """
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty expression", 0, text if isinstance(text, str) else None)
    return _Parser(text, n, allow_state).parse()


# ---------------------------------------------------------------------------
# Printer

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return {"+": _PREC_ADD, "-": _PREC_ADD, "*": _PREC_MUL, "/": _PREC_MUL, "^": _PREC_POW}[e.op]
    if isinstance(e, Neg):
        return _PREC_NEG
    if isinstance(e, Num) and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return _PREC_NEG
    return _PREC_ATOM


def _fmt_num(v: float) -> str:
    if not math.isfinite(v):
        raise ValueError(f"cannot print non-finite literal {v}")
    s = repr(abs(v))
    if "inf" in s or "nan" in s:
        raise ValueError(f"cannot print literal {v}")
    return s


def to_text(e: Expr) -> str:
    """Render ``e`` with the minimal parentheses needed to re-parse it identically."""

    def wrap(sub: Expr, need: int) -> str:
        s = to_text(sub)
        return f"({s})" if _prec(sub) < need else s

    if isinstance(e, Num):
        s = _fmt_num(e.value)
        return f"-{s}" if math.copysign(1.0, e.value) < 0 else s
    if isinstance(e, (Const, Var)):
        return e.name
    if isinstance(e, Neg):
        return "-" + wrap(e.arg, _PREC_NEG)
    if isinstance(e, Call):
        return f"{e.fn}({to_text(e.arg)})"
    if e.op == "^":
        return f"{wrap(e.left, _PREC_ATOM)}^{wrap(e.right, _PREC_NEG)}"
    p = _prec(e)
    return f"{wrap(e.left, p)} {e.op} {wrap(e.right, p + 1)}"


# ---------------------------------------------------------------------------
# Evaluation

def _check(v: float, what: str) -> float:
    if not math.isfinite(v):
        raise DomainError(f"{what} produced a non-finite value")
    return v


def _log(a: float) -> float:
    if not a > 0.0:
        raise DomainError(f"log of nonpositive value {a!r}")
    return math.log(a)


def _sqrt(a: float) -> float:
    if a < 0.0:
        raise DomainError(f"sqrt of negative value {a!r}")
    return math.sqrt(a)


def _div(a: float, b: float) -> float:
    if b == 0.0:
        raise DomainError("division by zero")
    return a / b


def _pow(a: float, b: float) -> float:
    if a < 0.0 and not float(b).is_integer():
        raise DomainError(f"negative base {a!r} with non-integer exponent {b!r}")
    if a == 0.0 and b < 0.0:
        raise DomainError("zero raised to a negative power")
    try:
        return math.pow(a, b)
    except OverflowError as exc:
        raise DomainError(f"overflow in {a!r}^{b!r}") from exc


def _exp(a: float) -> float:
    try:
        return math.exp(a)
    except OverflowError as exc:
        raise DomainError(f"overflow in exp({a!r})") from exc


_FUNC_IMPL: dict[str, Callable[[float], float]] = {
    "sin": math.sin, "cos": math.cos, "exp": _exp, "log": _log,
    "tanh": math.tanh, "abs": abs, "sqrt": _sqrt,
}
_BIN_IMPL: dict[str, Callable[[float, float], float]] = {
    "+": lambda a, b: a + b, "-": lambda a, b: a - b, "*": lambda a, b: a * b,
    "/": _div, "^": _pow,
}


def variables(e: Expr) -> frozenset[str]:
    """Names of all variables referenced by ``e``."""
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, (Num, Const)):
        return frozenset()
    if isinstance(e, (Neg, Call)):
        return variables(e.arg)
    return variables(e.left) | variables(e.right)


def eval_expr(e: Expr, t: float = 0.0, x: Iterable[float] | None = None) -> float:
    """Evaluate ``e`` at time ``t`` and state ``x`` (1-based ``x1`` is ``x[0]``).

    Raises
    ------
    DomainError
        If any operation leaves its domain or the result is not finite.
    """
    xs = None if x is None else [float(v) for v in x]
    env = {"t": float(t)}

    def ev(node: Expr) -> float:
        if isinstance(node, Num):
            return node.value
        if isinstance(node, Const):
            return CONSTANTS[node.name]
        if isinstance(node, Var):
            if node.name == "t":
                return env["t"]
            k = _var_index(node.name)
            if xs is None:
                raise ValueError(f"state vector required to evaluate {node.name}")
            if k > len(xs):
                raise ValueError(f"state vector too short for {node.name}")
            return xs[k - 1]
        if isinstance(node, Neg):
            return -ev(node.arg)
        if isinstance(node, Call):
            return _check(_FUNC_IMPL[node.fn](ev(node.arg)), node.fn)
        return _check(_BIN_IMPL[node.op](ev(node.left), ev(node.right)), node.op)

    return _check(ev(e), "expression")


def _to_python(e: Expr) -> str:
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, Const):
        return repr(CONSTANTS[e.name])
    if isinstance(e, Var):
        return "t" if e.name == "t" else f"x[{_var_index(e.name) - 1}]"
    if isinstance(e, Neg):
        return f"(-{_to_python(e.arg)})"
    if isinstance(e, Call):
        return f"_f_{e.fn}({_to_python(e.arg)})"
    a, b = _to_python(e.left), _to_python(e.right)
    if e.op in "+-*":
        return f"({a} {e.op} {b})"
    return f"{'_div' if e.op == '/' else '_pow'}({a}, {b})"


_COMPILE_ENV = {f"_f_{k}": v for k, v in _FUNC_IMPL.items()} | {"_div": _div, "_pow": _pow}


def compile_exprs(exprs: Iterable[Expr]) -> Callable[[float, object], list[float]]:
    """Compile several expressions into one function ``(t, x) -> list of floats``.

    Raises :class:`DomainError` at call time exactly where :func:`eval_expr` would.
    """
    body = ", ".join(_to_python(e) for e in exprs)
    src = f"def _generated(t, x):\n    return [{body}]\n"
    ns = dict(_COMPILE_ENV)
    exec(compile(src, "<nudich-expr>", "exec"), ns)  # noqa: S102 - source is generated from a validated AST
    raw = ns["_generated"]

    def fn(t: float, x=None) -> list[float]:
        try:
            out = raw(float(t), x)
        except (OverflowError, ZeroDivisionError) as exc:
            raise DomainError(str(exc)) from exc
        except ValueError as exc:
            raise DomainError(f"math domain error: {exc}") from exc
        for v in out:
            if not math.isfinite(v):
                raise DomainError("expression produced a non-finite value")
        return out

    return fn


def compile_expr(e: Expr) -> Callable[[float, object], float]:
    """Single-expression version of :func:`compile_exprs`."""
    f = compile_exprs([e])
    return lambda t, x=None: f(t, x)[0]


# ---------------------------------------------------------------------------
# Simplification and differentiation

def _is_num(e: Expr, v: float | None = None) -> bool:
    return isinstance(e, Num) and (v is None or e.value == v)


def _mk_neg(a: Expr) -> Expr:
    if isinstance(a, Num):
        return Num(-a.value) if a.value != 0.0 else ZERO
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _mk_bin(op: str, a: Expr, b: Expr) -> Expr:
    if isinstance(a, Num) and isinstance(b, Num):
        try:
            v = _BIN_IMPL[op](a.value, b.value)
        except DomainError:
            return BinOp(op, a, b)
        if math.isfinite(v):
            return Num(v)
        return BinOp(op, a, b)
    if op == "+":
        if _is_num(a, 0.0):
            return b
        if _is_num(b, 0.0):
            return a
        if isinstance(b, Neg):
            return _mk_bin("-", a, b.arg)
    elif op == "-":
        if _is_num(b, 0.0):
            return a
        if _is_num(a, 0.0):
            return _mk_neg(b)
    elif op == "*":
        if _is_num(a, 0.0) or _is_num(b, 0.0):
            return ZERO
        if _is_num(a, 1.0):
            return b
        if _is_num(b, 1.0):
            return a
        if _is_num(a, -1.0):
            return _mk_neg(b)
        if _is_num(b, -1.0):
            return _mk_neg(a)
    elif op == "/":
        if _is_num(b, 1.0):
            return a
        if _is_num(a, 0.0) and not _is_num(b, 0.0):
            return ZERO
    elif op == "^":
        if _is_num(b, 1.0):
            return a
        if _is_num(b, 0.0):
            return ONE
    return BinOp(op, a, b)


def simplify(e: Expr) -> Expr:
    """Constant folding with 0/1 absorption. Never changes the value where defined."""
    if isinstance(e, (Num, Const, Var)):
        return e
    if isinstance(e, Neg):
        return _mk_neg(simplify(e.arg))
    if isinstance(e, Call):
        a = simplify(e.arg)
        if isinstance(a, Num):
            try:
                v = _FUNC_IMPL[e.fn](a.value)
                if math.isfinite(v):
                    return Num(v)
            except DomainError:
                pass
        return Call(e.fn, a)
    return _mk_bin(e.op, simplify(e.left), simplify(e.right))


def differentiate(e: Expr, var: str, simplify_result: bool = True) -> Expr:
    """Exact symbolic derivative of ``e`` with respect to variable ``var``."""
    if not (var == "t" or re.fullmatch(r"x[1-9]\d*", var)):
        raise ValueError(f"cannot differentiate with respect to {var!r}")
    d = _diff(e, var)
    return simplify(d) if simplify_result else d


def _diff(e: Expr, v: str) -> Expr:
    if isinstance(e, (Num, Const)):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == v else ZERO
    if v not in variables(e):
        return ZERO
    if isinstance(e, Neg):
        return _mk_neg(_diff(e.arg, v))
    if isinstance(e, Call):
        u, du = e.arg, _diff(e.arg, v)
        outer = {
            "sin": lambda: Call("cos", u),
            "cos": lambda: Neg(Call("sin", u)),
            "exp": lambda: Call("exp", u),
            "log": lambda: BinOp("/", ONE, u),
            "tanh": lambda: BinOp("-", ONE, BinOp("^", Call("tanh", u), Num(2.0))),
            "abs": lambda: BinOp("/", u, Call("abs", u)),
            "sqrt": lambda: BinOp("/", ONE, BinOp("*", Num(2.0), Call("sqrt", u))),
        }[e.fn]()
        return _mk_bin("*", outer, du)
    a, b = e.left, e.right
    da, db = _diff(a, v), _diff(b, v)
    if e.op in "+-":
        return _mk_bin(e.op, da, db)
    if e.op == "*":
        return _mk_bin("+", _mk_bin("*", da, b), _mk_bin("*", a, db))
    if e.op == "/":
        num = _mk_bin("-", _mk_bin("*", da, b), _mk_bin("*", a, db))
        return _mk_bin("/", num, BinOp("^", b, Num(2.0)))
    # power
    if v not in variables(b):
        return _mk_bin("*", _mk_bin("*", b, BinOp("^", a, _mk_bin("-", b, ONE))), da)
    if v not in variables(a):
        return _mk_bin("*", _mk_bin("*", e, Call("log", a)), db)
    inner = _mk_bin("+", _mk_bin("*", db, Call("log", a)), _mk_bin("/", _mk_bin("*", b, da), a))
    return _mk_bin("*", e, inner)


# ---------------------------------------------------------------------------
# System definitions

def _depends_below(e: Expr, i: int) -> list[int]:
    """State indices < i (1-based) referenced by ``e``."""
    return sorted(k for k in (_var_index(nm) for nm in variables(e)) if 0 < k < i)


@dataclass(frozen=True)
class SystemDef:
    """Immutable linear or nonlinear system definition.

    For ``kind == "linear"`` ``entries`` is an n-tuple of n-tuples of
    expressions in ``t``; for ``kind == "nonlinear"`` it is an n-tuple of
    expressions in ``t, x1..xn``.
    """

    kind: str
    n: int
    entries: tuple
    triangular: bool = False
    block_split: int | None = None
    name: str = ""
    description: str = ""
    sources: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "nonlinear"):
            raise SystemDefError(f"kind must be 'linear' or 'nonlinear', got {self.kind!r}")
        if not isinstance(self.n, int) or self.n < 1:
            raise SystemDefError(f"dimension must be a positive integer, got {self.n!r}")
        if self.block_split is not None and not (0 < self.block_split < self.n):
            raise SystemDefError(f"block split must satisfy 0 < p < n={self.n}, got {self.block_split}")
        if self.kind == "linear":
            if len(self.entries) != self.n or any(len(r) != self.n for r in self.entries):
                raise SystemDefError(f"linear system needs an {self.n}x{self.n} entry array")
            for i, row in enumerate(self.entries):
                for j, e in enumerate(row):
                    if variables(e) - {"t"}:
                        raise SystemDefError(f"linear entry ({i + 1},{j + 1}) references state variables")
                    if self.triangular and i > j and e != ZERO:
                        raise SystemDefError(
                            f"triangular system has nonzero entry ({i + 1},{j + 1}) below the diagonal")
            if self.block_split is not None:
                p = self.block_split
                for i in range(p, self.n):
                    for j in range(p):
                        if self.entries[i][j] != ZERO:
                            raise SystemDefError(
                                f"block split p={p} requires a zero lower-left block; entry ({i + 1},{j + 1}) is not")
        else:
            if len(self.entries) != self.n:
                raise SystemDefError(f"nonlinear system needs {self.n} components")
            for i, e in enumerate(self.entries, start=1):
                bad = [k for k in (_var_index(nm) for nm in variables(e)) if k > self.n]
                if bad:
                    raise SystemDefError(f"component {i} references undeclared x{bad[0]}")
                if self.triangular and _depends_below(e, i):
                    raise SystemDefError(
                        f"triangular system: f{i} references x{_depends_below(e, i)[0]}")

    # -- construction helpers -------------------------------------------
    @classmethod
    def linear(cls, rows: Iterable[Iterable[str | Expr | float]], triangular: bool = False,
               block_split: int | None = None, name: str = "", description: str = "") -> "SystemDef":
        """Build a linear system from entry strings (or ready ASTs / numbers)."""
        rows = [list(r) for r in rows]
        n = len(rows)
        src = tuple(tuple(str(c) if not isinstance(c, (Num, Const, Var, Neg, Call, BinOp)) else to_text(c)
                          for c in r) for r in rows)
        ents = tuple(tuple(_coerce(c, 0, allow_state=False) for c in r) for r in rows)
        return cls("linear", n, ents, triangular, block_split, name, description, src)

    @classmethod
    def nonlinear(cls, comps: Iterable[str | Expr], triangular: bool = False, name: str = "",
                  description: str = "") -> "SystemDef":
        """Build a nonlinear system ``x' = f(t, x)`` from component strings."""
        comps = list(comps)
        n = len(comps)
        src = tuple(c if isinstance(c, str) else to_text(c) for c in comps)
        ents = tuple(_coerce(c, n, allow_state=True) for c in comps)
        return cls("nonlinear", n, ents, triangular, None, name, description, src)

    # -- derived, cached ------------------------------------------------
    @cached_property
    def is_autonomous(self) -> bool:
        return all("t" not in variables(e) for e in self._flat())

    def _flat(self) -> list[Expr]:
        return [e for r in self.entries for e in r] if self.kind == "linear" else list(self.entries)

    @cached_property
    def _coeff_fn(self):
        return compile_exprs(self._flat())

    @cached_property
    def _jac_exprs(self) -> tuple:
        self._require("nonlinear")
        return tuple(tuple(differentiate(f, f"x{j + 1}") for j in range(self.n)) for f in self.entries)

    @cached_property
    def _jac_fn(self):
        return compile_exprs([e for r in self._jac_exprs for e in r])

    def _require(self, kind: str) -> None:
        if self.kind != kind:
            raise SystemDefError(f"operation requires a {kind} system, this one is {self.kind}")

    # -- evaluation -----------------------------------------------------
    def matrix(self, t: float) -> np.ndarray:
        """Evaluate ``A(t)`` for a linear system."""
        self._require("linear")
        return np.array(self._coeff_fn(t, None), dtype=float).reshape(self.n, self.n)

    def matrix_function(self) -> Callable[[float], np.ndarray]:
        self._require("linear")
        f, n = self._coeff_fn, self.n
        return lambda t: np.array(f(t, None), dtype=float).reshape(n, n)

    def vector_field(self, t: float, x) -> np.ndarray:
        """Evaluate ``f(t, x)`` for a nonlinear system."""
        self._require("nonlinear")
        return np.array(self._coeff_fn(t, _as_state(x, self.n)), dtype=float)

    def jacobian(self, t: float, x) -> np.ndarray:
        """Matrix of symbolic partials ``df_i/dx_j`` evaluated at ``(t, x)``."""
        self._require("nonlinear")
        J = np.array(self._jac_fn(t, _as_state(x, self.n)), dtype=float).reshape(self.n, self.n)
        if self.triangular:
            J[np.tril_indices(self.n, -1)] = 0.0  # already exact zeros; keeps -0.0 out
        return J

    def partial(self, i: int, j: int) -> Expr:
        """Symbolic ``df_i/dx_j`` (1-based indices)."""
        return self._jac_exprs[i - 1][j - 1]

    # -- structure ------------------------------------------------------
    def submatrix(self, rows: range, cols: range, name: str = "") -> "SystemDef":
        """Square linear subsystem made of ``entries[rows][cols]``."""
        self._require("linear")
        if len(rows) != len(cols):
            raise SystemDefError("submatrix must be square")
        ents = tuple(tuple(self.entries[i][j] for j in cols) for i in rows)
        tri = self.triangular
        return SystemDef("linear", len(rows), ents, tri, None, name or f"{self.name}[sub]")

    def blocks(self) -> tuple["SystemDef", "SystemDef", tuple]:
        """Split ``[[A, C], [0, B]]`` at ``block_split``; C is returned as a tuple of expression rows."""
        self._require("linear")
        if self.block_split is None:
            raise SystemDefError("system has no block split")
        p, n = self.block_split, self.n
        A = self.submatrix(range(p), range(p), f"{self.name}:A")
        B = self.submatrix(range(p, n), range(p, n), f"{self.name}:B")
        C = tuple(tuple(self.entries[i][j] for j in range(p, n)) for i in range(p))
        return A, B, C

    def diagonal_scalars(self) -> list["SystemDef"]:
        """Scalar systems ``a_ii(t)`` of a linear system."""
        self._require("linear")
        return [SystemDef("linear", 1, ((self.entries[i][i],),), False, None, f"{self.name}:a{i + 1}")
                for i in range(self.n)]

    def tail(self, k: int) -> "SystemDef":
        """Subsystem of components ``k..n`` of a triangular nonlinear system, renumbered from 1."""
        self._require("nonlinear")
        if not self.triangular:
            raise SystemDefError("tail subsystems are defined for triangular systems only")
        if not 1 <= k <= self.n:
            raise SystemDefError(f"tail index must be in 1..{self.n}")
        shift = k - 1
        comps = tuple(_rename(self.entries[i], shift) for i in range(shift, self.n))
        return SystemDef("nonlinear", self.n - shift, comps, True, None, f"{self.name}[{k}:]")

    def to_dict(self) -> dict:
        if self.kind == "linear":
            ents = [[to_text(e) for e in r] for r in self.entries]
        else:
            ents = [to_text(e) for e in self.entries]
        d = {"name": self.name, "kind": self.kind, "n": self.n, "triangular": self.triangular}
        if self.block_split is not None:
            d["block_split"] = self.block_split
        if self.description:
            d["description"] = self.description
        d["entries"] = ents
        return d


def _rename(e: Expr, shift: int) -> Expr:
    if isinstance(e, Var):
        return e if e.name == "t" else state_var(_var_index(e.name) - shift)
    if isinstance(e, (Num, Const)):
        return e
    if isinstance(e, Neg):
        return Neg(_rename(e.arg, shift))
    if isinstance(e, Call):
        return Call(e.fn, _rename(e.arg, shift))
    return BinOp(e.op, _rename(e.left, shift), _rename(e.right, shift))


def _coerce(c, n: int, allow_state: bool) -> Expr:
    if isinstance(c, (Num, Const, Var, Neg, Call, BinOp)):
        return c
    if isinstance(c, (int, float)) and not isinstance(c, bool):
        return Num(float(c)) if c >= 0 else Neg(Num(float(-c)))
    e = parse_expr(str(c), n, allow_state=allow_state)
    # literal zeros are normalized so the triangular check is syntactic
    return ZERO if _is_num(simplify(e), 0.0) and not variables(e) else e


def _as_state(x, n: int):
    xs = [float(v) for v in np.ravel(np.asarray(x, dtype=float))]
    if len(xs) != n:
        raise ValueError(f"state has length {len(xs)}, system dimension is {n}")
    return xs


def jacobian(s: SystemDef, t: float, x) -> np.ndarray:
    """Functional alias of :meth:`SystemDef.jacobian`."""
    return s.jacobian(t, x)


# ---------------------------------------------------------------------------
# JSON files

SYSTEM_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "nudich system definition",
    "type": "object",
    "required": ["kind", "n", "entries"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "kind": {"enum": ["linear", "nonlinear"]},
        "n": {"type": "integer", "minimum": 1},
        "triangular": {"type": "boolean"},
        "block_split": {"type": "integer", "minimum": 1},
        "entries": {
            "type": "array",
            "minItems": 1,
            "items": {
                "oneOf": [
                    {"type": "string", "minLength": 1},
                    {"type": "array", "minItems": 1, "items": {"type": "string", "minLength": 1}},
                ]
            },
        },
    },
}


def system_from_dict(doc: dict) -> SystemDef:
    """Validate ``doc`` against :data:`SYSTEM_SCHEMA` and build the system."""
    import jsonschema

    try:
        jsonschema.validate(doc, SYSTEM_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SystemDefError(f"invalid system document at {where}: {exc.message}") from exc
    n, kind, ents = doc["n"], doc["kind"], doc["entries"]
    if len(ents) != n:
        raise SystemDefError(f"expected {n} entry rows/components, got {len(ents)}")
    common = dict(triangular=doc.get("triangular", False), name=doc.get("name", ""),
                  description=doc.get("description", ""))
    if kind == "linear":
        if not all(isinstance(r, list) and len(r) == n for r in ents):
            raise SystemDefError(f"linear entries must be an {n}x{n} array of strings")
        return SystemDef.linear(ents, block_split=doc.get("block_split"), **common)
    if not all(isinstance(c, str) for c in ents):
        raise SystemDefError("nonlinear entries must be a list of strings")
    if "block_split" in doc:
        raise SystemDefError("block_split applies to linear systems only")
    return SystemDef.nonlinear(ents, **common)


def load_system(path: str | Path) -> SystemDef:
    """Read and validate a JSON system file."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SystemDefError(f"{path}: not valid JSON: {exc}") from exc
    return system_from_dict(doc)
