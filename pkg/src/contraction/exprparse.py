"""Arithmetic expressions over named variables.

Parsing, vectorised evaluation and symbolic differentiation for the
user-supplied right-hand sides ``f(x, y)`` and ``f(x1, ..., xn)``.

Grammar (see ``docs/grammar.md`` for the EBNF)::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := ("-" | "+") unary | power
    power   := primary ("^" unary)?
    primary := number | name | name "(" expr ("," expr)* ")" | "(" expr ")"

``^`` is right-associative and binds tighter than unary minus, so
``-x^2`` is ``-(x^2)`` and ``2^-1`` is ``2^(-1)``.  Implicit multiplication
(``2x``) is rejected.

Powers whose exponent is a literal ratio of integers with an odd
denominator (``y^(2/3)``, ``x^(-1/3)``) use the real odd root, so they are
defined for negative bases.  Any other power of a negative base is a
domain error.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "FUNCTIONS",
    "Expr",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "ExprError",
    "ParseError",
    "UnknownIdentifierError",
    "DomainError",
    "DifferentiationError",
    "parse",
    "evaluate",
    "compile_expr",
    "differentiate",
    "simplify",
    "substitute",
    "to_source",
    "free_vars",
    "is_constant_zero",
]

#: Supported functions and their arity.
FUNCTIONS: dict[str, int] = {
    "sin": 1,
    "cos": 1,
    "exp": 1,
    "log": 1,
    "sqrt": 1,
    "abs": 1,
    "pow": 2,
}

_MAX_DEPTH = 200


# --------------------------------------------------------------------------
# errors


class ExprError(Exception):
    """Base class for expression errors."""


class ParseError(ExprError):
    """Syntax error at a byte offset of the source."""

    def __init__(self, reason: str, offset: int):
        super().__init__(f"{reason} (at byte {offset})")
        self.reason = reason
        self.offset = offset


class UnknownIdentifierError(ParseError):
    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown identifier {name!r}", offset)
        self.name = name


class DomainError(ExprError, ArithmeticError):
    """Evaluation left the real domain (log of nonpositive, 0^negative, ...)."""


class DifferentiationError(ExprError):
    """Symbolic differentiation refused (derivative undefined somewhere)."""


# --------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Expr:
    """Base node.  Nodes are immutable and hashable."""

    @property
    def kind(self) -> str:
        raise NotImplementedError

    @property
    def children(self) -> tuple[Expr, ...]:
        return ()

    def __str__(self) -> str:
        return to_source(self)


@dataclass(frozen=True)
class Num(Expr):
    value: float

    @property
    def kind(self) -> str:
        return "constant"


@dataclass(frozen=True)
class Var(Expr):
    name: str

    @property
    def kind(self) -> str:
        return "variable"


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr

    @property
    def kind(self) -> str:
        return "unary"

    @property
    def children(self) -> tuple[Expr, ...]:
        return (self.arg,)


@dataclass(frozen=True)
class BinOp(Expr):
    op: str  # one of + - * / ^
    left: Expr
    right: Expr

    @property
    def kind(self) -> str:
        return "binary"

    @property
    def children(self) -> tuple[Expr, ...]:
        return (self.left, self.right)


@dataclass(frozen=True)
class Call(Expr):
    func: str
    args: tuple[Expr, ...]

    @property
    def kind(self) -> str:
        return "call"

    @property
    def children(self) -> tuple[Expr, ...]:
        return self.args


ZERO = Num(0.0)
ONE = Num(1.0)


def free_vars(expr: Expr) -> set[str]:
    if isinstance(expr, Var):
        return {expr.name}
    out: set[str] = set()
    for child in expr.children:
        out |= free_vars(child)
    return out


# --------------------------------------------------------------------------
# tokenizer / parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str  # num | name | op | end
    text: str
    offset: int  # byte offset


def _tokenize(source: str) -> list[_Token]:
    byte_at = [0]
    for ch in source:
        byte_at.append(byte_at[-1] + len(ch.encode("utf-8", "surrogatepass")))
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", byte_at[pos])
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), byte_at[pos]))
        pos = m.end()
    tokens.append(_Token("end", "", byte_at[-1]))
    return tokens


class _Parser:
    def __init__(self, source: str, allowed: frozenset[str]):
        self.tokens = _tokenize(source)
        self.i = 0
        self.allowed = allowed
        self.depth = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> None:
        if self.tok.text != text or self.tok.kind != "op":
            found = self.tok.text or "end of input"
            raise ParseError(f"expected {text!r}, found {found!r}", self.tok.offset)
        self.advance()

    def enter(self) -> None:
        self.depth += 1
        if self.depth > _MAX_DEPTH:
            raise ParseError("expression nested too deeply", self.tok.offset)

    def parse(self) -> Expr:
        node = self.expr()
        if self.tok.kind != "end":
            if self.tok.kind in ("num", "name") or self.tok.text == "(":
                raise ParseError(
                    "implicit multiplication is not supported; use '*'", self.tok.offset
                )
            raise ParseError(f"unexpected {self.tok.text!r}", self.tok.offset)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        self.enter()
        try:
            if self.tok.kind == "op" and self.tok.text in "+-":
                op = self.advance().text
                arg = self.unary()
                return Neg(arg) if op == "-" else arg
            return self.power()
        finally:
            self.depth -= 1

    def power(self) -> Expr:
        base = self.primary()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.advance()
            return BinOp("^", base, self.unary())
        return base

    def primary(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            value = float(tok.text)
            if not math.isfinite(value):
                raise ParseError(f"numeric literal {tok.text!r} out of range", tok.offset)
            return Num(value)
        if tok.kind == "name":
            self.advance()
            if tok.text in FUNCTIONS:
                return self.call(tok)
            if tok.text not in self.allowed:
                raise UnknownIdentifierError(tok.text, tok.offset)
            return Var(tok.text)
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            self.enter()
            node = self.expr()
            self.depth -= 1
            self.expect(")")
            return node
        found = tok.text or "end of input"
        raise ParseError(f"expected a value, found {found!r}", tok.offset)

    def call(self, name_tok: _Token) -> Expr:
        if not (self.tok.kind == "op" and self.tok.text == "("):
            raise ParseError(f"expected '(' after function {name_tok.text!r}", self.tok.offset)
        self.advance()
        self.enter()
        args = [self.expr()]
        while self.tok.kind == "op" and self.tok.text == ",":
            self.advance()
            args.append(self.expr())
        self.depth -= 1
        self.expect(")")
        arity = FUNCTIONS[name_tok.text]
        if len(args) != arity:
            raise ParseError(
                f"{name_tok.text} takes {arity} argument(s), got {len(args)}", name_tok.offset
            )
        return Call(name_tok.text, tuple(args))


def parse(source: str | bytes, allowed_vars: Iterable[str]) -> Expr:
    """Parse ``source`` into an AST whose free variables are in ``allowed_vars``.

    Raises :class:`ParseError` (with a byte offset) on malformed input and
    :class:`UnknownIdentifierError` for names that are neither declared
    variables nor supported functions.
    """
    if isinstance(source, (bytes, bytearray)):
        try:
            source = bytes(source).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("invalid UTF-8", exc.start) from None
    if not source.strip():
        raise ParseError("empty expression", 0)
    allowed = frozenset(allowed_vars)
    clash = allowed & FUNCTIONS.keys()
    if clash:
        raise ValueError(f"variable names shadow functions: {sorted(clash)}")
    return _Parser(source, allowed).parse()


# --------------------------------------------------------------------------
# printing


def to_source(expr: Expr) -> str:
    """Fully parenthesised source text; re-parses to an equivalent tree."""
    if isinstance(expr, Num):
        text = repr(float(expr.value))
        return f"({text})" if text.startswith("-") else text
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Neg):
        return f"(-{to_source(expr.arg)})"
    if isinstance(expr, BinOp):
        return f"({to_source(expr.left)} {expr.op} {to_source(expr.right)})"
    if isinstance(expr, Call):
        return f"{expr.func}({', '.join(to_source(a) for a in expr.args)})"
    raise TypeError(f"not an expression node: {expr!r}")


# --------------------------------------------------------------------------
# evaluation


def _rational_literal(expr: Expr) -> Fraction | None:
    """Exact value of a constant built from integer literals, else None."""
    if isinstance(expr, Num):
        v = expr.value
        if float(v).is_integer() and abs(v) < 2.0**53:
            return Fraction(int(v))
        return None
    if isinstance(expr, Neg):
        r = _rational_literal(expr.arg)
        return None if r is None else -r
    if isinstance(expr, BinOp) and expr.op in "+-*/":
        a = _rational_literal(expr.left)
        b = _rational_literal(expr.right)
        if a is None or b is None:
            return None
        if expr.op == "+":
            return a + b
        if expr.op == "-":
            return a - b
        if expr.op == "*":
            return a * b
        return None if b == 0 else a / b
    return None


def _rational_node(r: Fraction) -> Expr:
    if r.denominator == 1:
        return Num(float(r.numerator))
    return BinOp("/", Num(float(r.numerator)), Num(float(r.denominator)))


def _finite(value, what: str):
    if not np.all(np.isfinite(value)):
        raise DomainError(f"{what} produced a non-finite value")
    return value


def _power(base, expo, exact: Fraction | None):
    base = np.asarray(base, dtype=float)
    if exact is not None and exact.denominator % 2 == 1:
        p, q = exact.numerator, exact.denominator
        if p < 0 and np.any(base == 0):
            raise DomainError("0 raised to a negative power")
        if q == 1:
            out = np.power(base, float(p))
        else:
            out = np.power(np.abs(base), p / q)
            if p % 2:
                out = np.sign(base) * out
        return _finite(out, "power")
    expo = np.asarray(expo, dtype=float)
    non_integer = expo != np.round(expo)
    if np.any((base < 0) & non_integer):
        raise DomainError("negative base raised to a non-integer power")
    if np.any((base == 0) & (expo < 0)):
        raise DomainError("0 raised to a negative power")
    return _finite(np.power(base, expo), "power")


def _div(a, b):
    if np.any(np.asarray(b) == 0):
        raise DomainError("division by zero")
    return _finite(np.divide(a, b), "division")


def _log(u):
    if np.any(np.asarray(u) <= 0):
        raise DomainError("log of a nonpositive value")
    return np.log(u)


def _sqrt(u):
    if np.any(np.asarray(u) < 0):
        raise DomainError("sqrt of a negative value")
    return np.sqrt(u)


_UNARY: dict[str, Callable] = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": lambda u: _finite(np.exp(u), "exp"),
    "log": _log,
    "sqrt": _sqrt,
    "abs": np.abs,
}


def _build(expr: Expr, index: Mapping[str, int]) -> Callable[[Sequence], object]:
    if isinstance(expr, Num):
        v = float(expr.value)
        return lambda args: v
    if isinstance(expr, Var):
        try:
            k = index[expr.name]
        except KeyError:
            raise ExprError(f"unbound variable {expr.name!r}") from None
        return lambda args: args[k]
    if isinstance(expr, Neg):
        f = _build(expr.arg, index)
        return lambda args: np.negative(f(args))
    if isinstance(expr, BinOp):
        left = _build(expr.left, index)
        if expr.op == "^":
            return _build_power(left, expr.right, index)
        right = _build(expr.right, index)
        if expr.op == "+":
            return lambda args: _finite(np.add(left(args), right(args)), "addition")
        if expr.op == "-":
            return lambda args: _finite(np.subtract(left(args), right(args)), "subtraction")
        if expr.op == "*":
            return lambda args: _finite(np.multiply(left(args), right(args)), "product")
        if expr.op == "/":
            return lambda args: _div(left(args), right(args))
        raise ExprError(f"unknown operator {expr.op!r}")
    if isinstance(expr, Call):
        if expr.func == "pow":
            base = _build(expr.args[0], index)
            return _build_power(base, expr.args[1], index)
        fn = _UNARY[expr.func]
        arg = _build(expr.args[0], index)
        return lambda args: fn(arg(args))
    raise TypeError(f"not an expression node: {expr!r}")


def _build_power(base, expo_node: Expr, index):
    exact = _rational_literal(expo_node)
    expo = _build(expo_node, index)
    return lambda args: _power(base(args), expo(args), exact)


def compile_expr(expr: Expr, names: Sequence[str]) -> Callable[..., np.ndarray]:
    """Compile ``expr`` into ``fn(*arrays)`` taking one array per name.

    Inputs broadcast against each other; the result is a float array of the
    broadcast shape.  Domain violations raise :class:`DomainError`.
    """
    names = tuple(names)
    index = {name: k for k, name in enumerate(names)}
    body = _build(expr, index)

    def fn(*args):
        if len(args) != len(names):
            raise TypeError(f"expected {len(names)} arguments, got {len(args)}")
        arrays = [np.asarray(a, dtype=float) for a in args]
        shape = np.broadcast_shapes(*(a.shape for a in arrays)) if arrays else ()
        with np.errstate(all="ignore"):
            out = body(arrays)
        return np.array(np.broadcast_to(out, shape), dtype=float)

    fn.names = names
    fn.expr = expr
    return fn


def evaluate(expr: Expr, bindings: Mapping[str, float]) -> float:
    """Value of ``expr`` at one binding of its free variables."""
    missing = free_vars(expr) - bindings.keys()
    if missing:
        raise ExprError(f"unbound variables: {sorted(missing)}")
    names = sorted(bindings)
    fn = compile_expr(expr, names)
    return float(fn(*(bindings[n] for n in names)))


# --------------------------------------------------------------------------
# simplification (constant folding and unit laws only)


def _is_num(e: Expr, value: float) -> bool:
    return isinstance(e, Num) and e.value == value


def _fold(op: str, a: float, b: float) -> Expr | None:
    try:
        with np.errstate(all="ignore"):
            if op == "+":
                v = a + b
            elif op == "-":
                v = a - b
            elif op == "*":
                v = a * b
            elif op == "/":
                if b == 0:
                    return None
                v = a / b
            else:
                v = float(_power(a, b, _rational_literal(Num(b))))
    except DomainError:
        return None
    return Num(float(v)) if math.isfinite(v) else None


def _neg(a: Expr) -> Expr:
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _add(a: Expr, b: Expr) -> Expr:
    if _is_num(a, 0):
        return b
    if _is_num(b, 0):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return _fold("+", a.value, b.value) or BinOp("+", a, b)
    return BinOp("+", a, b)


def _sub(a: Expr, b: Expr) -> Expr:
    if _is_num(b, 0):
        return a
    if _is_num(a, 0):
        return _neg(b)
    if isinstance(a, Num) and isinstance(b, Num):
        return _fold("-", a.value, b.value) or BinOp("-", a, b)
    return BinOp("-", a, b)


def _mul(a: Expr, b: Expr) -> Expr:
    if _is_num(a, 0) or _is_num(b, 0):
        return ZERO
    if _is_num(a, 1):
        return b
    if _is_num(b, 1):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return _fold("*", a.value, b.value) or BinOp("*", a, b)
    return BinOp("*", a, b)


def _div_node(a: Expr, b: Expr) -> Expr:
    if _is_num(b, 1):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return _fold("/", a.value, b.value) or BinOp("/", a, b)
    return BinOp("/", a, b)


def _pow_node(base: Expr, expo: Expr) -> Expr:
    if _is_num(expo, 0):
        return ONE
    if _is_num(expo, 1):
        return base
    if isinstance(base, Num) and isinstance(expo, Num):
        return _fold("^", base.value, expo.value) or BinOp("^", base, expo)
    return BinOp("^", base, expo)


def _call(func: str, args: tuple[Expr, ...]) -> Expr:
    if func != "pow" and isinstance(args[0], Num):
        try:
            v = float(_UNARY[func](np.float64(args[0].value)))
        except DomainError:
            v = math.nan
        if math.isfinite(v):
            return Num(v)
    return Call(func, args)


def simplify(expr: Expr) -> Expr:
    """Fold constants and apply 0/1 laws.  Rational exponents stay exact."""
    if isinstance(expr, (Num, Var)):
        return expr
    if isinstance(expr, Neg):
        return _neg(simplify(expr.arg))
    if isinstance(expr, BinOp):
        left = simplify(expr.left)
        if expr.op == "^":
            exact = _rational_literal(expr.right)
            right = _rational_node(exact) if exact is not None else simplify(expr.right)
            return _pow_node(left, right)
        right = simplify(expr.right)
        return {"+": _add, "-": _sub, "*": _mul, "/": _div_node}[expr.op](left, right)
    if isinstance(expr, Call):
        if expr.func == "pow":
            return simplify(BinOp("^", expr.args[0], expr.args[1]))
        return _call(expr.func, tuple(simplify(a) for a in expr.args))
    raise TypeError(f"not an expression node: {expr!r}")


def is_constant_zero(expr: Expr) -> bool:
    return _is_num(simplify(expr), 0)


# --------------------------------------------------------------------------
# differentiation


def differentiate(expr: Expr, var: str) -> Expr:
    """Symbolic partial derivative of ``expr`` with respect to ``var``.

    Raises :class:`DifferentiationError` for ``abs`` of an argument that
    depends on ``var``: the kink has no derivative and no sign is guessed.
    """
    return simplify(_d(expr, var))


def _d(e: Expr, v: str) -> Expr:
    if isinstance(e, Num):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == v else ZERO
    if v not in free_vars(e):
        return ZERO
    if isinstance(e, Neg):
        return _neg(_d(e.arg, v))
    if isinstance(e, BinOp):
        a, b = e.left, e.right
        if e.op == "+":
            return _add(_d(a, v), _d(b, v))
        if e.op == "-":
            return _sub(_d(a, v), _d(b, v))
        if e.op == "*":
            return _add(_mul(_d(a, v), b), _mul(a, _d(b, v)))
        if e.op == "/":
            num = _sub(_mul(_d(a, v), b), _mul(a, _d(b, v)))
            return _div_node(num, _pow_node(b, Num(2.0)))
        if e.op == "^":
            return _d_pow(a, b, v)
    if isinstance(e, Call):
        if e.func == "pow":
            return _d_pow(e.args[0], e.args[1], v)
        u = e.args[0]
        du = _d(u, v)
        if e.func == "sin":
            return _mul(Call("cos", (u,)), du)
        if e.func == "cos":
            return _mul(_neg(Call("sin", (u,))), du)
        if e.func == "exp":
            return _mul(e, du)
        if e.func == "log":
            return _div_node(du, u)
        if e.func == "sqrt":
            return _div_node(du, _mul(Num(2.0), e))
        if e.func == "abs":
            raise DifferentiationError(
                f"derivative of abs({to_source(u)}) is undefined where the argument vanishes"
            )
    raise TypeError(f"not an expression node: {e!r}")


def _d_pow(base: Expr, expo: Expr, v: str) -> Expr:
    db = _d(base, v)
    if v not in free_vars(expo):
        exact = _rational_literal(expo)
        if exact is not None:
            coeff = _rational_node(exact)
            lowered = _pow_node(base, _rational_node(exact - 1))
        else:
            coeff = expo
            lowered = _pow_node(base, _sub(expo, ONE))
        return _mul(_mul(coeff, lowered), db)
    # u^w = exp(w log u):  d = u^w (w' log u + w u'/u)
    de = _d(expo, v)
    inner = _add(_mul(de, Call("log", (base,))), _div_node(_mul(expo, db), base))
    return _mul(BinOp("^", base, expo), inner)


def substitute(expr: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Replace variables by expressions."""
    if isinstance(expr, Var):
        return mapping.get(expr.name, expr)
    if isinstance(expr, Num):
        return expr
    if isinstance(expr, Neg):
        return Neg(substitute(expr.arg, mapping))
    if isinstance(expr, BinOp):
        return BinOp(expr.op, substitute(expr.left, mapping), substitute(expr.right, mapping))
    if isinstance(expr, Call):
        return Call(expr.func, tuple(substitute(a, mapping) for a in expr.args))
    raise TypeError(f"not an expression node: {expr!r}")
