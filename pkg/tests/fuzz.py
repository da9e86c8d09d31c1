"""Random expressions that are smooth and defined on [-1, 1]^2.

Shared by the acceptance suite (seeded numpy generator) and the property
tests (hypothesis strategy).
"""

from __future__ import annotations

import numpy as np
from hypothesis import strategies as st

from contraction import exprparse as ep

NAMES = ("x", "y")


def _wrap(kind: str, u: ep.Expr) -> ep.Expr:
    one = ep.Num(1.0)
    if kind == "sin":
        return ep.Call("sin", (u,))
    if kind == "cos":
        return ep.Call("cos", (u,))
    if kind == "exp":
        # keep the argument bounded so nested exponentials stay moderate
        return ep.Call("exp", (ep.Call("sin", (u,)),))
    if kind == "log":
        return ep.Call("log", (ep.BinOp("+", ep.Num(1.5), ep.Call("sin", (u,))),))
    if kind == "sqrt":
        return ep.Call("sqrt", (ep.BinOp("+", one, ep.BinOp("^", u, ep.Num(2.0))),))
    if kind == "recip":
        return ep.BinOp("/", one, ep.BinOp("+", one, ep.BinOp("*", u, u)))
    if kind == "square":
        return ep.BinOp("^", u, ep.Num(2.0))
    if kind == "cube":
        return ep.Call("pow", (u, ep.Num(3.0)))
    if kind == "neg":
        return ep.Neg(u)
    raise ValueError(kind)


UNARY = ("sin", "cos", "exp", "log", "sqrt", "recip", "square", "cube", "neg")
BINARY = ("+", "-", "*")


def random_expression(rng: np.random.Generator, depth: int = 4):
    """An expression in ``x, y`` and a point in ``[-1, 1]^2`` where it is smooth."""

    def build(d):
        r = rng.random()
        if d == 0 or r < 0.2:
            choice = rng.integers(3)
            if choice == 2:
                return ep.Num(float(np.round(rng.uniform(-2, 2), 3)))
            return ep.Var(NAMES[choice])
        if r < 0.6:
            return _wrap(UNARY[rng.integers(len(UNARY))], build(d - 1))
        op = BINARY[rng.integers(len(BINARY))]
        return ep.BinOp(op, build(d - 1), build(d - 1))

    expr = build(depth)
    if not (ep.free_vars(expr) & set(NAMES)):
        expr = ep.BinOp("+", expr, ep.BinOp("*", ep.Var("x"), ep.Var("y")))
    point = tuple(float(v) for v in rng.uniform(-1, 1, size=2))
    return expr, point


leaves = st.one_of(
    st.sampled_from([ep.Var("x"), ep.Var("y")]),
    st.floats(-3, 3, allow_nan=False).map(lambda v: ep.Num(round(v, 3))),
)


def _extend(children):
    return st.one_of(
        st.tuples(st.sampled_from(UNARY), children).map(lambda t: _wrap(*t)),
        st.tuples(st.sampled_from(BINARY), children, children).map(
            lambda t: ep.BinOp(t[0], t[1], t[2])),
    )


smooth_expressions = st.recursive(leaves, _extend, max_leaves=8)
