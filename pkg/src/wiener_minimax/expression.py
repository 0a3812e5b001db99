"""Tiny arithmetic expression language for user-supplied coefficients.

Grammar (a strict subset of Python expression syntax)::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := ('+' | '-') factor | power
    power  := atom ('^' factor)?
    atom   := NUMBER | 'x' | 'pi' | 'e' | FUNC '(' expr (',' expr)* ')' | '(' expr ')'
    FUNC   := log | exp | sqrt | pow | abs

``^`` and ``**`` both denote exponentiation and are right associative.
The only free variable is ``x``. Expressions compile to vectorized numpy
callables.
"""

from __future__ import annotations

import ast
import math
from typing import Callable

import numpy as np

__all__ = ["ExpressionError", "compile_expression"]


class ExpressionError(ValueError):
    """Raised for expressions outside the supported grammar."""


_FUNCS: dict[str, tuple[Callable, int]] = {
    "log": (np.log, 1),
    "exp": (np.exp, 1),
    "sqrt": (np.sqrt, 1),
    "abs": (np.abs, 1),
    "pow": (np.power, 2),
}
_CONSTS = {"pi": math.pi, "e": math.e}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


def _build(node: ast.AST) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(node, ast.Expression):
        return _build(node.body)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExpressionError(f"unsupported literal {node.value!r}")
        value = float(node.value)
        return lambda x: np.full(np.shape(x), value)
    if isinstance(node, ast.Name):
        if node.id == "x":
            return lambda x: np.asarray(x, dtype=float)
        if node.id in _CONSTS:
            value = _CONSTS[node.id]
            return lambda x: np.full(np.shape(x), value)
        raise ExpressionError(f"unknown name {node.id!r}")
    if isinstance(node, ast.UnaryOp):
        operand = _build(node.operand)
        if isinstance(node.op, ast.USub):
            return lambda x: -operand(x)
        if isinstance(node.op, ast.UAdd):
            return operand
        raise ExpressionError("unsupported unary operator")
    if isinstance(node, ast.BinOp):
        op = _BINOPS.get(type(node.op))
        if op is None:
            raise ExpressionError("unsupported binary operator")
        left, right = _build(node.left), _build(node.right)
        return lambda x: op(left(x), right(x))
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ExpressionError("unsupported function call")
        if node.keywords:
            raise ExpressionError("keyword arguments are not supported")
        fn, arity = _FUNCS[node.func.id]
        if len(node.args) != arity:
            raise ExpressionError(f"{node.func.id} takes {arity} argument(s)")
        args = [_build(a) for a in node.args]
        return lambda x: fn(*(a(x) for a in args))
    raise ExpressionError(f"unsupported syntax: {type(node).__name__}")


def compile_expression(text: str) -> Callable[[np.ndarray], np.ndarray]:
    """Compile ``text`` into a vectorized function of ``x``.

    >>> f = compile_expression("(3 - 1)/(2*x)")
    >>> float(f(1.0))
    1.0
    """
    if not isinstance(text, str) or not text.strip():
        raise ExpressionError("expression must be a non-empty string")
    # '^' is parsed as BitXor by Python; it has lower precedence than '*',
    # so rewrite it to '**' which has the conventional binding.
    source = text.replace("^", "**")
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    fn = _build(tree)

    def evaluate(x):
        with np.errstate(all="ignore"):
            out = fn(np.asarray(x, dtype=float))
        return out if np.ndim(out) else float(out)

    evaluate.__doc__ = text
    return evaluate
