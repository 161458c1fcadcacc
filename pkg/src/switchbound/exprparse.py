"""Parsing and evaluation of scalar arithmetic expressions.

Expressions appear in JSON configs as vector-field components, Lyapunov
functions and class-K envelopes. The grammar is deliberately small:

    expr   := term (('+'|'-') term)*
    term   := unary (('*'|'/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right-associative
    atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

``^`` binds tighter than unary minus, so ``-x^2`` means ``-(x^2)``.
Evaluation is numpy-aware: variables may be bound to scalars or arrays of a
common shape, and the result broadcasts accordingly. Domain violations
(square root of a negative, log of a nonpositive, division by zero) raise
``ExprEvalError`` instead of silently producing NaN.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Expression",
    "ExprSyntaxError",
    "ExprEvalError",
    "parse",
    "evaluate",
    "pretty",
]


class ExprSyntaxError(ValueError):
    """Malformed expression source. ``offset`` is the byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ExprEvalError(ValueError):
    """Domain error (sqrt/log out of domain, division by zero, unbound name)."""


# ---------------------------------------------------------------------------
# AST nodes

@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    child: object


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


_FUNCTIONS = {
    "sqrt": 1,
    "exp": 1,
    "log": 1,
    "abs": 1,
    "sin": 1,
    "cos": 1,
    "min": 2,
    "max": 2,
}

_TOKEN_RE = re.compile(
    r"""
    (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
  | (?P<ws>\s+)
  | (?P<bad>.)
    """,
    re.VERBOSE,
)


def _tokenize(source):
    tokens = []
    for m in _TOKEN_RE.finditer(source):
        kind = m.lastgroup
        if kind == "ws":
            continue
        if kind == "bad":
            raise ExprSyntaxError(f"unexpected character {m.group()!r}", m.start())
        tokens.append((kind, m.group(), m.start()))
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, tokens, variables):
        self.tokens = tokens
        self.pos = 0
        self.variables = frozenset(variables)

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, text):
        kind, value, off = self.peek()
        if kind != "op" or value != text:
            raise ExprSyntaxError(f"expected {text!r}", off)
        return self.advance()

    def parse_expr(self):
        node = self.parse_term()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "+-":
                self.advance()
                node = BinOp(value, node, self.parse_term())
            else:
                return node

    def parse_term(self):
        node = self.parse_unary()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "*/":
                self.advance()
                node = BinOp(value, node, self.parse_unary())
            else:
                return node

    def parse_unary(self):
        kind, value, _ = self.peek()
        if kind == "op" and value == "-":
            self.advance()
            return Neg(self.parse_unary())
        return self.parse_power()

    def parse_power(self):
        node = self.parse_atom()
        kind, value, _ = self.peek()
        if kind == "op" and value == "^":
            self.advance()
            # exponent may carry a unary minus: 2^-3
            return BinOp("^", node, self.parse_unary())
        return node

    def parse_atom(self):
        kind, value, off = self.peek()
        if kind == "num":
            self.advance()
            return Const(float(value))
        if kind == "name":
            self.advance()
            nkind, nvalue, _ = self.peek()
            if nkind == "op" and nvalue == "(":
                if value not in _FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {value!r}", off)
                self.advance()
                args = [self.parse_expr()]
                while True:
                    k, v, o = self.peek()
                    if k == "op" and v == ",":
                        self.advance()
                        args.append(self.parse_expr())
                    else:
                        break
                self.expect(")")
                if len(args) != _FUNCTIONS[value]:
                    raise ExprSyntaxError(
                        f"{value} takes {_FUNCTIONS[value]} argument(s), got {len(args)}",
                        off,
                    )
                return Call(value, tuple(args))
            if value not in self.variables:
                raise ExprSyntaxError(f"unknown identifier {value!r}", off)
            return Var(value)
        if kind == "op" and value == "(":
            self.advance()
            node = self.parse_expr()
            self.expect(")")
            return node
        raise ExprSyntaxError(f"expected a value, got {value!r}" if value else "unexpected end of input", off)


@dataclass(frozen=True)
class Expression:
    """Parsed expression: immutable AST plus its declared variable list."""

    ast: object
    variables: tuple

    def __call__(self, **env):
        return evaluate(self, env)

    def evaluate(self, env):
        return evaluate(self, env)

    def pretty(self):
        return pretty(self)


def parse(source, variables=()):
    """Parse ``source`` into an Expression over the declared ``variables``."""
    if not source or not source.strip():
        raise ExprSyntaxError("empty expression", 0)
    parser = _Parser(_tokenize(source), variables)
    node = parser.parse_expr()
    kind, value, off = parser.peek()
    if kind != "end":
        raise ExprSyntaxError(f"unexpected trailing input {value!r}", off)
    return Expression(node, tuple(variables))


def _pow(base, exponent):
    # exact repeated multiplication for small integer exponents
    if np.isscalar(exponent) or getattr(exponent, "ndim", 1) == 0:
        e = float(exponent)
        if e == int(e) and abs(e) <= 64:
            n = int(abs(e))
            out = np.ones_like(np.asarray(base, dtype=float))
            for _ in range(n):
                out = out * base
            if e < 0:
                if np.any(np.asarray(base) == 0.0):
                    raise ExprEvalError("zero raised to a negative power")
                out = 1.0 / out
            return out
    if np.any(np.asarray(base) < 0.0):
        raise ExprEvalError("negative base with non-integer exponent")
    if np.any((np.asarray(base) == 0.0) & (np.asarray(exponent) < 0.0)):
        raise ExprEvalError("zero raised to a negative power")
    return np.exp(np.asarray(exponent, dtype=float) * np.log(np.where(np.asarray(base) == 0.0, 1.0, base))) * np.where(
        np.asarray(base) == 0.0, 0.0, 1.0
    )


def _eval(node, env):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise ExprEvalError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Neg):
        return -_eval(node.child, env)
    if isinstance(node, BinOp):
        left = _eval(node.left, env)
        right = _eval(node.right, env)
        if node.op == "+":
            return np.add(left, right)
        if node.op == "-":
            return np.subtract(left, right)
        if node.op == "*":
            return np.multiply(left, right)
        if node.op == "/":
            if np.any(np.asarray(right) == 0.0):
                raise ExprEvalError("division by zero")
            return np.divide(left, right)
        return _pow(left, right)
    if isinstance(node, Call):
        args = [_eval(a, env) for a in node.args]
        if node.func == "sqrt":
            if np.any(np.asarray(args[0]) < 0.0):
                raise ExprEvalError("sqrt of a negative value")
            return np.sqrt(args[0])
        if node.func == "log":
            if np.any(np.asarray(args[0]) <= 0.0):
                raise ExprEvalError("log of a nonpositive value")
            return np.log(args[0])
        if node.func == "exp":
            return np.exp(args[0])
        if node.func == "abs":
            return np.abs(args[0])
        if node.func == "sin":
            return np.sin(args[0])
        if node.func == "cos":
            return np.cos(args[0])
        if node.func == "min":
            return np.minimum(args[0], args[1])
        return np.maximum(args[0], args[1])
    raise TypeError(f"not an AST node: {node!r}")


def evaluate(expr, env):
    """Evaluate ``expr`` with variables bound by ``env`` (scalars or arrays)."""
    out = _eval(expr.ast, env)
    if np.ndim(out) == 0:
        out = float(out)
        if not np.isfinite(out):
            raise ExprEvalError("non-finite result")
        return out
    if not np.all(np.isfinite(out)):
        raise ExprEvalError("non-finite result")
    return out


# precedence levels used by the printer; higher binds tighter
_LEVEL = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _print(node):
    if isinstance(node, Const):
        return repr(node.value), 5
    if isinstance(node, Var):
        return node.name, 5
    if isinstance(node, Call):
        inner = ", ".join(_print_at(a, 1)[0] for a in node.args)
        return f"{node.func}({inner})", 5
    if isinstance(node, Neg):
        child, _ = _print_at(node.child, 4)
        return f"-{child}", 3
    if isinstance(node, BinOp):
        lvl = _LEVEL[node.op]
        if node.op == "^":
            left, _ = _print_at(node.left, 5)
            right, _ = _print_at(node.right, 4)
        else:
            left, _ = _print_at(node.left, lvl)
            right, _ = _print_at(node.right, lvl + 1)
        return f"{left}{node.op}{right}", lvl
    raise TypeError(f"not an AST node: {node!r}")


def _print_at(node, min_level):
    text, lvl = _print(node)
    if lvl < min_level:
        return f"({text})", 5
    return text, lvl


def pretty(expr):
    """Render the AST back to source. Reparsing yields the same tree."""
    return _print_at(expr.ast, 1)[0]
