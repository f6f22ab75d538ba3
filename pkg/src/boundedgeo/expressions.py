"""Minimal arithmetic expression language for metrics and boundary data.

Grammar (left associative, usual precedence):

    expr  := term  (("+" | "-") term)*
    term  := unary (("*" | "/") unary)*
    unary := "-" unary | atom
    atom  := NUMBER | NAME | NAME "(" expr ")" | "(" expr ")"

Known functions: sin, cos, exp, sqrt, log.  Parsed trees evaluate with
plain floats, numpy arrays or the dual numbers of :mod:`.autodiff`, so a
single definition serves values, vectorized sampling and derivatives.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping

from . import autodiff

__all__ = ["Expression", "ExpressionError", "parse_expression"]

_FUNCTIONS = {
    "sin": autodiff.sin,
    "cos": autodiff.cos,
    "exp": autodiff.exp,
    "sqrt": autodiff.sqrt,
    "log": autodiff.log,
}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/()]))"
)


class ExpressionError(ValueError):
    """Parse failure, carrying the offending position in the source."""

    def __init__(self, message: str, source: str, position: int):
        super().__init__(f"{message} at position {position}: {source!r}")
        self.position = position
        self.source = source


class _Node:
    pass


@dataclass(frozen=True)
class _Const(_Node):
    value: float

    def eval(self, env):
        return self.value


@dataclass(frozen=True)
class _Var(_Node):
    name: str

    def eval(self, env):
        return env[self.name]


@dataclass(frozen=True)
class _Neg(_Node):
    arg: _Node

    def eval(self, env):
        return -self.arg.eval(env)


@dataclass(frozen=True)
class _BinOp(_Node):
    op: str
    left: _Node
    right: _Node

    def eval(self, env):
        a = self.left.eval(env)
        b = self.right.eval(env)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        return a / b


@dataclass(frozen=True)
class _Call(_Node):
    func: str
    arg: _Node

    def eval(self, env):
        return _FUNCTIONS[self.func](self.arg.eval(env))


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = []
        pos = 0
        while pos < len(source):
            if source[pos].isspace():
                pos += 1
                continue
            m = _TOKEN.match(source, pos)
            if m is None or m.lastgroup is None:
                raise ExpressionError(f"unexpected character {source[pos]!r}", source, pos)
            kind = m.lastgroup
            self.tokens.append((kind, m.group(kind), m.start(kind)))
            pos = m.end()
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, "", len(self.source))

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect_op(self, op: str):
        kind, text, pos = self.next()
        if kind != "op" or text != op:
            raise ExpressionError(f"expected {op!r}", self.source, pos)

    def parse(self) -> _Node:
        node = self.expr()
        kind, text, pos = self.peek()
        if kind is not None:
            raise ExpressionError(f"unexpected token {text!r}", self.source, pos)
        return node

    def expr(self) -> _Node:
        node = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.next()
                node = _BinOp(text, node, self.term())
            else:
                return node

    def term(self) -> _Node:
        node = self.unary()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.next()
                node = _BinOp(text, node, self.unary())
            else:
                return node

    def unary(self) -> _Node:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.next()
            return _Neg(self.unary())
        return self.atom()

    def atom(self) -> _Node:
        kind, text, pos = self.next()
        if kind == "num":
            return _Const(float(text))
        if kind == "name":
            nkind, ntext, _ = self.peek()
            if nkind == "op" and ntext == "(":
                if text not in _FUNCTIONS:
                    raise ExpressionError(f"unknown function {text!r}", self.source, pos)
                self.next()
                arg = self.expr()
                self.expect_op(")")
                return _Call(text, arg)
            return _Var(text)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        what = repr(text) if kind is not None else "end of input"
        raise ExpressionError(f"unexpected {what}", self.source, pos)


def _collect_vars(node: _Node, out: set):
    if isinstance(node, _Var):
        out.add(node.name)
    elif isinstance(node, _Neg):
        _collect_vars(node.arg, out)
    elif isinstance(node, _BinOp):
        _collect_vars(node.left, out)
        _collect_vars(node.right, out)
    elif isinstance(node, _Call):
        _collect_vars(node.arg, out)


@dataclass(frozen=True)
class Expression:
    """A parsed scalar expression over named variables."""

    source: str
    root: _Node
    variables: frozenset

    def __call__(self, env: Mapping):
        return self.root.eval(env)

    @property
    def is_constant(self) -> bool:
        return not self.variables


def parse_expression(source, allowed_variables=None) -> Expression:
    """Parse *source*; optionally restrict the variable names it may use."""
    if isinstance(source, Expression):
        return source
    if isinstance(source, (int, float)):
        source = repr(float(source))
    root = _Parser(source).parse()
    names: set = set()
    _collect_vars(root, names)
    if allowed_variables is not None:
        extra = names - set(allowed_variables)
        if extra:
            raise ExpressionError(
                f"unknown variable(s) {sorted(extra)} (allowed: {sorted(allowed_variables)})",
                source,
                0,
            )
    return Expression(source, root, frozenset(names))
