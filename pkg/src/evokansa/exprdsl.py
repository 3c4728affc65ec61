"""Scalar expression language with second-order forward-mode differentiation.

Grammar (lowest to highest precedence)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ('^' unary)?          # right associative
    atom    := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'

Functions: sin, cos, tan, exp, log, sqrt, abs.  The identifier ``pi`` is a
built-in constant unless it is declared as a variable.

Evaluation is vectorised: bindings may be numpy arrays of any common
broadcastable shape, and :func:`eval_jet2` returns value, gradient and
Hessian with respect to the declared variable list.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "abs")
CONSTANTS = {"pi": math.pi}


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int, text: str = ""):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset
        self.text = text


class ExprDomainError(ExprError):
    pass


# --------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


Node = Union[Num, Var, Neg, BinOp, Call]


@dataclass(frozen=True)
class Expr:
    """A parsed expression together with its declared variable order."""

    root: Node
    variables: tuple[str, ...]
    source: str = ""

    def __str__(self) -> str:
        return to_string(self.root)

    def is_constant(self) -> bool:
        return not _uses_variables(self.root)

    def evaluate(self, bindings: Mapping[str, object]) -> np.ndarray:
        return evaluate(self, bindings)

    def jet(self, bindings: Mapping[str, object]) -> "Jet2":
        return eval_jet2(self, bindings)


# --------------------------------------------------------------------- lexer

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.lastgroup is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text: str, variables: Sequence[str]):
        self.text = text
        self.variables = set(variables)
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, off = self.take()
        if val != value or kind == "end":
            what = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {what}", off, self.text)

    def parse(self) -> Node:
        node = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", off, self.text)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.peek()[1] == "-" and self.peek()[0] == "op":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[1] == "^" and self.peek()[0] == "op":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, val, off = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "ident":
            if self.peek()[1] == "(":
                if val not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {val!r}", off, self.text)
                self.take()
                arg = self.expr()
                _, nv, noff = self.peek()
                if nv == ",":
                    raise ExprSyntaxError(
                        f"function {val!r} takes exactly one argument", noff, self.text
                    )
                self.expect(")")
                return Call(val, arg)
            if val in FUNCTIONS:
                raise ExprSyntaxError(
                    f"function {val!r} requires an argument list", off, self.text
                )
            if val in self.variables:
                return Var(val)
            if val in CONSTANTS:
                return Num(CONSTANTS[val])
            raise ExprSyntaxError(f"unknown identifier {val!r}", off, self.text)
        if val == "(":
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {what}", off, self.text)


_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z_0-9]*$")


def parse(text: str, variables: Sequence[str]) -> Expr:
    """Parse ``text`` into an :class:`Expr` over the named ``variables``."""
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0, text)
    for name in variables:
        if not _IDENT_RE.match(name) or name in FUNCTIONS:
            raise ExprError(f"invalid variable name {name!r}")
    root = _Parser(text, variables).parse()
    return Expr(root, tuple(variables), text)


# ------------------------------------------------------------------ printing

def to_string(node: Node) -> str:
    """Fully parenthesised rendering; reparsing gives an identical tree."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_string(node.arg)})"
    if isinstance(node, Call):
        return f"{node.func}({to_string(node.arg)})"
    return f"({to_string(node.left)} {node.op} {to_string(node.right)})"


def _uses_variables(node: Node) -> bool:
    if isinstance(node, Var):
        return True
    if isinstance(node, Num):
        return False
    if isinstance(node, (Neg, Call)):
        return _uses_variables(node.arg)
    return _uses_variables(node.left) or _uses_variables(node.right)


# ------------------------------------------------------------------- values


def _bind(expr: Expr, bindings: Mapping[str, object]) -> dict[str, np.ndarray]:
    missing = [v for v in expr.variables if v not in bindings]
    if missing:
        raise ExprError(f"unbound variables: {', '.join(missing)}")
    return {v: np.asarray(bindings[v], dtype=float) for v in expr.variables}


def _check_domain(node: Node, ok: np.ndarray, what: str):
    if not np.all(ok):
        raise ExprDomainError(f"{what} in '{to_string(node)}'")


def evaluate(expr: Expr, bindings: Mapping[str, object]) -> np.ndarray:
    """Plain (value-only) evaluation."""
    env = _bind(expr, bindings)
    return np.asarray(_value(expr.root, env), dtype=float)


def _value(node: Node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Neg):
        return -_value(node.arg, env)
    if isinstance(node, Call):
        a = np.asarray(_value(node.arg, env), dtype=float)
        if node.func == "log":
            _check_domain(node, a > 0, "log of non-positive value")
            return np.log(a)
        if node.func == "sqrt":
            _check_domain(node, a >= 0, "sqrt of negative value")
            return np.sqrt(a)
        return getattr(np, node.func)(a)
    a = _value(node.left, env)
    b = _value(node.right, env)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if node.op == "/":
        _check_domain(node, np.asarray(b) != 0, "division by zero")
        return a / b
    return _power_value(node, np.asarray(a, float), b)


def _integer_exponent(node: BinOp):
    if _uses_variables(node.right):
        return None
    p = float(_value(node.right, {}))
    if p == round(p):
        return int(round(p))
    return None


def _power_value(node: BinOp, a, b):
    n = _integer_exponent(node)
    if n is not None:
        if n < 0:
            _check_domain(node, a != 0, "negative power of zero")
        return a ** float(n) if n >= 0 else 1.0 / a ** float(-n)
    _check_domain(node, a > 0, "non-integer power of non-positive base")
    return np.power(a, b)


# --------------------------------------------------------------------- jets


@dataclass
class Jet2:
    """Value, gradient and Hessian at one or many points.

    ``value`` has shape ``S``; ``grad`` has shape ``S + (n,)`` and ``hess``
    ``S + (n, n)`` for ``n`` declared variables.
    """

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray

    @property
    def nvars(self) -> int:
        return self.grad.shape[-1]

    def __add__(self, o: "Jet2") -> "Jet2":
        return Jet2(self.value + o.value, self.grad + o.grad, self.hess + o.hess)

    def __sub__(self, o: "Jet2") -> "Jet2":
        return Jet2(self.value - o.value, self.grad - o.grad, self.hess - o.hess)

    def __neg__(self) -> "Jet2":
        return Jet2(-self.value, -self.grad, -self.hess)

    def __mul__(self, o: "Jet2") -> "Jet2":
        a, b = self.value, o.value
        ga, gb = self.grad, o.grad
        outer = ga[..., :, None] * gb[..., None, :]
        hess = (
            a[..., None, None] * o.hess
            + b[..., None, None] * self.hess
            + outer
            + np.swapaxes(outer, -1, -2)
        )
        return Jet2(a * b, a[..., None] * gb + b[..., None] * ga, hess)

    def chain(self, f0, f1, f2) -> "Jet2":
        """Compose with a scalar function given f(a), f'(a), f''(a)."""
        g = self.grad
        hess = f1[..., None, None] * self.hess + f2[..., None, None] * (
            g[..., :, None] * g[..., None, :]
        )
        return Jet2(f0, f1[..., None] * g, hess)


def _const_jet(value, shape, n) -> Jet2:
    v = np.broadcast_to(np.asarray(value, dtype=float), shape).copy()
    return Jet2(v, np.zeros(shape + (n,)), np.zeros(shape + (n, n)))


def eval_jet2(expr: Expr, bindings: Mapping[str, object]) -> Jet2:
    """Evaluate value, gradient and Hessian over ``expr.variables``."""
    env = _bind(expr, bindings)
    shape = np.broadcast_shapes(*(a.shape for a in env.values())) if env else ()
    n = len(expr.variables)
    seeds = {}
    for i, name in enumerate(expr.variables):
        grad = np.zeros(shape + (n,))
        grad[..., i] = 1.0
        seeds[name] = Jet2(
            np.broadcast_to(env[name], shape).copy(), grad, np.zeros(shape + (n, n))
        )
    return _jet(expr.root, seeds, shape, n)


def _jet(node: Node, seeds, shape, n) -> Jet2:
    if isinstance(node, Num):
        return _const_jet(node.value, shape, n)
    if isinstance(node, Var):
        return seeds[node.name]
    if isinstance(node, Neg):
        return -_jet(node.arg, seeds, shape, n)
    if isinstance(node, Call):
        return _call_jet(node, _jet(node.arg, seeds, shape, n))
    if node.op == "^":
        return _power_jet(node, seeds, shape, n)
    a = _jet(node.left, seeds, shape, n)
    b = _jet(node.right, seeds, shape, n)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    _check_domain(node, b.value != 0, "division by zero")
    x = b.value
    return a * b.chain(1.0 / x, -1.0 / x**2, 2.0 / x**3)


def _call_jet(node: Call, a: Jet2) -> Jet2:
    x = a.value
    f = node.func
    if f == "sin":
        s, c = np.sin(x), np.cos(x)
        return a.chain(s, c, -s)
    if f == "cos":
        s, c = np.sin(x), np.cos(x)
        return a.chain(c, -s, -c)
    if f == "tan":
        t = np.tan(x)
        sec2 = 1.0 + t * t
        return a.chain(t, sec2, 2.0 * t * sec2)
    if f == "exp":
        e = np.exp(x)
        return a.chain(e, e, e)
    if f == "log":
        _check_domain(node, x > 0, "log of non-positive value")
        return a.chain(np.log(x), 1.0 / x, -1.0 / x**2)
    if f == "sqrt":
        _check_domain(node, x > 0, "sqrt of non-positive value (not differentiable)")
        r = np.sqrt(x)
        return a.chain(r, 0.5 / r, -0.25 / (r * x))
    # abs: derivative taken as sign(x), zero at the kink
    return a.chain(np.abs(x), np.sign(x), np.zeros_like(x))


def _ipow(x, k: int) -> np.ndarray:
    if k == 0:
        return np.ones_like(x)
    if k > 0:
        return x ** float(k)
    with np.errstate(divide="ignore"):
        return 1.0 / x ** float(-k)


def _power_jet(node: BinOp, seeds, shape, n) -> Jet2:
    a = _jet(node.left, seeds, shape, n)
    k = _integer_exponent(node)
    x = a.value
    if k is not None:
        if k == 0:
            return _const_jet(1.0, shape, n)
        if k == 1:
            return a
        if k < 0:
            _check_domain(node, x != 0, "negative power of zero")
        f0 = _ipow(x, k)
        f1 = k * _ipow(x, k - 1)
        f2 = k * (k - 1) * _ipow(x, k - 2)
        return a.chain(f0, f1, f2)
    _check_domain(node, x > 0, "non-integer power of non-positive base")
    b = _jet(node.right, seeds, shape, n)
    loga = a.chain(np.log(x), 1.0 / x, -1.0 / x**2)
    prod = b * loga
    e = np.exp(prod.value)
    return prod.chain(e, e, e)
