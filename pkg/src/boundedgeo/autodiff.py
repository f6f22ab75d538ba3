"""Second-order forward-mode automatic differentiation.

A :class:`HyperDual` number carries a value, two independent first-order
perturbations and the mixed second-order term.  Seeding the two
perturbation slots with coordinate directions extracts the value, two
first partials and one mixed second partial of a function in a single
evaluation, exactly to roundoff.  This is the derivative engine behind
all closed-form metric and boundary-data evaluations; finite differences
appear only as independent test oracles.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "HyperDual",
    "sin",
    "cos",
    "exp",
    "sqrt",
    "log",
    "value_of",
    "gradient",
    "value_gradient_hessian",
]


class HyperDual:
    """Number of the form a + b*e1 + c*e2 + d*e1*e2 with e1^2 = e2^2 = 0."""

    __slots__ = ("a", "b", "c", "d")

    def __init__(self, a: float, b: float = 0.0, c: float = 0.0, d: float = 0.0):
        self.a = float(a)
        self.b = float(b)
        self.c = float(c)
        self.d = float(d)

    def __repr__(self) -> str:
        return f"HyperDual({self.a!r}, {self.b!r}, {self.c!r}, {self.d!r})"

    # arithmetic ---------------------------------------------------------

    def __add__(self, other):
        o = _lift(other)
        if o is NotImplemented:
            return NotImplemented
        return HyperDual(self.a + o.a, self.b + o.b, self.c + o.c, self.d + o.d)

    __radd__ = __add__

    def __sub__(self, other):
        o = _lift(other)
        if o is NotImplemented:
            return NotImplemented
        return HyperDual(self.a - o.a, self.b - o.b, self.c - o.c, self.d - o.d)

    def __rsub__(self, other):
        o = _lift(other)
        if o is NotImplemented:
            return NotImplemented
        return o.__sub__(self)

    def __neg__(self):
        return HyperDual(-self.a, -self.b, -self.c, -self.d)

    def __mul__(self, other):
        o = _lift(other)
        if o is NotImplemented:
            return NotImplemented
        return HyperDual(
            self.a * o.a,
            self.a * o.b + self.b * o.a,
            self.a * o.c + self.c * o.a,
            self.a * o.d + self.b * o.c + self.c * o.b + self.d * o.a,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _lift(other)
        if o is NotImplemented:
            return NotImplemented
        return self * o._reciprocal()

    def __rtruediv__(self, other):
        o = _lift(other)
        if o is NotImplemented:
            return NotImplemented
        return o * self._reciprocal()

    def __pow__(self, n):
        if not isinstance(n, int) or n < 0:
            return NotImplemented
        out = HyperDual(1.0)
        for _ in range(n):
            out = out * self
        return out

    def _reciprocal(self) -> "HyperDual":
        inv = 1.0 / self.a
        return self._chain(inv, -inv * inv, 2.0 * inv * inv * inv)

    def _chain(self, f0: float, f1: float, f2: float) -> "HyperDual":
        """Apply a scalar function with value f0 and derivatives f1, f2 at self.a."""
        return HyperDual(f0, f1 * self.b, f1 * self.c, f1 * self.d + f2 * self.b * self.c)

    # comparisons act on the value part only
    def __lt__(self, other):
        return self.a < value_of(other)

    def __le__(self, other):
        return self.a <= value_of(other)

    def __gt__(self, other):
        return self.a > value_of(other)

    def __ge__(self, other):
        return self.a >= value_of(other)

    def __float__(self):
        return self.a


def _lift(x):
    if isinstance(x, HyperDual):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return HyperDual(float(x))
    return NotImplemented


def value_of(x) -> float:
    """Value part of a scalar that may or may not carry derivatives."""
    return x.a if isinstance(x, HyperDual) else x


# math functions dispatching on the argument kind -------------------------


def sin(x):
    if isinstance(x, HyperDual):
        s, c = math.sin(x.a), math.cos(x.a)
        return x._chain(s, c, -s)
    return np.sin(x)


def cos(x):
    if isinstance(x, HyperDual):
        s, c = math.sin(x.a), math.cos(x.a)
        return x._chain(c, -s, -c)
    return np.cos(x)


def exp(x):
    if isinstance(x, HyperDual):
        e = math.exp(x.a)
        return x._chain(e, e, e)
    return np.exp(x)


def sqrt(x):
    if isinstance(x, HyperDual):
        r = math.sqrt(x.a)
        return x._chain(r, 0.5 / r, -0.25 / (r * x.a))
    return np.sqrt(x)


def log(x):
    if isinstance(x, HyperDual):
        inv = 1.0 / x.a
        return x._chain(math.log(x.a), inv, -inv * inv)
    return np.log(x)


# seeding helpers ----------------------------------------------------------


def gradient(f: Callable[[Sequence], object], p: Sequence[float]) -> np.ndarray:
    """First derivatives of f at p, one dual evaluation per coordinate."""
    p = [float(v) for v in p]
    n = len(p)
    out = np.empty(n)
    for i in range(n):
        args = [HyperDual(v, 1.0 if k == i else 0.0, 0.0) for k, v in enumerate(p)]
        out[i] = _as_hd(f(args)).b
    return out


def value_gradient_hessian(f: Callable[[Sequence], object], p: Sequence[float]):
    """Value, gradient and full Hessian of f at p via paired seeds."""
    p = [float(v) for v in p]
    n = len(p)
    grad = np.empty(n)
    hess = np.empty((n, n))
    val = 0.0
    for i in range(n):
        for j in range(i, n):
            args = [
                HyperDual(v, 1.0 if k == i else 0.0, 1.0 if k == j else 0.0)
                for k, v in enumerate(p)
            ]
            r = _as_hd(f(args))
            if i == 0 and j == 0:
                val = r.a
            if j == i:
                grad[i] = r.b
            hess[i, j] = r.d
            hess[j, i] = r.d
    if n == 0:
        val = value_of(f([]))
    return val, grad, hess


def _as_hd(x) -> HyperDual:
    return x if isinstance(x, HyperDual) else HyperDual(float(x))
