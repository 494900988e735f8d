"""Forward-mode automatic differentiation with vector-valued dual numbers.

A ``Dual`` carries a value and a numpy array of partial derivatives with
respect to a chosen seed basis. Seeding one ``Dual`` per decision variable of
a shooting node and evaluating the model once yields the full node Jacobian
block. Finite differences are used only as a test oracle, never in the
solvers.

Values may be scalars or arrays: a transcription evaluates all nodes at once
by carrying ``val`` of shape (M,) and ``dot`` of shape (K, M), one derivative
row per local seed direction. Keeping the node axis last lets every
arithmetic rule broadcast identically in both modes.
"""

from __future__ import annotations

import numpy as np


class Dual:
    """Value (scalar or array) with attached derivative rows."""

    __slots__ = ("val", "dot")

    # make ndarray <op> Dual defer to our reflected operators instead of
    # broadcasting into an object array
    __array_ufunc__ = None

    def __init__(self, val, dot) -> None:
        if isinstance(val, np.ndarray) and val.ndim > 0:
            self.val = val
        else:
            self.val = float(val)
        self.dot = np.asarray(dot, dtype=float)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.dot + other.dot)
        return Dual(self.val + other, self.dot)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.dot - other.dot)
        return Dual(self.val - other, self.dot)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.dot)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val,
                        self.val * other.dot + other.val * self.dot)
        return Dual(self.val * other, self.dot * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            return Dual(self.val * inv,
                        (self.dot - self.val * inv * other.dot) * inv)
        inv = 1.0 / other
        return Dual(self.val * inv, self.dot * inv)

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        return Dual(other * inv, -other * inv * inv * self.dot)

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise TypeError("dual exponents are not supported")
        v = self.val ** p
        return Dual(v, p * self.val ** (p - 1.0) * self.dot)

    def __neg__(self):
        return Dual(-self.val, -self.dot)

    def __abs__(self):
        sign = np.where(np.asarray(self.val) >= 0.0, 1.0, -1.0)
        if np.ndim(self.val) == 0:
            sign = float(sign)
        return Dual(abs(self.val) if np.ndim(self.val) == 0
                    else np.abs(self.val), self.dot * sign)

    # -- comparisons branch on the value ----------------------------------

    def __lt__(self, other):
        return self.val < value(other)

    def __le__(self, other):
        return self.val <= value(other)

    def __gt__(self, other):
        return self.val > value(other)

    def __ge__(self, other):
        return self.val >= value(other)

    def __float__(self):
        return float(self.val)

    def __repr__(self):
        return f"Dual({self.val!r}, {self.dot!r})"


def seed(values, n: int | None = None, offset: int = 0) -> list[Dual]:
    """Wrap ``values`` as duals with unit seeds at ``offset``, ``offset+1``, ...

    ``n`` is the total derivative dimension (defaults to ``len(values)``).
    """
    values = list(values)
    if n is None:
        n = len(values)
    out = []
    for j, v in enumerate(values):
        dot = np.zeros(n)
        dot[offset + j] = 1.0
        out.append(Dual(v, dot))
    return out


def seed_rows(values: np.ndarray, n: int, rows) -> list[Dual]:
    """Seed per-node value arrays for a vectorized evaluation.

    ``values`` is a list of (M,) arrays, ``rows`` the seed row each one
    occupies; the result duals carry dot of shape (n, M) with a row of ones
    at their seed index.
    """
    out = []
    for v, r in zip(values, rows):
        v = np.asarray(v, dtype=float)
        dot = np.zeros((n, v.shape[0]))
        dot[r, :] = 1.0
        out.append(Dual(v, dot))
    return out


def constant(v, n: int) -> Dual:
    """A dual with zero derivative of dimension ``n``."""
    if isinstance(v, np.ndarray) and v.ndim > 0:
        return Dual(v, np.zeros((n, v.shape[0])))
    return Dual(v, np.zeros(n))


def value(x):
    """Value of a dual or plain number (scalar or array)."""
    if isinstance(x, Dual):
        return x.val
    if isinstance(x, np.ndarray):
        return x
    return float(x)


def grad(x, n: int) -> np.ndarray:
    """Derivative rows of ``x``; zeros for a plain number."""
    if isinstance(x, Dual):
        return x.dot
    return np.zeros(n)


def select(cond, a, b):
    """Elementwise ``a if cond else b`` through duals.

    The branch choice is treated as locally constant, so derivatives are
    taken from the selected side only.
    """
    if not (isinstance(a, Dual) or isinstance(b, Dual)):
        out = np.where(cond, a, b)
        return float(out) if np.ndim(out) == 0 else out
    da = a.dot if isinstance(a, Dual) else None
    db = b.dot if isinstance(b, Dual) else None
    if da is None:
        da = np.zeros_like(db)
    if db is None:
        db = np.zeros_like(da)
    v = np.where(cond, value(a), value(b))
    if np.ndim(v) == 0:
        v = float(v)
    return Dual(v, np.where(cond, da, db))


# -- elementary functions dispatching on type ------------------------------

def sqrt(x):
    if isinstance(x, Dual):
        r = np.sqrt(x.val)
        return Dual(r, x.dot * (0.5 / r))
    return np.sqrt(x) if isinstance(x, np.ndarray) else float(np.sqrt(x))


def exp(x):
    if isinstance(x, Dual):
        e = np.exp(x.val)
        return Dual(e, x.dot * e)
    return np.exp(x) if isinstance(x, np.ndarray) else float(np.exp(x))


def log(x):
    if isinstance(x, Dual):
        return Dual(np.log(x.val), x.dot / x.val)
    return np.log(x) if isinstance(x, np.ndarray) else float(np.log(x))


def log1p(x):
    if isinstance(x, Dual):
        return Dual(np.log1p(x.val), x.dot / (1.0 + x.val))
    return np.log1p(x) if isinstance(x, np.ndarray) else float(np.log1p(x))


def softplus(x, width: float):
    """Smooth max(x, 0) with transition width ``width`` (C-infinity).

    Always >= max(x, 0); equals it to machine precision a few widths away
    from the kink. Computed as max(x, 0) + w*log1p(exp(-|x|/w)), which never
    overflows and underflows gracefully to the exact ramp.
    """
    xv = value(x)
    pos = select(np.asarray(xv) >= 0.0, x, x * 0.0)
    return pos + width * log1p(exp(-(abs(x) if isinstance(x, Dual)
                                     else np.abs(xv)) / width))


def smoothmin(a, b, width: float):
    """Smooth min(a, b), always <= the exact min (log-sum-exp blend)."""
    d = a - b
    dv = np.asarray(value(d))
    lo = select(dv >= 0.0, b, a)
    gap = abs(d) if isinstance(d, Dual) else np.abs(dv)
    out = lo - width * log1p(exp(-gap / width))
    if isinstance(out, Dual) or np.ndim(out) > 0:
        return out
    return float(out)
