"""Commutative semirings for chain message passing.

Four semirings are provided, plus the tropical (max-plus) semiring used for
Viterbi decoding:

* ``SUM_PRODUCT``        reals with ``+`` and ``*``
* ``LOG_SUM_PRODUCT``    extended reals with log-add-exp and ``+``
* ``ExpectationSemiring(M)``     pairs ``(z, h)`` with the Leibniz product
* ``LogExpectationSemiring(M)``  the same pairs with every inner ``+``/``*``
  replaced by log-domain ``⊕``/``⊗``
* ``MAX_PLUS``           extended reals with ``max`` and ``+``

Scalar operations are pure Python on floats. Pair elements carry a dense,
read-only numpy vector; sparse tricks live in the engines, not here.

Log-domain h-parts are logs of nonnegative numbers. Signed h-parts are not
representable in the log domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import Iterable

import numpy as np

NEG_INF = -math.inf
LN2 = math.log(2.0)


class SemiringError(ValueError):
    """Raised on malformed semiring input (empty reductions, dimension mismatch)."""


# ---------------------------------------------------------------------------
# scalar log-domain primitives
# ---------------------------------------------------------------------------


def log_add(a: float, b: float) -> float:
    """Return ``log(exp(a) + exp(b))`` without overflow.

    Computed as ``max + log1p(exp(min - max))``. Negative infinity is the
    additive identity and is returned untouched, so the function never
    produces NaN for non-NaN input.
    """
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a == b:
        return a + LN2
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def log_mul(a: float, b: float) -> float:
    # -inf annihilates; +inf is excluded from the domain so -inf + inf never occurs
    if a == NEG_INF or b == NEG_INF:
        return NEG_INF
    return a + b


def log_sum(values: Iterable[float], *, allow_empty: bool = False) -> float:
    """Left fold of :func:`log_add` in ascending index order.

    An empty input raises ``SemiringError("empty reduction")`` unless
    ``allow_empty`` is set, in which case the identity ``-inf`` is returned.
    """
    it = iter(values)
    try:
        acc = float(next(it))
    except StopIteration:
        if allow_empty:
            return NEG_INF
        raise SemiringError("empty reduction") from None
    for v in it:
        acc = log_add(acc, float(v))
    return acc


def max_plus_add(a: float, b: float) -> float:
    return a if a >= b else b


def max_plus_mul(a: float, b: float) -> float:
    return log_mul(a, b)


# ---------------------------------------------------------------------------
# expectation pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExpectationPair:
    """Semiring element ``(z, h)``: a scalar part and an M-vector part.

    ``log_domain`` records which family the pair belongs to; the vector is
    copied and frozen at construction.
    """

    z: float
    h: np.ndarray
    log_domain: bool = False

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64).reshape(-1)
        h.setflags(write=False)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "z", float(self.z))

    @property
    def order(self) -> int:
        return self.h.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ExpectationPair):
            return NotImplemented
        return (
            self.log_domain == other.log_domain
            and self.z == other.z
            and np.array_equal(self.h, other.h)
        )

    def __hash__(self):
        return hash((self.z, self.h.tobytes(), self.log_domain))

    def __repr__(self):
        kind = "log" if self.log_domain else "plain"
        return f"ExpectationPair({kind}, z={self.z!r}, h={self.h.tolist()!r})"


def _check(p: ExpectationPair, q: ExpectationPair, log_domain: bool) -> None:
    if p.log_domain != log_domain or q.log_domain != log_domain:
        raise SemiringError("pair domain mismatch")
    if p.order != q.order:
        raise SemiringError(f"dimension mismatch: M={p.order} vs M={q.order}")


def exp_pair_add(p: ExpectationPair, q: ExpectationPair) -> ExpectationPair:
    _check(p, q, False)
    return ExpectationPair(p.z + q.z, p.h + q.h)


def exp_pair_mul(p: ExpectationPair, q: ExpectationPair) -> ExpectationPair:
    """Plain-domain product ``(z1 z2, z1 h2 + z2 h1)``."""
    _check(p, q, False)
    return ExpectationPair(p.z * q.z, p.z * q.h + q.z * p.h)


def log_pair_add(p: ExpectationPair, q: ExpectationPair) -> ExpectationPair:
    _check(p, q, True)
    return ExpectationPair(log_add(p.z, q.z), np.logaddexp(p.h, q.h), True)


def log_pair_mul(p: ExpectationPair, q: ExpectationPair) -> ExpectationPair:
    """Log-domain product ``(z1 ⊗ z2, (z1 ⊗ h2) ⊕ (z2 ⊗ h1))``."""
    _check(p, q, True)
    return ExpectationPair(log_mul(p.z, q.z), np.logaddexp(p.z + q.h, q.z + p.h), True)


# ---------------------------------------------------------------------------
# semiring objects
# ---------------------------------------------------------------------------


class Semiring:
    """A commutative semiring ``(K, add, mul, zero, one)``.

    Subclasses define ``add`` and ``mul`` on single elements; ``sum`` and
    ``prod`` are left folds in index order.
    """

    name = "semiring"
    zero = None
    one = None

    def add(self, a, b):
        raise NotImplementedError

    def mul(self, a, b):
        raise NotImplementedError

    def sum(self, values: Iterable, *, allow_empty: bool = False):
        values = list(values)
        if not values:
            if allow_empty:
                return self.zero
            raise SemiringError("empty reduction")
        return reduce(self.add, values)

    def prod(self, values: Iterable):
        return reduce(self.mul, values, self.one)

    def __repr__(self):
        return f"<{self.name}>"


class _SumProduct(Semiring):
    name = "sum-product"
    zero = 0.0
    one = 1.0

    def add(self, a, b):
        return a + b

    def mul(self, a, b):
        return a * b


class _LogSumProduct(Semiring):
    name = "log-sum-product"
    zero = NEG_INF
    one = 0.0

    def add(self, a, b):
        return log_add(a, b)

    def mul(self, a, b):
        return log_mul(a, b)

    def sum(self, values, *, allow_empty=False):
        return log_sum(values, allow_empty=allow_empty)


class _MaxPlus(Semiring):
    name = "max-plus"
    zero = NEG_INF
    one = 0.0

    def add(self, a, b):
        return max_plus_add(a, b)

    def mul(self, a, b):
        return max_plus_mul(a, b)


SUM_PRODUCT = _SumProduct()
LOG_SUM_PRODUCT = _LogSumProduct()
MAX_PLUS = _MaxPlus()


class ExpectationSemiring(Semiring):
    """Expectation semiring of order ``M`` over plain reals."""

    log_domain = False

    def __init__(self, order: int):
        if order < 0:
            raise SemiringError("order must be nonnegative")
        self.order = order
        self.name = f"expectation[{order}]"
        self.zero = ExpectationPair(0.0, np.zeros(order))
        self.one = ExpectationPair(1.0, np.zeros(order))

    def pair(self, z, h) -> ExpectationPair:
        p = ExpectationPair(z, h, self.log_domain)
        if p.order != self.order:
            raise SemiringError(f"dimension mismatch: M={p.order} vs M={self.order}")
        return p

    def add(self, a, b):
        return exp_pair_add(a, b)

    def mul(self, a, b):
        return exp_pair_mul(a, b)


class LogExpectationSemiring(ExpectationSemiring):
    """Log-domain expectation semiring of order ``M``."""

    log_domain = True

    def __init__(self, order: int):
        if order < 0:
            raise SemiringError("order must be nonnegative")
        self.order = order
        self.name = f"log-expectation[{order}]"
        self.zero = ExpectationPair(NEG_INF, np.full(order, NEG_INF), True)
        self.one = ExpectationPair(0.0, np.full(order, NEG_INF), True)

    def add(self, a, b):
        return log_pair_add(a, b)

    def mul(self, a, b):
        return log_pair_mul(a, b)


def to_log_pair(p: ExpectationPair) -> ExpectationPair:
    """Map a nonnegative plain pair into the log domain."""
    if p.log_domain:
        return p
    with np.errstate(divide="ignore"):
        z = math.log(p.z) if p.z > 0 else NEG_INF
        return ExpectationPair(z, np.log(p.h), True)


def from_log_pair(p: ExpectationPair) -> ExpectationPair:
    if not p.log_domain:
        return p
    return ExpectationPair(math.exp(p.z), np.exp(p.h), False)

