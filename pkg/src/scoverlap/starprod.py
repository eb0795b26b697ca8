"""Truncated star product on phase-plane polynomials, exactly.

The product is the constant-symplectic-structure bidifferential series

    f * g = sum_n (i h / 2)^n / n!  Lambda^n(f, g),
    Lambda(f, g) = f_q g_p - f_p g_q,

held as a formal power series in h with polynomial coefficients over exact
complex rationals, so associativity is an identity rather than an
approximation.  The module also carries the symmetric-ordered operator
correspondence and the matrix-element representation built on the overlap
engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .errors import OrderOverflow, UnsupportedOrdering
from .geometry import Observable, PhasePoint, PrequantumForm, ReferenceLagrangian
from .monomials import format_monomials, parse_monomials
from .oracle import GridSpec, momentum_matrix, weyl_monomial_matrix
from .semiclassics import (
    SemiclassicalAmplitude,
    compose_kernels,
    overlap,
    overlap_kernel,
)

MAX_ORDER = 8


@dataclass(frozen=True)
class QQi:
    """Complex number with exact rational real and imaginary parts."""

    re: Fraction = Fraction(0)
    im: Fraction = Fraction(0)

    def __add__(self, other: "QQi") -> "QQi":
        return QQi(self.re + other.re, self.im + other.im)

    def __sub__(self, other: "QQi") -> "QQi":
        return QQi(self.re - other.re, self.im - other.im)

    def __mul__(self, other: "QQi") -> "QQi":
        return QQi(
            self.re * other.re - self.im * other.im,
            self.re * other.im + self.im * other.re,
        )

    def __neg__(self) -> "QQi":
        return QQi(-self.re, -self.im)

    def conjugate(self) -> "QQi":
        return QQi(self.re, -self.im)

    def scale(self, r: Fraction) -> "QQi":
        return QQi(self.re * r, self.im * r)

    def __bool__(self) -> bool:
        return self.re != 0 or self.im != 0

    def __complex__(self) -> complex:
        return complex(float(self.re), float(self.im))

    @staticmethod
    def of(value) -> "QQi":
        if isinstance(value, QQi):
            return value
        if isinstance(value, complex):
            return QQi(Fraction(value.real).limit_denominator(10**12),
                       Fraction(value.imag).limit_denominator(10**12))
        return QQi(Fraction(value))


_I = QQi(Fraction(0), Fraction(1))
_ONE = QQi(Fraction(1))


@dataclass(frozen=True)
class PolynomialObservable:
    """Polynomial in (q, p) with exact complex-rational coefficients."""

    terms: tuple[tuple[tuple[int, int], QQi], ...] = ()

    # -- construction -------------------------------------------------------
    @staticmethod
    def from_dict(table: dict[tuple[int, int], QQi]) -> "PolynomialObservable":
        items = tuple(sorted((k, v) for k, v in table.items() if v))
        return PolynomialObservable(items)

    @staticmethod
    def from_text(text: str) -> "PolynomialObservable":
        return PolynomialObservable.from_dict(
            {k: QQi(v) for k, v in parse_monomials(text).items()}
        )

    @staticmethod
    def monomial(a: int, b: int, coeff=1) -> "PolynomialObservable":
        return PolynomialObservable.from_dict({(a, b): QQi.of(coeff)})

    @staticmethod
    def zero() -> "PolynomialObservable":
        return PolynomialObservable()

    @staticmethod
    def one() -> "PolynomialObservable":
        return PolynomialObservable.monomial(0, 0)

    # -- algebra -------------------------------------------------------------
    def table(self) -> dict[tuple[int, int], QQi]:
        return dict(self.terms)

    def __add__(self, other: "PolynomialObservable") -> "PolynomialObservable":
        out = self.table()
        for k, v in other.terms:
            out[k] = out.get(k, QQi()) + v
        return PolynomialObservable.from_dict(out)

    def __sub__(self, other: "PolynomialObservable") -> "PolynomialObservable":
        return self + (-other)

    def __neg__(self) -> "PolynomialObservable":
        return PolynomialObservable(tuple((k, -v) for k, v in self.terms))

    def __mul__(self, other: "PolynomialObservable") -> "PolynomialObservable":
        out: dict[tuple[int, int], QQi] = {}
        for (a1, b1), c1 in self.terms:
            for (a2, b2), c2 in other.terms:
                k = (a1 + a2, b1 + b2)
                out[k] = out.get(k, QQi()) + c1 * c2
        return PolynomialObservable.from_dict(out)

    def scale(self, c: QQi) -> "PolynomialObservable":
        return PolynomialObservable.from_dict({k: c * v for k, v in self.terms})

    def diff(self, dq: int, dp: int) -> "PolynomialObservable":
        out: dict[tuple[int, int], QQi] = {}
        for (a, b), c in self.terms:
            if a < dq or b < dp:
                continue
            fac = Fraction(1)
            for j in range(dq):
                fac *= a - j
            for j in range(dp):
                fac *= b - j
            out[(a - dq, b - dp)] = out.get((a - dq, b - dp), QQi()) + c.scale(fac)
        return PolynomialObservable.from_dict(out)

    def conjugate(self) -> "PolynomialObservable":
        return PolynomialObservable(tuple((k, v.conjugate()) for k, v in self.terms))

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def degree(self) -> int:
        return max((a + b for (a, b), _ in self.terms), default=0)

    @property
    def momentum_degree(self) -> int:
        return max((b for (_, b), _ in self.terms), default=0)

    @property
    def is_real(self) -> bool:
        return all(v.im == 0 for _, v in self.terms)

    def eval(self, q: float, p: float) -> complex:
        out = 0.0 + 0.0j
        for (a, b), c in self.terms:
            out += complex(c) * q**a * p**b
        return out

    def to_observable(self) -> Observable:
        if not self.is_real:
            raise ValueError("geometry observables require real coefficients")
        return Observable.from_coeffs({k: float(v.re) for k, v in self.terms})

    def __str__(self) -> str:
        parts = {}
        for (a, b), c in self.terms:
            parts[(a, b)] = float(c.re) if c.im == 0 else complex(c)
        return format_monomials(parts)


@dataclass(frozen=True)
class FormalSeries:
    """Power series in h, truncated at ``order``, with polynomial coefficients."""

    order: int
    coeffs: tuple[PolynomialObservable, ...]

    @staticmethod
    def lift(f, order: int) -> "FormalSeries":
        if isinstance(f, FormalSeries):
            if f.order == order:
                return f
            padded = list(f.coeffs[: order + 1])
            padded += [PolynomialObservable.zero()] * (order + 1 - len(padded))
            return FormalSeries(order, tuple(padded))
        coeffs = [f] + [PolynomialObservable.zero()] * order
        return FormalSeries(order, tuple(coeffs))

    def __add__(self, other: "FormalSeries") -> "FormalSeries":
        assert self.order == other.order
        return FormalSeries(
            self.order, tuple(a + b for a, b in zip(self.coeffs, other.coeffs))
        )

    def __sub__(self, other: "FormalSeries") -> "FormalSeries":
        assert self.order == other.order
        return FormalSeries(
            self.order, tuple(a - b for a, b in zip(self.coeffs, other.coeffs))
        )

    @property
    def is_zero(self) -> bool:
        return all(c.is_zero for c in self.coeffs)

    def at(self, h: float) -> PolynomialObservable:
        """Sum the series at a numeric h (coefficients become inexact)."""
        out: dict[tuple[int, int], complex] = {}
        for n, poly in enumerate(self.coeffs):
            for k, c in poly.terms:
                out[k] = out.get(k, 0.0 + 0.0j) + complex(c) * h**n
        table = {}
        for k, v in out.items():
            re = Fraction(v.real).limit_denominator(10**15)
            im = Fraction(v.imag).limit_denominator(10**15)
            if re or im:
                table[k] = QQi(re, im)
        return PolynomialObservable.from_dict(table)

    def __str__(self) -> str:
        return " + ".join(
            f"h^{n} ({poly})" for n, poly in enumerate(self.coeffs) if not poly.is_zero
        ) or "0"


def _bidiff(f: PolynomialObservable, g: PolynomialObservable, n: int) -> PolynomialObservable:
    """Lambda^n(f, g) = sum_k C(n,k) (-1)^(n-k) d_q^k d_p^(n-k) f  d_p^k d_q^(n-k) g."""
    out = PolynomialObservable.zero()
    for k in range(n + 1):
        sign = Fraction((-1) ** (n - k) * math.comb(n, k))
        term = (f.diff(k, n - k) * g.diff(n - k, k)).scale(QQi(sign))
        out = out + term
    return out


def moyal_product(f, g, order: int) -> FormalSeries:
    """Star product truncated at h^order (order <= 8)."""
    if order > MAX_ORDER:
        raise OrderOverflow(f"truncation order {order} exceeds {MAX_ORDER}")
    fs = FormalSeries.lift(f, order)
    gs = FormalSeries.lift(g, order)
    out = [PolynomialObservable.zero() for _ in range(order + 1)]
    # (i/2)^n / n! as an exact complex rational
    for r in range(order + 1):
        if fs.coeffs[r].is_zero:
            continue
        for s in range(order + 1 - r):
            if gs.coeffs[s].is_zero:
                continue
            half_i = _ONE
            for n in range(order + 1 - r - s):
                coeff = half_i.scale(Fraction(1, math.factorial(n)))
                term = _bidiff(fs.coeffs[r], gs.coeffs[s], n).scale(coeff)
                out[r + s + n] = out[r + s + n] + term
                half_i = half_i * _I.scale(Fraction(1, 2))
    return FormalSeries(order, tuple(out))


def associativity_defect(f, g, k, order: int) -> FormalSeries:
    """(f*g)*k - f*(g*k), exactly; the zero series iff associative."""
    left = moyal_product(moyal_product(f, g, order), k, order)
    right = moyal_product(f, moyal_product(g, k, order), order)
    return left - right


def star_conjugate(f) -> FormalSeries:
    """Coefficient conjugation combined with the h -> -h-like grading flip."""
    if isinstance(f, FormalSeries):
        return FormalSeries(f.order, tuple(c.conjugate() for c in f.coeffs))
    return f.conjugate()


# ---------------------------------------------------------------------------
# Operator correspondence
# ---------------------------------------------------------------------------

def weyl_operator_of(
    f: PolynomialObservable | FormalSeries, grid: GridSpec, h: float
) -> np.ndarray:
    """Symmetric-ordered grid operator of a polynomial (momentum degree <= 2)."""
    if isinstance(f, FormalSeries):
        f = f.at(h)
    if f.momentum_degree > 2:
        raise UnsupportedOrdering(
            f"momentum degree {f.momentum_degree} > 2 is not representable"
        )
    qs = grid.qs
    n = grid.points
    op = np.zeros((n, n), dtype=complex)
    p1 = momentum_matrix(grid, h, 1)
    by_power: dict[int, np.ndarray] = {}
    for (a, b), c in f.terms:
        by_power.setdefault(b, np.zeros(n, dtype=complex))
        by_power[b] = by_power[b] + complex(c) * qs**a
    for b, cq in sorted(by_power.items()):
        if np.max(np.abs(cq.imag)) == 0.0:
            op += weyl_monomial_matrix(cq.real, b, grid, h, p_mat=p1)
        else:
            op += weyl_monomial_matrix(cq.real, b, grid, h, p_mat=p1)
            op += 1j * weyl_monomial_matrix(cq.imag, b, grid, h, p_mat=p1)
    return op


# ---------------------------------------------------------------------------
# Matrix elements and the homomorphism check
# ---------------------------------------------------------------------------

def semiclassical_matrix_element(
    f: PolynomialObservable | FormalSeries,
    sys1: tuple[Observable, float],
    sys2: tuple[Observable, float],
    lam: ReferenceLagrangian,
    alpha: PrequantumForm = PrequantumForm(),
    h: float = 0.1,
    **overlap_kwargs,
) -> SemiclassicalAmplitude:
    """Overlap with every intersection weighted by f at that point."""
    if isinstance(f, FormalSeries):
        f = f.at(h)

    def weight(c: PhasePoint) -> complex:
        return f.eval(c.q, c.p)

    return overlap(sys1, sys2, lam, alpha, h, weight_fn=weight, **overlap_kwargs)


def matrix_element_kernel(
    f: PolynomialObservable | FormalSeries,
    fixed_sys: tuple[Observable, float],
    intermediate: Observable,
    lam: ReferenceLagrangian,
    alpha: PrequantumForm,
    h: float,
    fixed_slot: int,
) -> Callable[[float], SemiclassicalAmplitude]:
    if isinstance(f, FormalSeries):
        f = f.at(h)

    def weight(c: PhasePoint) -> complex:
        return f.eval(c.q, c.p)

    return overlap_kernel(
        fixed_sys, intermediate, lam, alpha, h, fixed_slot, weight_fn=weight
    )


def homomorphism_check(
    f: PolynomialObservable,
    g: PolynomialObservable,
    sys1: tuple[Observable, float],
    sys2: tuple[Observable, float],
    lam: ReferenceLagrangian,
    alpha: PrequantumForm,
    h: float,
    interval: tuple[float, float],
    order: int = 4,
    intermediate: Observable | None = None,
) -> dict:
    """Compare the matrix element of f*g against the composed product kernel.

    The left side inserts the truncated star product into a single overlap;
    the right side composes the two matrix-element kernels through the
    position fibration by stationary phase.  Reported are the modulus
    deviation and the phase offset modulo the quarter-turn composition
    factor.
    """
    intermediate = Observable.position() if intermediate is None else intermediate
    star = moyal_product(f, g, order)
    lhs = semiclassical_matrix_element(star, sys1, sys2, lam, alpha, h)
    # star corrections are themselves O(h); the strict leading-order identity
    # weighs the single overlap with the pointwise product, which the
    # stationary-phase composition reproduces exactly on quadratic data
    lhs_leading = semiclassical_matrix_element(f * g, sys1, sys2, lam, alpha, h)
    u20 = matrix_element_kernel(f, sys2, intermediate, lam, alpha, h, fixed_slot=2)
    u01 = matrix_element_kernel(g, sys1, intermediate, lam, alpha, h, fixed_slot=1)
    rhs = compose_kernels(u20, u01, h, interval)
    mod_dev = abs(abs(rhs.value) - abs(lhs.value)) / max(abs(lhs.value), 1e-300)
    lead_dev = abs(abs(rhs.value) - abs(lhs_leading.value)) / max(
        abs(lhs_leading.value), 1e-300
    )
    phase = float(np.angle(rhs.value / lhs.value)) if lhs.value != 0 else float("nan")
    quarter = math.pi / 4
    phase_mod = (phase + quarter / 2) % quarter - quarter / 2
    return {
        "lhs": lhs.value,
        "lhs_leading": lhs_leading.value,
        "rhs": rhs.value,
        "modulus_deviation": float(mod_dev),
        "leading_deviation": float(lead_dev),
        "phase_offset": phase,
        "phase_mod_quarter": float(phase_mod),
    }
