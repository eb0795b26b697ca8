"""Plain-text monomial syntax for phase-plane polynomials.

The accepted syntax is a sum of monomial terms in ``q`` and ``p``, e.g.
``"2 q^2 p - 0.5 p^3"`` or ``"q + 1/2 p^2"``.  Coefficients may be integers,
decimals, or fractions; exponents are nonnegative integers.  Parsing is exact
(coefficients become :class:`fractions.Fraction`).
"""

from __future__ import annotations

import re
from fractions import Fraction

_TERM_RE = re.compile(
    r"""
    (?P<sign>[+-])?\s*
    (?P<coef>\d+(?:\.\d+)?(?:\s*/\s*\d+)?)?\s*
    (?P<vars>(?:[qp](?:\s*\^\s*\d+)?\s*\*?\s*)*)
    """,
    re.VERBOSE,
)

_VAR_RE = re.compile(r"([qp])(?:\s*\^\s*(\d+))?")


def parse_monomials(text: str) -> dict[tuple[int, int], Fraction]:
    """Parse monomial text into a ``{(q_power, p_power): coefficient}`` table."""
    table: dict[tuple[int, int], Fraction] = {}
    s = text.strip()
    if s in ("", "0"):
        return table
    pos = 0
    first = True
    while pos < len(s):
        m = _TERM_RE.match(s, pos)
        if m is None or m.end() == pos:
            raise ValueError(f"cannot parse monomial text at: {s[pos:]!r}")
        sign, coef, vars_part = m.group("sign"), m.group("coef"), m.group("vars")
        if sign is None and not first:
            raise ValueError(f"missing +/- between terms near: {s[pos:]!r}")
        if coef is None and not vars_part.strip():
            raise ValueError(f"empty term in monomial text near: {s[pos:]!r}")
        c = Fraction(coef.replace(" ", "")) if coef else Fraction(1)
        if sign == "-":
            c = -c
        a = b = 0
        for vm in _VAR_RE.finditer(vars_part):
            power = int(vm.group(2)) if vm.group(2) else 1
            if vm.group(1) == "q":
                a += power
            else:
                b += power
        key = (a, b)
        table[key] = table.get(key, Fraction(0)) + c
        pos = m.end()
        first = False
    return {k: v for k, v in table.items() if v != 0}


def format_monomials(table: dict[tuple[int, int], object]) -> str:
    """Render a coefficient table back to the plain-text monomial syntax."""
    if not table:
        return "0"
    keys = sorted(table, key=lambda k: (-(k[0] + k[1]), -k[0]))
    parts = []
    for a, b in keys:
        c = table[(a, b)]
        if isinstance(c, float) and c == int(c):
            c = int(c)
        mono = " ".join(
            ([f"q^{a}" if a > 1 else "q"] if a else [])
            + ([f"p^{b}" if b > 1 else "p"] if b else [])
        )
        if isinstance(c, complex):
            term = f"({c}) " + mono if mono else f"({c})"
            parts.append(("+ " if parts else "") + term)
            continue
        negative = c < 0
        mag = -c if negative else c
        coef_txt = "" if (mag == 1 and mono) else str(mag) + (" " if mono else "")
        term = coef_txt + mono
        if not parts:
            parts.append(("-" if negative else "") + term)
        else:
            parts.append(("- " if negative else "+ ") + term)
    return " ".join(parts)


def to_float_table(table: dict[tuple[int, int], Fraction]) -> dict[tuple[int, int], float]:
    return {k: float(v) for k, v in table.items()}
