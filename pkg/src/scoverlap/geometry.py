"""Symplectic geometry of the phase plane.

Observables (Hamiltonians with analytic derivatives), level-curve fibers
traced by arclength-normalized Hamiltonian flow, fiber intersections, and
line integrals of the prequantization one-form ``p dq + df``.

Conventions, fixed once for the whole package:
  * symplectic form  dq ^ dp,
  * Poisson bracket  {f, g} = f_q g_p - f_p g_q   (so {q, p} = 1),
  * Hamiltonian flow direction (H_p, -H_q); closed fibers are traversed in
    flow direction and their loop action equals the enclosed area.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.integrate import IntegrationWarning, quad, solve_ivp

from .errors import (
    NoReferencePoint,
    PointNotOnFiber,
    SingularFiber,
    TangentialIntersection,
)
from .monomials import format_monomials, parse_monomials, to_float_table

CURVE_TOL = 1e-9
QUAD_TOL = 1e-8
NEWTON_TOL = 1e-10
TRANS_TOL = 1e-6
DEDUP_RADIUS = 1e-6
DOMAIN_BOUND = 8.0

_PROJ_TOL = 1e-14
_GRAD_FLOOR = 1e-9


class PhasePoint(NamedTuple):
    q: float
    p: float


@dataclass(frozen=True)
class Observable:
    """A Hamiltonian on the phase plane with analytic partials through order 2.

    ``kind`` is one of ``"polynomial"`` (coefficient table over monomials
    q^a p^b), ``"pendulum"`` (p^2/2 - cos q), or ``"sum"`` of parts.
    """

    kind: str
    coeffs: tuple[tuple[tuple[int, int], float], ...] = ()
    parts: tuple["Observable", ...] = ()

    # -- constructors -------------------------------------------------------
    @staticmethod
    def from_coeffs(table: dict[tuple[int, int], float]) -> "Observable":
        items = tuple(sorted((k, float(v)) for k, v in table.items() if v != 0.0))
        return Observable(kind="polynomial", coeffs=items)

    @staticmethod
    def from_text(text: str) -> "Observable":
        if text.strip() == "pendulum":
            return Observable.pendulum()
        return Observable.from_coeffs(to_float_table(parse_monomials(text)))

    @staticmethod
    def pendulum() -> "Observable":
        return Observable(kind="pendulum")

    @staticmethod
    def position() -> "Observable":
        return Observable.from_coeffs({(1, 0): 1.0})

    @staticmethod
    def momentum() -> "Observable":
        return Observable.from_coeffs({(0, 1): 1.0})

    @staticmethod
    def harmonic(omega: float = 1.0, center_q: float = 0.0) -> "Observable":
        """((p)^2 + omega^2 (q - center_q)^2) / 2, expanded."""
        w2 = omega * omega
        return Observable.from_coeffs(
            {
                (0, 2): 0.5,
                (2, 0): 0.5 * w2,
                (1, 0): -w2 * center_q,
                (0, 0): 0.5 * w2 * center_q * center_q,
            }
        )

    @staticmethod
    def linear(theta: float) -> "Observable":
        """q cos(theta) + p sin(theta)."""
        return Observable.from_coeffs({(1, 0): math.cos(theta), (0, 1): math.sin(theta)})

    def __add__(self, other: "Observable") -> "Observable":
        return Observable(kind="sum", parts=(self, other))

    # -- evaluation ---------------------------------------------------------
    def _deriv_table(self, dq_order: int, dp_order: int):
        key = ("_tab", dq_order, dp_order)
        tab = self.__dict__.get(key)
        if tab is None:
            items = []
            for (a, b), c in self.coeffs:
                if a < dq_order or b < dp_order:
                    continue
                fac = c
                for j in range(dq_order):
                    fac *= a - j
                for j in range(dp_order):
                    fac *= b - j
                items.append((a - dq_order, b - dp_order, fac))
            tab = tuple(items)
            self.__dict__[key] = tab
        return tab

    def deriv(self, q, p, dq_order: int = 0, dp_order: int = 0):
        if isinstance(q, np.ndarray) or isinstance(p, np.ndarray):
            return self._deriv_array(q, p, dq_order, dp_order)
        if self.kind == "polynomial":
            out = 0.0
            for a, b, c in self._deriv_table(dq_order, dp_order):
                out += c * q**a * p**b
            return out
        if self.kind == "sum":
            return sum(part.deriv(q, p, dq_order, dp_order) for part in self.parts)
        if self.kind == "pendulum":
            key = (dq_order, dp_order)
            if key == (0, 0):
                return p * p / 2.0 - math.cos(q)
            if key == (1, 0):
                return math.sin(q)
            if key == (0, 1):
                return p
            if key == (2, 0):
                return math.cos(q)
            if key == (0, 2):
                return 1.0
            if key == (1, 1):
                return 0.0
            raise ValueError(f"derivative order {key} not supported")
        raise ValueError(f"unknown observable kind {self.kind!r}")

    def _deriv_array(self, q, p, dq_order: int, dp_order: int):
        q = np.asarray(q, dtype=float)
        p = np.asarray(p, dtype=float)
        if self.kind == "polynomial":
            out = np.zeros(np.broadcast(q, p).shape)
            for a, b, c in self._deriv_table(dq_order, dp_order):
                out = out + c * q**a * p**b
            return out
        if self.kind == "sum":
            return sum(part._deriv_array(q, p, dq_order, dp_order) for part in self.parts)
        if self.kind == "pendulum":
            key = (dq_order, dp_order)
            zero = np.zeros(np.broadcast(q, p).shape)
            if key == (0, 0):
                return p * p / 2.0 - np.cos(q) + zero
            if key == (1, 0):
                return np.sin(q) + zero
            if key == (0, 1):
                return p + zero
            if key == (2, 0):
                return np.cos(q) + zero
            if key == (0, 2):
                return 1.0 + zero
            if key == (1, 1):
                return zero
            raise ValueError(f"derivative order {key} not supported")
        raise ValueError(f"unknown observable kind {self.kind!r}")

    def value(self, q, p):
        return self.deriv(q, p, 0, 0)

    def dq(self, q, p):
        return self.deriv(q, p, 1, 0)

    def dp(self, q, p):
        return self.deriv(q, p, 0, 1)

    def gradient(self, x: PhasePoint) -> tuple[float, float]:
        return float(self.dq(x[0], x[1])), float(self.dp(x[0], x[1]))

    def hessian(self, x: PhasePoint) -> np.ndarray:
        q, p = x
        hqq = float(self.deriv(q, p, 2, 0))
        hqp = float(self.deriv(q, p, 1, 1))
        hpp = float(self.deriv(q, p, 0, 2))
        return np.array([[hqq, hqp], [hqp, hpp]])

    # -- structure queries ---------------------------------------------------
    def coeff_table(self) -> dict[tuple[int, int], float]:
        if self.kind == "polynomial":
            return dict(self.coeffs)
        if self.kind == "sum":
            merged: dict[tuple[int, int], float] = {}
            for part in self.parts:
                for k, v in part.coeff_table().items():
                    merged[k] = merged.get(k, 0.0) + v
            return {k: v for k, v in merged.items() if v != 0.0}
        raise ValueError(f"{self.kind} observable has no coefficient table")

    @property
    def is_linear(self) -> bool:
        try:
            table = self.coeff_table()
        except ValueError:
            return False
        return all(a + b <= 1 for a, b in table)

    def momentum_decomposition(self) -> dict[int, Callable[[np.ndarray], np.ndarray]]:
        """Split H = sum_b c_b(q) p^b into momentum-power slices."""
        if self.kind == "pendulum":
            return {0: lambda qs: -np.cos(qs), 2: lambda qs: 0.5 * np.ones_like(qs)}
        if self.kind == "sum":
            out: dict[int, list] = {}
            for part in self.parts:
                for b, fn in part.momentum_decomposition().items():
                    out.setdefault(b, []).append(fn)
            return {
                b: (lambda qs, fns=tuple(fns): sum(f(qs) for f in fns))
                for b, fns in out.items()
            }
        slices: dict[int, dict[int, float]] = {}
        for (a, b), c in self.coeffs:
            slices.setdefault(b, {})[a] = c
        out = {}
        for b, qtab in slices.items():
            items = tuple(qtab.items())

            def fn(qs, items=items):
                qs = np.asarray(qs, dtype=float)
                return sum(c * qs**a for a, c in items)

            out[b] = fn
        return out

    def __str__(self) -> str:
        if self.kind == "pendulum":
            return "pendulum"
        return format_monomials(self.coeff_table())


def poisson_bracket(h1: Observable, h2: Observable, x: PhasePoint) -> float:
    """{H1, H2}(x) with the convention {q, p} = 1."""
    q, p = x
    return float(h1.dq(q, p) * h2.dp(q, p) - h1.dp(q, p) * h2.dq(q, p))


def _bracket_field(h1: Observable, h2: Observable, q, p):
    return h1.dq(q, p) * h2.dp(q, p) - h1.dp(q, p) * h2.dq(q, p)


def _bracket_gradient(h1: Observable, h2: Observable, x: PhasePoint) -> tuple[float, float]:
    """Gradient of {H1, H2}; needs second derivatives of both observables."""
    q, p = x
    d = lambda obs, a, b: float(obs.deriv(q, p, a, b))
    gq = (
        d(h1, 2, 0) * d(h2, 0, 1)
        + d(h1, 1, 0) * d(h2, 1, 1)
        - d(h1, 1, 1) * d(h2, 1, 0)
        - d(h1, 0, 1) * d(h2, 2, 0)
    )
    gp = (
        d(h1, 1, 1) * d(h2, 0, 1)
        + d(h1, 1, 0) * d(h2, 0, 2)
        - d(h1, 0, 2) * d(h2, 1, 0)
        - d(h1, 0, 1) * d(h2, 1, 1)
    )
    return gq, gp


@dataclass(frozen=True)
class PrequantumForm:
    """alpha = p dq + df with a scalar gauge function f (default 0).

    Only endpoint values of f enter line integrals: the exact df part of any
    segment integral is f(end) - f(start).
    """

    gauge: Observable | None = None

    def gauge_value(self, x: PhasePoint) -> float:
        if self.gauge is None:
            return 0.0
        return float(self.gauge.value(x[0], x[1]))


@dataclass(frozen=True)
class ReferenceLagrangian:
    """Reference Lagrangian given as a graph p = lam(q)."""

    lam: Observable

    @staticmethod
    def flat() -> "ReferenceLagrangian":
        return ReferenceLagrangian(Observable.from_coeffs({}))

    @staticmethod
    def line(slope: float, intercept: float = 0.0) -> "ReferenceLagrangian":
        return ReferenceLagrangian(
            Observable.from_coeffs({(1, 0): slope, (0, 0): intercept})
        )

    @staticmethod
    def from_text(text: str) -> "ReferenceLagrangian":
        return ReferenceLagrangian(Observable.from_text(text))

    def value(self, q) -> float:
        return self.lam.value(q, 0.0)

    def slope(self, q) -> float:
        return self.lam.dq(q, 0.0)


@dataclass(frozen=True)
class TraceOptions:
    domain: float = DOMAIN_BOUND
    n_samples: int = 600
    rtol: float = 1e-12
    atol: float = 1e-13
    max_arclength: float = 300.0
    curve_tol: float = CURVE_TOL


@dataclass(frozen=True)
class FiberCurve:
    """A traced level set {H = b} sampled along the Hamiltonian flow direction.

    Samples carry cumulative arclength, cumulative action of p dq, and flow
    time.  Closed curves wrap: the final sample coincides with the first, and
    ``period`` / ``loop_action`` hold the flow period and the loop integral
    of p dq (the enclosed area).
    """

    observable: Observable
    level: float
    qs: np.ndarray
    ps: np.ndarray
    arclength: np.ndarray
    action: np.ndarray
    time: np.ndarray
    closed: bool
    truncated: bool
    orientation: int = 1
    period: float | None = None
    loop_action: float | None = None
    curve_tol_check: float = 1e-6

    @property
    def total_arclength(self) -> float:
        return float(self.arclength[-1])

    def point(self, i: int) -> PhasePoint:
        return PhasePoint(float(self.qs[i]), float(self.ps[i]))

    def nearest_index(self, x: PhasePoint) -> int:
        d2 = (self.qs - x[0]) ** 2 + (self.ps - x[1]) ** 2
        return int(np.argmin(d2))

    def locate(self, x: PhasePoint) -> float:
        """Arclength parameter of the sample polyline point closest to ``x``."""
        i = self.nearest_index(x)
        best_s = float(self.arclength[i])
        best_d2 = (self.qs[i] - x[0]) ** 2 + (self.ps[i] - x[1]) ** 2
        for j0 in (i - 1, i):
            j1 = j0 + 1
            if j0 < 0 or j1 >= len(self.qs):
                continue
            aq, ap = self.qs[j0], self.ps[j0]
            bq, bp = self.qs[j1], self.ps[j1]
            dq, dp = bq - aq, bp - ap
            seg2 = dq * dq + dp * dp
            if seg2 == 0.0:
                continue
            t = ((x[0] - aq) * dq + (x[1] - ap) * dp) / seg2
            t = min(1.0, max(0.0, t))
            cq, cp = aq + t * dq, ap + t * dp
            d2 = (cq - x[0]) ** 2 + (cp - x[1]) ** 2
            if d2 < best_d2:
                best_d2 = d2
                best_s = float(
                    self.arclength[j0] + t * (self.arclength[j1] - self.arclength[j0])
                )
        return best_s

    curve_tol_check: float = 1e-6

    def scaffold(self, s_from: float, s_to: float) -> np.ndarray:
        """Polyline guide points covering the forward arc s_from -> s_to.

        On closed curves the arc wraps; returned points interpolate the sample
        chain (they guide chart quadrature, exact endpoints are supplied by
        the caller).
        """
        s = self.arclength
        total = self.total_arclength
        if self.closed:
            span = (s_to - s_from) % total
            if span == 0.0:
                span = total
            stops = [s_from + span]
            svals = [s_from]
            cur = s_from
            # walk sample grid forward, unwrapping
            idx = int(np.searchsorted(s, s_from % total, side="right"))
            offset = s_from - (s_from % total)
            while True:
                if idx >= len(s) - 1:
                    idx = 0
                    offset += total
                sv = s[idx] + offset
                if sv >= stops[0] - 1e-12:
                    break
                if sv > cur + 1e-12:
                    svals.append(sv)
                    cur = sv
                idx += 1
            svals.append(stops[0])
            pts = np.array([self._interp_point(v % total) for v in svals])
            return pts
        lo, hi = min(s_from, s_to), max(s_from, s_to)
        mask = (s > lo + 1e-12) & (s < hi - 1e-12)
        inner = np.stack([self.qs[mask], self.ps[mask]], axis=1)
        a = np.array(self._interp_point(lo))
        b = np.array(self._interp_point(hi))
        pts = np.vstack([a, inner, b])
        if s_to < s_from:
            pts = pts[::-1]
        return pts

    def _interp_point(self, sv: float) -> tuple[float, float]:
        s = self.arclength
        sv = min(max(sv, float(s[0])), float(s[-1]))
        i = int(np.searchsorted(s, sv, side="right")) - 1
        i = min(max(i, 0), len(s) - 2)
        ds = s[i + 1] - s[i]
        t = 0.0 if ds == 0 else (sv - s[i]) / ds
        return (
            float(self.qs[i] + t * (self.qs[i + 1] - self.qs[i])),
            float(self.ps[i] + t * (self.ps[i + 1] - self.ps[i])),
        )

    def to_csv(self, path) -> None:
        data = np.stack([self.qs, self.ps, self.arclength, self.action, self.time], axis=1)
        np.savetxt(path, data, delimiter=",", header="q,p,arclength,action,time", comments="")


# ---------------------------------------------------------------------------
# Newton utilities
# ---------------------------------------------------------------------------

def project_to_fiber(h: Observable, b: float, x: PhasePoint, tol: float = _PROJ_TOL) -> PhasePoint:
    """Pull a nearby point exactly onto {H = b} by Newton along the gradient."""
    q, p = float(x[0]), float(x[1])
    scale = max(1.0, abs(b))
    for _ in range(80):
        r = float(h.value(q, p)) - b
        if abs(r) <= tol * scale:
            return PhasePoint(q, p)
        gq, gp = float(h.dq(q, p)), float(h.dp(q, p))
        g2 = gq * gq + gp * gp
        if g2 < _GRAD_FLOOR**2:
            raise SingularFiber(f"gradient vanishes near ({q:.6g}, {p:.6g})")
        step = r / g2
        q -= gq * step
        p -= gp * step
    raise SingularFiber(f"projection onto level {b} did not converge from {tuple(x)}")


def _newton_intersection(
    h1: Observable, b1: float, h2: Observable, b2: float, guess: PhasePoint
) -> PhasePoint | None:
    q, p = float(guess[0]), float(guess[1])
    scale = max(1.0, abs(b1), abs(b2))
    for _ in range(60):
        f1 = float(h1.value(q, p)) - b1
        f2 = float(h2.value(q, p)) - b2
        if abs(f1) <= _PROJ_TOL * scale and abs(f2) <= _PROJ_TOL * scale:
            return PhasePoint(q, p)
        j11, j12 = float(h1.dq(q, p)), float(h1.dp(q, p))
        j21, j22 = float(h2.dq(q, p)), float(h2.dp(q, p))
        det = j11 * j22 - j12 * j21
        if abs(det) < 1e-14:
            return None
        dq = (-f1 * j22 + f2 * j12) / det
        dp = (-f2 * j11 + f1 * j21) / det
        q += dq
        p += dp
        if not (np.isfinite(q) and np.isfinite(p)):
            return None
    return None


@dataclass(frozen=True)
class IntersectionPoint:
    point: PhasePoint
    bracket: float
    branch_1: int = -1  # sample index on the first traced fiber, once known
    branch_2: int = -1


def locate_on_curves(
    ip: IntersectionPoint, curve1: "FiberCurve", curve2: "FiberCurve"
) -> IntersectionPoint:
    """Fill in the sample-list indices of an intersection on both fibers."""
    return IntersectionPoint(
        point=ip.point,
        bracket=ip.bracket,
        branch_1=curve1.nearest_index(ip.point),
        branch_2=curve2.nearest_index(ip.point),
    )


# ---------------------------------------------------------------------------
# Level-curve tracing
# ---------------------------------------------------------------------------

def _trace_direction(
    h: Observable, b: float, x0: PhasePoint, sign: float, opts: TraceOptions,
    dense: bool = True,
):
    """Integrate the arclength-normalized flow from x0; return solver output."""
    h_dq = h.dq
    h_dp = h.dp

    def rhs(s, y):
        q, p = y[0], y[1]
        gq = h_dq(q, p)
        gp = h_dp(q, p)
        norm = math.hypot(gq, gp)
        if norm < _GRAD_FLOOR:
            return (0.0, 0.0, 0.0, 0.0)
        vq = sign * gp / norm
        vp = -sign * gq / norm
        return (vq, vp, p * vq, 1.0 / norm)

    def singular(s, y):
        return math.hypot(h_dq(y[0], y[1]), h_dp(y[0], y[1])) - _GRAD_FLOOR

    singular.terminal = True

    def box_exit(s, y):
        return opts.domain - max(abs(y[0]), abs(y[1]))

    box_exit.terminal = True

    gq0 = h_dq(x0[0], x0[1])
    gp0 = h_dp(x0[0], x0[1])
    norm0 = math.hypot(gq0, gp0)
    v0 = (sign * gp0 / norm0, -sign * gq0 / norm0)

    r_act = 1e-3

    def left_seed(s, y):
        return math.hypot(y[0] - x0[0], y[1] - x0[1]) - r_act

    left_seed.terminal = True

    y0 = [x0[0], x0[1], 0.0, 0.0]
    sol_a = solve_ivp(
        rhs,
        (0.0, opts.max_arclength),
        y0,
        method="DOP853",
        rtol=opts.rtol,
        atol=opts.atol,
        events=(singular, box_exit, left_seed),
        dense_output=dense,
    )
    if sol_a.t_events[0].size:
        raise SingularFiber(
            f"gradient of {h} vanished while tracing level {b}"
        )
    if sol_a.t_events[1].size or not sol_a.t_events[2].size:
        return [sol_a], None, v0  # exited box (or stalled) before leaving seed ball

    s_start = float(sol_a.t_events[2][0])
    y_start = sol_a.y_events[2][0]

    def plane(s, y):
        return (y[0] - x0[0]) * v0[0] + (y[1] - x0[1]) * v0[1]

    plane.direction = 1.0
    plane.terminal = True

    chunks = [sol_a]
    closure = None
    s_cur, y_cur = s_start, y_start
    for _ in range(64):
        sol_b = solve_ivp(
            rhs,
            (s_cur, opts.max_arclength),
            y_cur,
            method="DOP853",
            rtol=opts.rtol,
            atol=opts.atol,
            events=(singular, box_exit, plane),
            dense_output=dense,
        )
        chunks.append(sol_b)
        if sol_b.t_events[0].size:
            raise SingularFiber(f"gradient of {h} vanished while tracing level {b}")
        if sol_b.t_events[2].size:
            s_ev = float(sol_b.t_events[2][0])
            y_ev = sol_b.y_events[2][0]
            if math.hypot(y_ev[0] - x0[0], y_ev[1] - x0[1]) <= 1e-6:
                closure = (s_ev, y_ev)
                break
            s_cur, y_cur = s_ev, y_ev  # distant plane crossing: keep going
            continue
        break  # box exit or ran out of arclength
    return chunks, closure, v0


def loop_data(
    h: Observable, b: float, seed: PhasePoint, opts: TraceOptions = TraceOptions()
) -> tuple[float, float]:
    """(loop action, flow period) of a closed fiber, without sampling it."""
    x0 = project_to_fiber(h, b, seed)
    if math.hypot(*h.gradient(x0)) < _GRAD_FLOOR:
        raise SingularFiber(f"gradient vanishes at seed {tuple(x0)}")
    _, closure, _ = _trace_direction(h, b, x0, +1.0, opts, dense=False)
    if closure is None:
        raise SingularFiber(f"fiber of {h} at {b} is not closed inside the box")
    _, y_end = closure
    return float(y_end[2]), float(y_end[3])


def _sample_solution(chunks, s_end: float, n: int):
    if not isinstance(chunks, list):
        chunks = [chunks]
    svals = np.linspace(0.0, s_end, n)
    out = np.empty((4, n))
    done = np.zeros(n, dtype=bool)
    for k, sol in enumerate(chunks):
        hi = float(sol.t[-1])
        mask = (~done) & (svals <= hi + 1e-12) if k < len(chunks) - 1 else ~done
        if mask.any():
            out[:, mask] = sol.sol(np.clip(svals[mask], float(sol.t[0]), hi))
        done |= mask
    return svals, out


def trace_level_curve(
    h: Observable, b: float, seed: PhasePoint, opts: TraceOptions = TraceOptions()
) -> FiberCurve:
    """Trace the connected component of {H = b} through ``seed``.

    The seed is first projected onto the level set.  Closed components are
    detected by return to the start; open components are truncated at the
    domain box and marked as such.
    """
    x0 = project_to_fiber(h, b, seed)
    gq, gp = h.gradient(x0)
    if math.hypot(gq, gp) < _GRAD_FLOOR:
        raise SingularFiber(f"gradient vanishes at seed {tuple(x0)}")
    if abs(float(h.value(*x0)) - b) > NEWTON_TOL * max(1.0, abs(b)):
        raise SingularFiber("seed projection failed to reach the level set")

    fwd, closure, _ = _trace_direction(h, b, x0, +1.0, opts)

    if closure is not None:
        closure_s = closure[0]
        n = opts.n_samples
        svals, y = _sample_solution(fwd, closure_s, n + 1)
        qs, ps, acts, ts = y
        # snap the closure point exactly onto the start
        qs[-1], ps[-1] = x0[0], x0[1]
        curve = FiberCurve(
            observable=h,
            level=b,
            qs=qs,
            ps=ps,
            arclength=svals,
            action=acts,
            time=ts,
            closed=True,
            truncated=False,
            period=float(ts[-1]),
            loop_action=float(acts[-1]),
        )
    else:
        # open component: also trace backwards, then stitch
        bwd, _, _ = _trace_direction(h, b, x0, -1.0, opts)
        s_fwd = float(fwd[-1].t[-1])
        s_bwd = float(bwd[-1].t[-1])
        n_f = max(2, int(opts.n_samples * s_fwd / max(s_fwd + s_bwd, 1e-12)))
        n_b = max(2, opts.n_samples - n_f)
        sv_f, y_f = _sample_solution(fwd, s_fwd, n_f)
        sv_b, y_b = _sample_solution(bwd, s_bwd, n_b)
        # backward samples describe the curve prior to the seed; reverse them
        qs = np.concatenate([y_b[0][::-1][:-1], y_f[0]])
        ps = np.concatenate([y_b[1][::-1][:-1], y_f[1]])
        # backward action samples are line integrals along the reversed path,
        # which is already the forward-cumulative value at points before the
        # seed; time and arclength flip sign
        acts = np.concatenate([y_b[2][::-1][:-1], y_f[2]])
        ts = np.concatenate([-y_b[3][::-1][:-1], y_f[3]])
        svals = np.concatenate([-sv_b[::-1][:-1], sv_f])
        svals = svals - svals[0]
        acts = acts - acts[0]
        ts = ts - ts[0]
        curve = FiberCurve(
            observable=h,
            level=b,
            qs=qs,
            ps=ps,
            arclength=svals,
            action=acts,
            time=ts,
            closed=False,
            truncated=True,
        )
    resid = np.max(np.abs(h.value(curve.qs, curve.ps) - b))
    if resid > opts.curve_tol * max(1.0, abs(b)):
        raise SingularFiber(
            f"traced samples drifted off the level set (residual {resid:.3e})"
        )
    return curve


# ---------------------------------------------------------------------------
# Intersections
# ---------------------------------------------------------------------------

def find_intersections(
    h1: Observable,
    b1: float,
    h2: Observable,
    b2: float,
    domain: float = DOMAIN_BOUND,
    grid_n: int = 400,
    trans_tol: float = TRANS_TOL,
) -> list[IntersectionPoint]:
    """All transversal points of {H1 = b1} and {H2 = b2} inside the box.

    Dense sign-pattern scan followed by 2D Newton polish and deduplication.
    Tangential roots (|{H1,H2}| <= trans_tol) raise
    :class:`TangentialIntersection` carrying the offending points.
    """
    axis = np.linspace(-domain, domain, grid_n + 1)
    Q, P = np.meshgrid(axis, axis, indexing="ij")
    f1 = np.asarray(h1.value(Q, P), dtype=float) - b1
    f2 = np.asarray(h2.value(Q, P), dtype=float) - b2

    def straddles(f):
        c = np.stack([f[:-1, :-1], f[1:, :-1], f[:-1, 1:], f[1:, 1:]])
        return (c.min(axis=0) <= 0.0) & (c.max(axis=0) >= 0.0)

    cells = straddles(f1) & straddles(f2)
    ii, jj = np.nonzero(cells)
    half = (axis[1] - axis[0]) / 2.0
    centers = [PhasePoint(axis[i] + half, axis[j] + half) for i, j in zip(ii, jj)]

    roots: list[PhasePoint] = []
    for c in centers:
        r = _newton_intersection(h1, b1, h2, b2, c)
        if r is None:
            continue
        if max(abs(r.q), abs(r.p)) > domain + 1e-9:
            continue
        if all((r.q - o.q) ** 2 + (r.p - o.p) ** 2 > DEDUP_RADIUS**2 for o in roots):
            roots.append(r)

    tangential = []
    points = []
    for r in roots:
        br = poisson_bracket(h1, h2, r)
        if abs(br) <= trans_tol:
            tangential.append(r)
        else:
            points.append(IntersectionPoint(point=r, bracket=br))
    if tangential:
        raise TangentialIntersection(
            f"{len(tangential)} tangential intersection(s) found "
            f"(|bracket| <= {trans_tol:g})",
            points=tangential,
        )
    points.sort(key=lambda ip: (ip.point.q, ip.point.p))
    return points


# ---------------------------------------------------------------------------
# Reference points
# ---------------------------------------------------------------------------

def _newton_on_lagrangian(
    h: Observable, b: float, lam: ReferenceLagrangian, q_guess: float
) -> float | None:
    q = float(q_guess)
    scale = max(1.0, abs(b))
    for _ in range(60):
        lv = float(lam.value(q))
        r = float(h.value(q, lv)) - b
        if abs(r) <= _PROJ_TOL * scale:
            return q
        d = float(h.dq(q, lv)) + float(h.dp(q, lv)) * float(lam.slope(q))
        if abs(d) < 1e-14:
            return None
        q -= r / d
        if not np.isfinite(q):
            return None
    return None


def lagrangian_intersections(
    curve: FiberCurve, lam: ReferenceLagrangian, trans_tol: float = TRANS_TOL
) -> list[PhasePoint]:
    """Transversal intersections of a traced fiber with the graph p = lam(q)."""
    phi = curve.ps - np.asarray(lam.value(curve.qs))
    hits: list[float] = []
    for i in range(len(phi) - 1):
        a, bb = phi[i], phi[i + 1]
        if a == 0.0:
            hits.append(float(curve.qs[i]))
        elif a * bb < 0.0:
            t = a / (a - bb)
            hits.append(float(curve.qs[i] + t * (curve.qs[i + 1] - curve.qs[i])))
    if phi[-1] == 0.0:
        hits.append(float(curve.qs[-1]))

    found: list[PhasePoint] = []
    h, b = curve.observable, curve.level
    for qg in hits:
        q = _newton_on_lagrangian(h, b, lam, qg)
        if q is None:
            continue
        pt = PhasePoint(q, float(lam.value(q)))
        det = float(h.dq(*pt)) + float(h.dp(*pt)) * float(lam.slope(q))
        if abs(det) <= trans_tol:
            continue
        if all((pt.q - o.q) ** 2 + (pt.p - o.p) ** 2 > DEDUP_RADIUS**2 for o in found):
            found.append(pt)
    return found


def reference_point(curve: FiberCurve, lam: ReferenceLagrangian) -> PhasePoint:
    """Deterministic reference point: the smallest-q (then smallest-p)
    transversal intersection of the fiber with the reference Lagrangian."""
    pts = lagrangian_intersections(curve, lam)
    if not pts:
        raise NoReferencePoint(
            f"fiber {curve.observable} = {curve.level} does not meet the "
            "reference Lagrangian transversally inside the domain"
        )
    pts.sort(key=lambda x: (x.q, x.p))
    return pts[0]


# ---------------------------------------------------------------------------
# Chart quadrature for fiber line integrals
# ---------------------------------------------------------------------------

def _solve_p(h: Observable, b: float, q: float, p_guess: float) -> float:
    p = float(p_guess)
    scale = max(1.0, abs(b))
    for _ in range(60):
        r = float(h.value(q, p)) - b
        if abs(r) <= _PROJ_TOL * scale:
            return p
        d = float(h.dp(q, p))
        if abs(d) < 1e-14:
            break
        p -= r / d
    raise PointNotOnFiber(f"cannot solve H({q:.6g}, p) = {b} near p = {p_guess:.6g}")


def _solve_q(h: Observable, b: float, p: float, q_guess: float) -> float:
    q = float(q_guess)
    scale = max(1.0, abs(b))
    for _ in range(60):
        r = float(h.value(q, p)) - b
        if abs(r) <= _PROJ_TOL * scale:
            return q
        d = float(h.dq(q, p))
        if abs(d) < 1e-14:
            break
        q -= r / d
    raise PointNotOnFiber(f"cannot solve H(q, {p:.6g}) = {b} near q = {q_guess:.6g}")


def chart_action(h: Observable, b: float, guide: np.ndarray) -> float:
    """Integral of p dq along the fiber arc described by ``guide``.

    ``guide`` is a polyline near (not necessarily on) {H = b}; its first and
    last entries are taken as the exact, already-on-fiber endpoints.  The arc
    is split into graph charts (p as a function of q, or q as a function of
    p, switching where |H_p| and |H_q| cross), each integrated by adaptive
    Gauss-Kronrod quadrature with Newton-polished integrand evaluations, so
    the result is accurate to machine precision and varies smoothly with b.
    """
    guide = np.asarray(guide, dtype=float)
    if len(guide) < 2:
        return 0.0
    gq = np.abs(np.asarray(h.dq(guide[:, 0], guide[:, 1]), dtype=float))
    gp = np.abs(np.asarray(h.dp(guide[:, 0], guide[:, 1]), dtype=float))
    chart = (gp < gq).astype(int)  # 0: q-chart (p(q)), 1: p-chart (q(p))

    # split guide into runs of constant chart; each junction becomes an
    # on-fiber subdivision node (any on-fiber point near the switch works,
    # the sub-integrals telescope)
    nodes: list[tuple[float, float]] = [tuple(guide[0])]
    charts: list[int] = []
    run_pts: list[list[tuple[float, float]]] = [[tuple(guide[0])]]
    cur = int(chart[0])
    for k in range(1, len(guide)):
        if int(chart[k]) != cur and k < len(guide) - 1:
            mid = project_to_fiber(h, b, PhasePoint(*guide[k]))
            nodes.append(tuple(mid))
            charts.append(cur)
            run_pts[-1].append(tuple(mid))
            run_pts.append([tuple(mid)])
            cur = int(chart[k])
        run_pts[-1].append(tuple(guide[k]))
    nodes.append(tuple(guide[-1]))
    charts.append(cur)

    total = 0.0
    for (xa, xb, ch, pts) in zip(nodes[:-1], nodes[1:], charts, run_pts):
        pts_arr = np.asarray(pts)
        if ch == 0:
            qa, qb = xa[0], xb[0]
            if qa == qb:
                continue
            order = np.argsort(pts_arr[:, 0])
            q_knots = pts_arr[order, 0]
            p_knots = pts_arr[order, 1]

            def integrand(q):
                p0 = float(np.interp(q, q_knots, p_knots))
                return _solve_p(h, b, float(q), p0)

            with warnings.catch_warnings():
                warnings.simplefilter("ignore", IntegrationWarning)
                val, _ = quad(integrand, qa, qb, epsabs=1e-13, epsrel=1e-13, limit=200)
            total += val
        else:
            pa, pb = xa[1], xb[1]
            boundary = xb[1] * xb[0] - xa[1] * xa[0]
            if pa == pb:
                total += boundary
                continue
            order = np.argsort(pts_arr[:, 1])
            p_knots = pts_arr[order, 1]
            q_knots = pts_arr[order, 0]

            def integrand(p):
                q0 = float(np.interp(p, p_knots, q_knots))
                return _solve_q(h, b, float(p), q0)

            with warnings.catch_warnings():
                warnings.simplefilter("ignore", IntegrationWarning)
                val, _ = quad(integrand, pa, pb, epsabs=1e-13, epsrel=1e-13, limit=200)
            total += boundary - val
    return total


def action_along_fiber(
    curve: FiberCurve,
    start: PhasePoint,
    end: PhasePoint,
    alpha: PrequantumForm = PrequantumForm(),
) -> float:
    """Integral of alpha = p dq + df along the fiber from start to end.

    Both endpoints must lie on the curve.  On closed curves the segment runs
    forward (flow direction) from start to end, so the result is the
    representative in [0, loop action) up to gauge; on open curves the signed
    integral along the curve is returned (negative when end precedes start).
    """
    scale = max(1.0, abs(curve.level))
    for pt in (start, end):
        resid = abs(float(curve.observable.value(pt[0], pt[1])) - curve.level)
        if resid > curve.curve_tol_check * scale:
            raise PointNotOnFiber(
                f"|H(x) - b| = {resid:.3e} at {tuple(pt)} is off the fiber"
            )
    a = project_to_fiber(curve.observable, curve.level, start)
    bpt = project_to_fiber(curve.observable, curve.level, end)
    s_a = curve.locate(a)
    s_b = curve.locate(bpt)
    gauge = alpha.gauge_value(bpt) - alpha.gauge_value(a)
    if curve.closed:
        guide = curve.scaffold(s_a, s_b)
        guide[0] = a
        guide[-1] = bpt
        return chart_action(curve.observable, curve.level, guide) + gauge
    sign = 1.0
    if s_b < s_a:
        a, bpt = bpt, a
        s_a, s_b = s_b, s_a
        sign = -1.0
    guide = curve.scaffold(s_a, s_b)
    guide[0] = a
    guide[-1] = bpt
    return sign * chart_action(curve.observable, curve.level, guide) + gauge
