"""Leading-order semiclassical amplitudes from fiber-intersection data.

The overlap of two eigen-half-densities is assembled as a sum over the
transversal intersections of the two level curves: each point contributes
``|hess|^(1/2) exp(i S / h + i pi mu / 2)`` with

  * ``S``     the difference of prequantization-form integrals along the two
              fibers, from the reference points (fiber cap Lambda) to the
              intersection, taken in flow direction,
  * ``mu``    the signed count of tangencies between the second fiber and the
              first fibration along that path (turning-point index),
  * ``hess``  the mixed second derivative of S in the two level labels,
              computed by central finite differences and cross-checked
              against the transversality bracket,

all behind an overall ``(2 pi h)^(-1/2)`` with unit constant.  Transition
probabilities square this sum, cyclic amplitudes chain it around a loop of
fibrations, and kernels compose by one-dimensional stationary phase.
"""

from __future__ import annotations

import cmath
import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import (
    CausticNearby,
    DegenerateStationaryPoint,
    DoubleRoot,
    HessianCrossCheck,
    LevelSkipped,
    NonMonotoneAction,
    NoReferencePoint,
    SingularFiber,
    TangencyAtEndpoint,
)
from .geometry import (
    DOMAIN_BOUND,
    TRANS_TOL,
    FiberCurve,
    IntersectionPoint,
    Observable,
    PhasePoint,
    PrequantumForm,
    ReferenceLagrangian,
    TraceOptions,
    _bracket_gradient,
    _newton_intersection,
    _newton_on_lagrangian,
    chart_action,
    find_intersections,
    locate_on_curves,
    loop_data,
    poisson_bracket,
    project_to_fiber,
    reference_point,
    trace_level_curve,
)

FD_STEP = 1e-3  # base step; the cross stencil is Richardson-extrapolated
HESS_TOL = 1e-6
BS_TOL = 1e-9
HESS_CHECK_TOL = 1e-4

_BS_TRACE = TraceOptions(n_samples=160)


# ---------------------------------------------------------------------------
# Maslov counting
# ---------------------------------------------------------------------------

def _tangency_newton(
    transverse: Observable, h2: Observable, b2: float, guess: PhasePoint
) -> PhasePoint | None:
    """Polish a point with H2 = b2 and {H1, H2} = 0."""
    q, p = float(guess[0]), float(guess[1])
    for _ in range(60):
        f1 = float(h2.value(q, p)) - b2
        f2 = poisson_bracket(transverse, h2, PhasePoint(q, p))
        if abs(f1) < 1e-13 * max(1.0, abs(b2)) and abs(f2) < 1e-12:
            return PhasePoint(q, p)
        j11, j12 = float(h2.dq(q, p)), float(h2.dp(q, p))
        j21, j22 = _bracket_gradient(transverse, h2, PhasePoint(q, p))
        det = j11 * j22 - j12 * j21
        if abs(det) < 1e-14:
            return None
        q += (-f1 * j22 + f2 * j12) / det
        p += (-f2 * j11 + f1 * j21) / det
    return None


def _crossing_sign(
    transverse: Observable, h2: Observable, x: PhasePoint, sigma: float
) -> int:
    """Sign of one tangency crossing, traversed with direction ``sigma``
    relative to the flow of ``h2``.

    The tangent line of the fiber rotates through the transverse fibration's
    fiber direction; a clockwise passage counts +1.  In bracket terms the
    sign is -sigma * sign(d{H1,H2}/ds) * sign(X1 . X2), which for parallel
    tangents reduces to +1 when the bracket passes from positive to negative
    along the flow.
    """
    gq, gp = _bracket_gradient(transverse, h2, x)
    x2 = (float(h2.dp(*x)), -float(h2.dq(*x)))
    x1 = (float(transverse.dp(*x)), -float(transverse.dq(*x)))
    dbeta = gq * x2[0] + gp * x2[1]
    dot = x1[0] * x2[0] + x1[1] * x2[1]
    s = -sigma * math.copysign(1.0, dbeta) * math.copysign(1.0, dot)
    return int(s)


def _maslov_over_guide(
    curve: FiberCurve,
    guide: np.ndarray,
    transverse: Observable,
    sigma: float,
    trans_tol: float,
    endpoint_check: bool = True,
) -> int:
    h2, b2 = curve.observable, curve.level
    beta = np.asarray(
        transverse.dq(guide[:, 0], guide[:, 1]) * h2.dp(guide[:, 0], guide[:, 1])
        - transverse.dp(guide[:, 0], guide[:, 1]) * h2.dq(guide[:, 0], guide[:, 1]),
        dtype=float,
    )
    if endpoint_check and (abs(beta[0]) <= trans_tol or abs(beta[-1]) <= trans_tol):
        raise TangencyAtEndpoint(
            "transversality bracket vanishes at a segment endpoint"
        )
    total = 0
    signs = np.sign(beta)
    n = len(beta)
    crossing_cells = set()
    i = 0
    while i < n - 1:
        if signs[i] == 0:
            i += 1
            continue
        j = i + 1
        while j < n and signs[j] == 0:
            j += 1
        if j >= n:
            break
        if signs[j] != signs[i]:
            crossing_cells.update(range(i, j))
            mid = PhasePoint(*(0.5 * (guide[i] + guide[j])))
            tp = _tangency_newton(transverse, h2, b2, mid)
            if tp is None:
                tp = mid
            total += _crossing_sign(transverse, h2, tp, sigma)
        i = j
    # interior dips of |beta| to ~0 without a sign change: touch points
    mags = np.abs(beta)
    for k in range(1, n - 1):
        if (
            mags[k] <= trans_tol
            and mags[k] <= mags[k - 1]
            and mags[k] <= mags[k + 1]
            and not ({k - 1, k} & crossing_cells)
        ):
            warnings.warn(
                "bracket touches zero without sign change; counted 0",
                DoubleRoot,
            )
            break
    return total


def maslov_segment(
    curve: FiberCurve,
    start: PhasePoint,
    end: PhasePoint,
    transverse: Observable,
    trans_tol: float = TRANS_TOL,
) -> int:
    """Signed tangency count along the fiber segment from start to end.

    On closed curves the segment runs forward in flow direction (wrapping);
    on open curves it runs along the curve with the orientation implied by
    the endpoints.
    """
    a = project_to_fiber(curve.observable, curve.level, start)
    b = project_to_fiber(curve.observable, curve.level, end)
    s_a, s_b = curve.locate(a), curve.locate(b)
    if curve.closed or s_b >= s_a:
        guide = curve.scaffold(s_a, s_b)
        guide[0], guide[-1] = a, b
        return _maslov_over_guide(curve, guide, transverse, +1.0, trans_tol)
    guide = curve.scaffold(s_b, s_a)[::-1].copy()
    guide[0], guide[-1] = a, b
    return _maslov_over_guide(curve, guide, transverse, -1.0, trans_tol)


def maslov_loop_index(curve: FiberCurve, transverse: Observable) -> int:
    """Tangency index of a full closed fiber (starts at maximal |bracket|)."""
    if not curve.closed:
        raise ValueError("loop index requested for an open fiber")
    beta = np.abs(
        np.asarray(
            transverse.dq(curve.qs, curve.ps) * curve.observable.dp(curve.qs, curve.ps)
            - transverse.dp(curve.qs, curve.ps)
            * curve.observable.dq(curve.qs, curve.ps),
            dtype=float,
        )
    )
    s0 = float(curve.arclength[int(np.argmax(beta))])
    guide = curve.scaffold(s0, s0)
    return _maslov_over_guide(
        curve, guide, transverse, +1.0, TRANS_TOL, endpoint_check=False
    )


# ---------------------------------------------------------------------------
# Bohr-Sommerfeld levels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BSLevel:
    n: int
    b: float
    loop_action: float
    loop_maslov: int


def _seed_on_level(h_obs: Observable, b: float, domain: float) -> PhasePoint:
    for axis in ("q", "p"):
        ts = np.linspace(-domain, domain, 4001)
        vals = (
            np.asarray(h_obs.value(ts, 0.0 * ts), dtype=float)
            if axis == "q"
            else np.asarray(h_obs.value(0.0 * ts, ts), dtype=float)
        ) - b
        sign = np.sign(vals)
        crossing = (sign[:-1] * sign[1:] < 0) | (vals[:-1] == 0.0)
        hits = np.nonzero(crossing)[0]
        if vals[-1] == 0.0:
            hits = np.append(hits, len(vals) - 2)
        if hits.size:
            # crossing closest to the origin picks the principal component
            # (periodic potentials repeat their wells across the box)
            i = int(hits[np.argmin(np.abs(ts[hits]))])
            dv = vals[i + 1] - vals[i]
            t = float(ts[i] if dv == 0 else ts[i] - vals[i] * (ts[i + 1] - ts[i]) / dv)
            return PhasePoint(t, 0.0) if axis == "q" else PhasePoint(0.0, t)
    raise SingularFiber(f"no seed found on level {b}")


def bohr_sommerfeld_levels(
    h_obs: Observable,
    h: float,
    b_range: tuple[float, float],
    transverse: Observable | None = None,
    domain: float = DOMAIN_BOUND,
    probes: int = 17,
) -> list[BSLevel]:
    """Solve loop-action(b) = 2 pi h (n + mu/4) on a monotone closed family."""
    transverse = Observable.position() if transverse is None else transverse
    b_lo, b_hi = b_range
    cache: dict[float, float] = {}
    loop_maslov: int | None = None

    def loop_action(b: float) -> float:
        if b in cache:
            return cache[b]
        seed = _seed_on_level(h_obs, b, domain)
        nonlocal loop_maslov
        if loop_maslov is None:
            curve = trace_level_curve(h_obs, b, seed, _BS_TRACE)
            if not curve.closed:
                raise SingularFiber(f"fiber at {b} is not closed")
            loop_maslov = maslov_loop_index(curve, transverse)
            cache[b] = float(curve.loop_action)
            return cache[b]
        act, _ = loop_data(h_obs, b, seed, _BS_TRACE)
        cache[b] = act
        return act

    probe_bs, probe_as = [], []
    for b in np.linspace(b_lo, b_hi, probes):
        try:
            probe_as.append(loop_action(float(b)))
            probe_bs.append(float(b))
        except SingularFiber:
            warnings.warn(f"level {b:.6g} skipped: no closed fiber", LevelSkipped)
    if len(probe_bs) < 2:
        raise SingularFiber("fewer than two closed levels in the range")
    diffs = np.diff(probe_as)
    if not (np.all(diffs > 0) or np.all(diffs < 0)):
        raise NonMonotoneAction(
            "loop action is not monotone on the requested range"
        )
    mu = loop_maslov
    lo_a, hi_a = min(probe_as), max(probe_as)
    n_min = math.ceil(lo_a / (2 * math.pi * h) - mu / 4.0 - 1e-12)
    n_max = math.floor(hi_a / (2 * math.pi * h) - mu / 4.0 + 1e-12)
    levels = []
    for n in range(max(n_min, 0), n_max + 1):
        target = 2 * math.pi * h * (n + mu / 4.0)
        # bracket from the probe grid
        k = int(np.searchsorted(probe_as, target)) if diffs[0] > 0 else None
        if diffs[0] > 0:
            k = min(max(k, 1), len(probe_bs) - 1)
            blo, bhi = probe_bs[k - 1], probe_bs[k]
        else:
            rev_as = probe_as[::-1]
            k = int(np.searchsorted(rev_as, target))
            k = min(max(k, 1), len(probe_bs) - 1)
            bhi = probe_bs[::-1][k]
            blo = probe_bs[::-1][k - 1]
            blo, bhi = min(blo, bhi), max(blo, bhi)
        b_n = brentq(
            lambda b: loop_action(b) - target, blo, bhi, xtol=1e-13, rtol=8.9e-16
        )
        act = loop_action(b_n)
        if abs(act - target) > BS_TOL:
            raise NonMonotoneAction(
                f"quantization condition missed at n={n}: residual {act - target:.3e}"
            )
        levels.append(BSLevel(n=n, b=float(b_n), loop_action=act, loop_maslov=mu))
    return levels


# ---------------------------------------------------------------------------
# Overlap amplitudes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OverlapTerm:
    point: PhasePoint
    bracket: float
    action: float
    maslov: int
    hessian_det: float
    hessian_bracket_dev: float
    weight: complex
    contribution: complex


@dataclass(frozen=True)
class SemiclassicalAmplitude:
    h: float
    terms: tuple[OverlapTerm, ...]
    prefactor: complex
    value: complex
    convention: dict
    curve1: FiberCurve | None = None
    curve2: FiberCurve | None = None
    x1: PhasePoint | None = None
    x2: PhasePoint | None = None

    def term_dump(self) -> list[dict]:
        return [
            {
                "q": t.point.q,
                "p": t.point.p,
                "action": t.action,
                "maslov": t.maslov,
                "hessian_det": t.hessian_det,
                "bracket": t.bracket,
                "re": t.contribution.real,
                "im": t.contribution.imag,
            }
            for t in self.terms
        ]


def _arc_action(
    curve: FiberCurve,
    level: float,
    a: PhasePoint,
    b: PhasePoint,
    s_a: float,
    s_b: float,
) -> float:
    """p dq integral from a to b along the (possibly level-shifted) fiber.

    The traced curve provides the homotopy scaffold; the endpoints are exact
    points on {H = level}, which may differ from the trace level by a finite
    difference step.  Closed curves integrate forward (wrapping), open
    curves signed along the curve.
    """
    h_obs = curve.observable
    if curve.closed or s_b >= s_a:
        guide = curve.scaffold(s_a, s_b)
        guide[0], guide[-1] = a, b
        return chart_action(h_obs, level, guide)
    guide = curve.scaffold(s_b, s_a)
    guide[0], guide[-1] = b, a
    return -chart_action(h_obs, level, guide)


@dataclass(frozen=True)
class _PairGeometry:
    h1: Observable
    b1: float
    h2: Observable
    b2: float
    lam: ReferenceLagrangian
    alpha: PrequantumForm
    curve1: FiberCurve
    curve2: FiberCurve
    x1: PhasePoint
    x2: PhasePoint
    s_x1: float
    s_x2: float

    def action_at(
        self,
        c_anchor: PhasePoint,
        s_c1: float,
        s_c2: float,
        db1: float,
        db2: float,
        include_gauge: bool = True,
    ) -> float:
        """S(b1 + db1, b2 + db2) on the branch anchored at ``c_anchor``.

        The gauge part f(x2) - f(x1) is separable in (b1, b2), so the mixed
        finite-difference stencil omits it (its cross derivative vanishes
        identically, and keeping it would only inject rounding noise).
        """
        b1p, b2p = self.b1 + db1, self.b2 + db2
        c = _newton_intersection(self.h1, b1p, self.h2, b2p, c_anchor)
        if c is None:
            raise SingularFiber("intersection continuation failed in stencil")
        q1 = _newton_on_lagrangian(self.h1, b1p, self.lam, self.x1.q)
        q2 = _newton_on_lagrangian(self.h2, b2p, self.lam, self.x2.q)
        if q1 is None or q2 is None:
            raise SingularFiber("reference continuation failed in stencil")
        x1p = PhasePoint(q1, float(self.lam.value(q1)))
        x2p = PhasePoint(q2, float(self.lam.value(q2)))
        s1 = _arc_action(self.curve1, b1p, x1p, c, self.s_x1, s_c1)
        s2 = _arc_action(self.curve2, b2p, x2p, c, self.s_x2, s_c2)
        if not include_gauge:
            return s1 - s2
        gauge = self.alpha.gauge_value(x2p) - self.alpha.gauge_value(x1p)
        return s1 - s2 + gauge

    def cross_hessian(
        self, c_anchor: PhasePoint, s_c1: float, s_c2: float, step: float
    ) -> float:
        """|d^2 S / db1 db2| by a Richardson-extrapolated cross stencil."""

        def stencil(d: float) -> float:
            spp = self.action_at(c_anchor, s_c1, s_c2, +d, +d, include_gauge=False)
            spm = self.action_at(c_anchor, s_c1, s_c2, +d, -d, include_gauge=False)
            smp = self.action_at(c_anchor, s_c1, s_c2, -d, +d, include_gauge=False)
            smm = self.action_at(c_anchor, s_c1, s_c2, -d, -d, include_gauge=False)
            return (spp - spm - smp + smm) / (4 * d * d)

        d1 = stencil(step)
        d2 = stencil(2 * step)
        return abs((4.0 * d1 - d2) / 3.0)


def overlap(
    sys1: tuple[Observable, float],
    sys2: tuple[Observable, float],
    lam: ReferenceLagrangian,
    alpha: PrequantumForm = PrequantumForm(),
    h: float = 0.1,
    domain: float = DOMAIN_BOUND,
    fd_step: float = FD_STEP,
    trace_opts: TraceOptions | None = None,
    curves: tuple[FiberCurve | None, FiberCurve | None] = (None, None),
    weight_fn: Callable[[PhasePoint], complex] | None = None,
    light: bool = False,
) -> SemiclassicalAmplitude:
    """Leading-order overlap amplitude of two eigen-half-densities.

    ``sys1`` labels the fibration whose state sits in the linear slot of the
    pairing, ``sys2`` the conjugated one.  ``light`` skips the Hessian cross
    check and turning-point count (used by stationary-phase root finding).
    """
    h1, b1 = sys1
    h2, b2 = sys2
    opts = trace_opts or TraceOptions(domain=domain)
    prefactor = 1.0 / math.sqrt(2 * math.pi * h)
    convention = {"constant": 1.0, "power_of_2pi_h": -0.5}

    points = find_intersections(h1, b1, h2, b2, domain=domain)
    if not points:
        return SemiclassicalAmplitude(
            h=h, terms=(), prefactor=prefactor, value=0.0 + 0.0j,
            convention=convention,
        )

    curve1 = curves[0] or trace_level_curve(h1, b1, points[0].point, opts)
    curve2 = curves[1] or trace_level_curve(h2, b2, points[0].point, opts)
    x1 = reference_point(curve1, lam)
    x2 = reference_point(curve2, lam)
    geo = _PairGeometry(
        h1, b1, h2, b2, lam, alpha, curve1, curve2, x1, x2,
        curve1.locate(x1), curve2.locate(x2),
    )

    if any(abs(ip.bracket) < 10 * TRANS_TOL for ip in points):
        warnings.warn(
            "an intersection lies within 10x the transversality floor",
            CausticNearby,
        )

    terms = []
    for ip in points:
        ip = locate_on_curves(ip, curve1, curve2)
        c = ip.point
        s_c1 = curve1.locate(c)
        s_c2 = curve2.locate(c)
        action = geo.action_at(c, s_c1, s_c2, 0.0, 0.0)
        if light:
            mu = 0
            hess = 1.0 / abs(ip.bracket)
            dev = float("nan")
        else:
            mu = maslov_segment(curve2, x2, c, h1)
            hess = geo.cross_hessian(c, s_c1, s_c2, fd_step)
            dev = abs(hess - 1.0 / abs(ip.bracket)) * abs(ip.bracket)
            if dev > HESS_CHECK_TOL:
                warnings.warn(
                    f"finite-difference Hessian deviates from 1/|bracket| "
                    f"by {dev:.2e} at {tuple(c)}",
                    HessianCrossCheck,
                )
        w = 1.0 + 0.0j if weight_fn is None else complex(weight_fn(c))
        contribution = (
            w * math.sqrt(abs(hess)) * cmath.exp(1j * action / h + 1j * math.pi * mu / 2)
        )
        terms.append(
            OverlapTerm(
                point=c,
                bracket=ip.bracket,
                action=action,
                maslov=mu,
                hessian_det=hess,
                hessian_bracket_dev=dev,
                weight=w,
                contribution=contribution,
            )
        )
    value = prefactor * sum(t.contribution for t in terms)
    return SemiclassicalAmplitude(
        h=h,
        terms=tuple(terms),
        prefactor=prefactor,
        value=value,
        convention=convention,
        curve1=curve1,
        curve2=curve2,
        x1=x1,
        x2=x2,
    )


def complementary_overlap_term(
    amp: SemiclassicalAmplitude, index: int, transverse: Observable
) -> OverlapTerm:
    """Recompute one term using the complementary arc on the closed second
    fiber (independent integration, not loop-action bookkeeping)."""
    t = amp.terms[index]
    curve2 = amp.curve2
    if curve2 is None or not curve2.closed:
        raise ValueError("complementary arc needs a closed second fiber")
    x2 = project_to_fiber(curve2.observable, curve2.level, amp.x2)
    c = project_to_fiber(curve2.observable, curve2.level, t.point)
    s_x2, s_c = curve2.locate(x2), curve2.locate(c)
    # reverse-direction arc from x2 to c = reversed forward arc c -> x2
    guide = curve2.scaffold(s_c, s_x2)
    guide[0], guide[-1] = c, x2
    s2_complement = -chart_action(curve2.observable, curve2.level, guide)
    guide_rev = guide[::-1].copy()
    mu_complement = _maslov_over_guide(
        curve2, guide_rev, transverse, -1.0, TRANS_TOL
    )
    # S = S1 - S2 and the gauge part are unchanged except through S2
    s2_forward = _arc_action(curve2, curve2.level, x2, c, s_x2, s_c)
    action = t.action + s2_forward - s2_complement
    contribution = (
        t.weight
        * math.sqrt(abs(t.hessian_det))
        * cmath.exp(1j * action / amp.h + 1j * math.pi * mu_complement / 2)
    )
    return OverlapTerm(
        point=t.point,
        bracket=t.bracket,
        action=action,
        maslov=mu_complement,
        hessian_det=t.hessian_det,
        hessian_bracket_dev=t.hessian_bracket_dev,
        weight=t.weight,
        contribution=contribution,
    )


_LAM_CANDIDATES = (
    ReferenceLagrangian.line(1.0),
    ReferenceLagrangian.flat(),
    ReferenceLagrangian.line(-1.0),
    ReferenceLagrangian.line(0.5, -0.37),
)


def pick_reference_lagrangian(
    sys1: tuple[Observable, float], sys2: tuple[Observable, float],
    domain: float = DOMAIN_BOUND,
) -> ReferenceLagrangian:
    """First candidate graph transversal to both fibers (deterministic)."""
    for lam in _LAM_CANDIDATES:
        try:
            for h_obs, b in (sys1, sys2):
                seed = _seed_on_level(h_obs, b, domain)
                curve = trace_level_curve(h_obs, b, seed, _BS_TRACE)
                reference_point(curve, lam)
            return lam
        except (NoReferencePoint, SingularFiber):
            continue
    raise NoReferencePoint("no candidate reference Lagrangian fits both fibers")


def transition_probability(
    sys1: tuple[Observable, float],
    sys2: tuple[Observable, float],
    h: float,
    lam: ReferenceLagrangian | None = None,
    alpha: PrequantumForm = PrequantumForm(),
    domain: float = DOMAIN_BOUND,
) -> float:
    """Squared-modulus transition density: the double intersection sum with
    relative actions and turning-point indices, prefactor 1/(2 pi h)."""
    if lam is None:
        lam = pick_reference_lagrangian(sys1, sys2, domain)
    amp = overlap(sys1, sys2, lam, alpha, h, domain=domain)
    total = 0.0 + 0.0j
    for ta in amp.terms:
        for tc in amp.terms:
            rel_action = tc.action - ta.action
            rel_maslov = tc.maslov - ta.maslov
            mag = math.sqrt(abs(tc.hessian_det * ta.hessian_det))
            total += (
                (tc.weight * ta.weight.conjugate())
                * mag
                * cmath.exp(1j * rel_action / h + 1j * math.pi * rel_maslov / 2)
            )
    return float(total.real) / (2 * math.pi * h)


# ---------------------------------------------------------------------------
# Cyclic amplitudes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainTerm:
    points: tuple[PhasePoint, ...]
    action: float
    maslov: int
    contribution: complex


@dataclass(frozen=True)
class CyclicAmplitude:
    h: float
    k: int
    chains: tuple[ChainTerm, ...]
    prefactor: float
    value: complex


def cyclic_amplitude(
    systems: Sequence[tuple[Observable, float]],
    h: float,
    lam: ReferenceLagrangian,
    alpha: PrequantumForm = PrequantumForm(),
    chain: Sequence[PhasePoint] | None = None,
    domain: float = DOMAIN_BOUND,
) -> CyclicAmplitude:
    """Cyclic product of overlaps around k fibrations (2 <= k <= 4).

    Chain point ``c_a`` joins fiber ``a`` to fiber ``a+1`` (mod k); each
    chain contributes the product of the corresponding overlap terms and the
    prefactor is (2 pi h)^(-k/2).  Reference-point phases cancel around the
    cycle (exactly on open fibers, modulo loop actions on closed ones).
    """
    k = len(systems)
    if not 2 <= k <= 4:
        raise ValueError("cyclic amplitudes support 2 <= k <= 4 fibrations")
    prefactor = (2 * math.pi * h) ** (-k / 2.0)
    pair_amps = []
    for a in range(k):
        amp = overlap(systems[a], systems[(a + 1) % k], lam, alpha, h, domain=domain)
        if not amp.terms:
            return CyclicAmplitude(h=h, k=k, chains=(), prefactor=prefactor, value=0.0j)
        pair_amps.append(amp)

    if chain is not None:
        if len(chain) != k:
            raise ValueError("chain must pick one intersection per fiber pair")
        selections = []
        for a, pt in enumerate(chain):
            terms = pair_amps[a].terms
            d2 = [
                (t.point.q - pt.q) ** 2 + (t.point.p - pt.p) ** 2 for t in terms
            ]
            selections.append((terms[int(np.argmin(d2))],))
        combos = itertools.product(*selections)
    else:
        combos = itertools.product(*[amp.terms for amp in pair_amps])

    chains = []
    value = 0.0 + 0.0j
    for combo in combos:
        contribution = 1.0 + 0.0j
        action = 0.0
        mu = 0
        for t in combo:
            contribution *= t.contribution
            action += t.action
            mu += t.maslov
        chains.append(
            ChainTerm(
                points=tuple(t.point for t in combo),
                action=action,
                maslov=mu,
                contribution=contribution,
            )
        )
        value += contribution
    return CyclicAmplitude(
        h=h, k=k, chains=tuple(chains), prefactor=prefactor, value=prefactor * value
    )


# ---------------------------------------------------------------------------
# Stationary-phase composition of kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComposedTerm:
    b_star: float
    action: float
    maslov: int
    signature: int
    amplitude: complex
    contribution: complex


@dataclass(frozen=True)
class ComposedAmplitude:
    h: float
    terms: tuple[ComposedTerm, ...]
    prefactor: float
    value: complex


def _eval_kernel(fn, b: float, light: bool) -> SemiclassicalAmplitude:
    try:
        return fn(b, light=light)
    except TypeError:
        return fn(b)


def _sorted_terms(amp: SemiclassicalAmplitude) -> list[OverlapTerm]:
    return sorted(amp.terms, key=lambda t: (t.point.p, t.point.q))


def compose_kernels(
    u20: Callable[[float], SemiclassicalAmplitude],
    u01: Callable[[float], SemiclassicalAmplitude],
    h: float,
    interval: tuple[float, float],
    n_grid: int = 33,
    hess_tol: float = HESS_TOL,
) -> ComposedAmplitude:
    """One-dimensional stationary-phase composition over the intermediate label.

    Locates zeros of d/db [S20 + S01] per branch pair on the supplied
    bracketing interval, applies the Gaussian factor sqrt(2 pi h / |phi''|)
    and the signature phase exp(+- i pi / 4), and sums the contributions.
    """
    b_lo, b_hi = interval
    grid = np.linspace(b_lo, b_hi, n_grid)
    amps20 = [_eval_kernel(u20, float(b), True) for b in grid]
    amps01 = [_eval_kernel(u01, float(b), True) for b in grid]
    n2 = {len(a.terms) for a in amps20}
    n1 = {len(a.terms) for a in amps01}
    if len(n2) != 1 or len(n1) != 1:
        raise ValueError(
            "branch structure changes across the interval; narrow the bracket"
        )
    n2, n1 = n2.pop(), n1.pop()
    if n2 == 0 or n1 == 0:
        return ComposedAmplitude(
            h=h, terms=(), prefactor=1.0 / math.sqrt(2 * math.pi * h), value=0.0j
        )

    actions20 = np.array([[t.action for t in _sorted_terms(a)] for a in amps20])
    actions01 = np.array([[t.action for t in _sorted_terms(a)] for a in amps01])

    db = 1e-6 * max(1.0, b_hi - b_lo)

    def phase_pair(j: int, k: int):
        def phi(b: float) -> float:
            a20 = _eval_kernel(u20, b, True)
            a01 = _eval_kernel(u01, b, True)
            return (
                _sorted_terms(a20)[j].action + _sorted_terms(a01)[k].action
            )

        def dphi(b: float) -> float:
            return (phi(b + db) - phi(b - db)) / (2 * db)

        return phi, dphi

    terms: list[ComposedTerm] = []
    value = 0.0 + 0.0j
    margin = 2 * db
    for j in range(n2):
        for k in range(n1):
            phi_jk = actions20[:, j] + actions01[:, k]
            dgrid = np.gradient(phi_jk, grid)
            if np.max(np.abs(dgrid)) < hess_tol:
                raise DegenerateStationaryPoint(
                    "phase is flat across the interval (coincident fibrations)"
                )
            phi, dphi = phase_pair(j, k)
            sign = np.sign(dgrid)
            for i in np.nonzero(sign[:-1] * sign[1:] < 0)[0]:
                lo = max(float(grid[max(i - 1, 0)]), b_lo + margin)
                hi = min(float(grid[min(i + 2, len(grid) - 1)]), b_hi - margin)
                glo, ghi = dphi(lo), dphi(hi)
                if glo == 0.0:
                    b_star = lo
                elif ghi == 0.0:
                    b_star = hi
                elif glo * ghi > 0:
                    continue
                else:
                    b_star = brentq(dphi, lo, hi, xtol=1e-11)

                phi0 = phi(b_star)
                step = max(3e-3 * max(1.0, abs(b_star)), 4 * db)

                def second(d: float) -> float:
                    return (phi(b_star + d) - 2 * phi0 + phi(b_star - d)) / (d * d)

                d2 = (4.0 * second(step) - second(2 * step)) / 3.0
                if abs(d2) < hess_tol:
                    raise DegenerateStationaryPoint(
                        f"second derivative {d2:.3e} below tolerance at b = {b_star:.6g}"
                    )
                a20 = _eval_kernel(u20, float(b_star), False)
                a01 = _eval_kernel(u01, float(b_star), False)
                t20 = _sorted_terms(a20)[j]
                t01 = _sorted_terms(a01)[k]
                amp_factor = (
                    t20.weight
                    * t01.weight
                    * math.sqrt(abs(t20.hessian_det * t01.hessian_det))
                    / math.sqrt(abs(d2))
                )
                action = t20.action + t01.action
                mu = t20.maslov + t01.maslov
                sig = 1 if d2 > 0 else -1
                contribution = amp_factor * cmath.exp(
                    1j * action / h + 1j * math.pi * mu / 2 + 1j * math.pi * sig / 4
                )
                terms.append(
                    ComposedTerm(
                        b_star=float(b_star),
                        action=action,
                        maslov=mu,
                        signature=sig,
                        amplitude=amp_factor,
                        contribution=contribution,
                    )
                )
                value += contribution
    prefactor = 1.0 / math.sqrt(2 * math.pi * h)
    return ComposedAmplitude(
        h=h, terms=tuple(terms), prefactor=prefactor, value=prefactor * value
    )


def overlap_kernel(
    fixed_sys: tuple[Observable, float],
    intermediate: Observable,
    lam: ReferenceLagrangian,
    alpha: PrequantumForm,
    h: float,
    fixed_slot: int,
    domain: float = DOMAIN_BOUND,
    weight_fn: Callable[[PhasePoint], complex] | None = None,
) -> Callable[[float], SemiclassicalAmplitude]:
    """Kernel as a function of the intermediate level.

    ``fixed_slot`` = 1 puts the fixed system in the linear slot (kernel rows
    labelled by the intermediate), 2 the reverse.  The fixed fiber trace is
    cached across evaluations.
    """
    cache: dict[str, FiberCurve | None] = {"curve": None}

    def kernel(b: float, light: bool = False) -> SemiclassicalAmplitude:
        if fixed_slot == 1:
            sys1, sys2 = fixed_sys, (intermediate, b)
            curves = (cache["curve"], None)
        else:
            sys1, sys2 = (intermediate, b), fixed_sys
            curves = (None, cache["curve"])
        amp = overlap(
            sys1, sys2, lam, alpha, h, domain=domain,
            curves=curves, weight_fn=weight_fn, light=light,
        )
        if cache["curve"] is None:
            fixed_curve = amp.curve1 if fixed_slot == 1 else amp.curve2
            if fixed_curve is not None:
                cache["curve"] = fixed_curve
        return amp

    return kernel
