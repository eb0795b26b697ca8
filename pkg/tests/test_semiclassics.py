"""Overlap sums, quantization levels, turning-point indices, composition."""

import cmath
import math

import numpy as np
import pytest

from scoverlap.errors import (
    DegenerateStationaryPoint,
    NonMonotoneAction,
    TangencyAtEndpoint,
)
from scoverlap.geometry import (
    Observable,
    PhasePoint,
    PrequantumForm,
    ReferenceLagrangian,
    find_intersections,
    trace_level_curve,
)
from scoverlap.oracle import GridSpec, build_weyl_operator, eigensystem, half_density_bridge
from scoverlap.semiclassics import (
    bohr_sommerfeld_levels,
    complementary_overlap_term,
    compose_kernels,
    cyclic_amplitude,
    maslov_loop_index,
    maslov_segment,
    overlap,
    overlap_kernel,
    pick_reference_lagrangian,
    transition_probability,
)

HO = Observable.harmonic()
Q = Observable.position()
P = Observable.momentum()
PEND = Observable.pendulum()
LAM = ReferenceLagrangian.line(1.0)
ALPHA = PrequantumForm()


class TestMaslov:
    def test_upper_arc_has_no_crossing(self):
        c = trace_level_curve(HO, 0.5, PhasePoint(1.0, 0.0))
        # both endpoints strictly inside the upper half-plane
        a = PhasePoint(-0.6, 0.8)
        b = PhasePoint(0.6, 0.8)
        assert maslov_segment(c, a, b, Q) == 0

    def test_full_loop_index_is_two(self):
        c = trace_level_curve(HO, 0.5, PhasePoint(1.0, 0.0))
        assert maslov_loop_index(c, Q) == 2

    def test_pendulum_loop_index_is_two(self):
        c = trace_level_curve(PEND, -0.3, PhasePoint(math.acos(0.3), 0.0))
        assert maslov_loop_index(c, Q) == 2

    def test_arc_plus_complement_equals_loop(self):
        b2 = 0.475
        c = trace_level_curve(HO, b2, PhasePoint(math.sqrt(2 * b2), 0.0))
        pts = find_intersections(Q, 0.4, HO, b2)
        ca, cb = pts[0].point, pts[1].point
        loop = maslov_loop_index(c, Q)
        assert maslov_segment(c, ca, cb, Q) + maslov_segment(c, cb, ca, Q) == loop

    def test_segment_matches_dense_resampling(self):
        ellipse = Observable.from_coeffs({(2, 0): 2.0, (0, 2): 0.5, (1, 0): -0.6})
        b = 0.9
        from scoverlap.geometry import TraceOptions, project_to_fiber

        coarse = trace_level_curve(ellipse, b, PhasePoint(1.0, 0.3))
        fine = trace_level_curve(
            ellipse, b, PhasePoint(1.0, 0.3), TraceOptions(n_samples=6000)
        )
        a = project_to_fiber(ellipse, b, PhasePoint(0.9, 0.5))
        d = project_to_fiber(ellipse, b, PhasePoint(0.2, -0.9))
        assert maslov_segment(coarse, a, d, Q) == maslov_segment(fine, a, d, Q)

    def test_tangency_at_endpoint_rejected(self):
        b2 = 0.5
        c = trace_level_curve(HO, b2, PhasePoint(1.0, 0.0))
        turning = PhasePoint(-1.0, 0.0)
        with pytest.raises(TangencyAtEndpoint):
            maslov_segment(c, turning, PhasePoint(0.0, 1.0), Q)


class TestBohrSommerfeld:
    def test_ho_exact_ladder(self):
        levels = bohr_sommerfeld_levels(HO, 0.1, (0.004, 1.0))
        assert [l.n for l in levels] == list(range(10))
        for l in levels:
            assert l.b == pytest.approx(0.1 * (l.n + 0.5), abs=1e-9)
            assert l.loop_maslov == 2
            assert l.loop_action == pytest.approx(
                2 * math.pi * 0.1 * (l.n + 0.5), abs=1e-9
            )

    def test_ho_coarse_h(self):
        levels = bohr_sommerfeld_levels(HO, 0.5, (0.004, 1.0))
        assert [round(l.b, 9) for l in levels] == [0.25, 0.75]

    def test_non_monotone_rejected(self, monkeypatch):
        import scoverlap.semiclassics as sc

        fake = {0: 1.0, 1: 0.5}

        def fake_loop(h_obs, b, seed, opts):
            return (1.0 + math.sin(8 * b), 1.0)

        monkeypatch.setattr(sc, "loop_data", fake_loop)
        with pytest.raises(NonMonotoneAction):
            bohr_sommerfeld_levels(HO, 0.1, (0.004, 2.0))


class TestOverlap:
    def test_plane_wave_closed_form(self):
        b1, b2, h = 1.3, 0.4, 0.1
        amp = overlap((Q, b1), (P, b2), LAM, ALPHA, h)
        assert len(amp.terms) == 1
        t = amp.terms[0]
        assert t.action == pytest.approx(-b2 * (b1 - b2), abs=1e-12)
        assert t.maslov == 0
        assert t.hessian_det == pytest.approx(1.0, abs=1e-9)
        assert abs(amp.value) == pytest.approx(1 / math.sqrt(2 * math.pi * h), rel=1e-9)

    def test_empty_intersection_is_zero(self):
        amp = overlap((Q, 2.0), (HO, 0.5), LAM, ALPHA, 0.1)
        assert amp.value == 0 and not amp.terms

    def test_matches_hermite_oracle(self):
        h = 0.05
        n = 9
        b2 = h * (n + 0.5)
        grid = GridSpec(10.0, 1024)
        es = eigensystem(build_weyl_operator(HO, grid, h))
        turning = math.sqrt(2 * b2)
        for u in (0.15, 0.4, 0.6):
            idx = int(round((u * turning + grid.half_width) / grid.dq))
            q1 = float(grid.qs[idx])
            amp = overlap((Q, q1), (HO, b2), LAM, ALPHA, h)
            bridged = half_density_bridge(amp.value, amp.curve1, amp.curve2, h)
            psi = abs(es.state(n).at(q1))
            assert abs(abs(bridged) - psi) / psi <= 3 * h

    def test_gauge_covariance(self):
        h = 0.1
        gauge = Observable.from_coeffs({(2, 0): 0.31, (1, 1): -0.2, (0, 1): 0.7})
        plain = overlap((Q, 0.4), (HO, 0.475), LAM, ALPHA, h)
        gauged = overlap(
            (Q, 0.4), (HO, 0.475), LAM, PrequantumForm(gauge=gauge), h
        )
        ratio = gauged.value / plain.value
        assert abs(abs(ratio) - 1.0) < 1e-12
        expected = (gauge.value(*plain.x2) - gauge.value(*plain.x1)) / h
        assert cmath.phase(ratio * cmath.exp(-1j * expected)) == pytest.approx(
            0.0, abs=1e-8
        )

    def test_reference_lagrangian_covariance(self):
        h = 0.05
        amp_a = overlap((Q, 0.4), (HO, 0.475), LAM, ALPHA, h)
        amp_b = overlap(
            (Q, 0.4), (HO, 0.475), ReferenceLagrangian.line(0.5, -0.37), ALPHA, h
        )
        ratios = [
            tb.contribution / ta.contribution
            for ta, tb in zip(amp_a.terms, amp_b.terms)
        ]
        assert abs(ratios[0] - ratios[1]) < 1e-8
        assert abs(abs(ratios[0]) - 1.0) < 1e-9

    def test_conjugation_swap_is_constant_phase(self):
        # swapping the slots conjugates the amplitude up to one quarter-turn
        # constant fixed by the asymmetric turning-point convention
        h = 0.05
        a12 = overlap((Q, 0.4), (HO, 0.475), LAM, ALPHA, h)
        a21 = overlap((HO, 0.475), (Q, 0.4), LAM, ALPHA, h)
        ratio = a21.value / a12.value.conjugate()
        assert abs(abs(ratio) - 1.0) < 1e-10
        phase = cmath.phase(ratio) / (math.pi / 2)
        assert abs(phase - round(phase)) < 1e-8

    def test_path_independence_at_quantized_levels(self):
        h = 0.05
        b2 = h * (9 + 0.5)
        amp = overlap((Q, 0.4), (HO, b2), LAM, ALPHA, h)
        for i, t in enumerate(amp.terms):
            alt = complementary_overlap_term(amp, i, Q)
            e_fwd = cmath.exp(1j * t.action / h + 1j * math.pi * t.maslov / 2)
            e_alt = cmath.exp(1j * alt.action / h + 1j * math.pi * alt.maslov / 2)
            assert abs(e_fwd - e_alt) < 1e-8

    def test_hessian_cross_check(self):
        amp = overlap((Q, 0.3), (PEND, -0.2), LAM, ALPHA, 0.05)
        for t in amp.terms:
            assert t.hessian_bracket_dev < 1e-6

    def test_near_caustic_warns(self):
        from scoverlap.errors import CausticNearby

        b2 = 0.5
        b1 = math.sqrt(2 * b2 - 2.5e-11)  # intersections at |p| ~ 5e-6
        with pytest.warns(CausticNearby):
            overlap((Q, b1), (HO, b2), LAM, ALPHA, 0.1, light=True)

    def test_double_root_reported_and_counted_zero(self):
        from scoverlap.errors import DoubleRoot
        from scoverlap.semiclassics import _maslov_over_guide

        curve = trace_level_curve(HO, 0.5, PhasePoint(1.0, 0.0))
        # on-fiber guide dipping to the turning point and back: the bracket
        # touches zero without changing sign
        ps = np.array([0.8, 0.5, 1e-8, 0.5, 0.8])
        qs = np.sqrt(1.0 - ps * ps)
        guide = np.stack([np.concatenate([[-qs[0], -qs[1]], qs[2:]]), ps], axis=1)
        with pytest.warns(DoubleRoot):
            count = _maslov_over_guide(curve, guide, Q, +1.0, 1e-6)
        assert count == 0

    def test_term_dump_fields(self):
        amp = overlap((Q, 0.4), (HO, 0.475), LAM, ALPHA, 0.1)
        dump = amp.term_dump()
        assert {"q", "p", "action", "maslov", "hessian_det", "re", "im"} <= set(
            dump[0]
        )

    def test_term_assembly_invariants(self):
        h = 0.1
        amp = overlap((Q, 0.4), (HO, 0.475), LAM, ALPHA, h)
        total = 0.0 + 0.0j
        for t in amp.terms:
            rebuilt = (
                t.weight
                * math.sqrt(abs(t.hessian_det))
                * cmath.exp(1j * t.action / h + 1j * math.pi * t.maslov / 2)
            )
            assert t.contribution == rebuilt
            total += t.contribution
        assert amp.value == amp.prefactor * total
        assert amp.prefactor == pytest.approx(1 / math.sqrt(2 * math.pi * h))
        assert amp.convention == {"constant": 1.0, "power_of_2pi_h": -0.5}


class TestTransitionProbability:
    def test_plane_wave_density(self):
        for h in (1.0, 0.1, 0.01):
            val = transition_probability((Q, 1.3), (P, 0.4), h, LAM)
            assert abs(val * 2 * math.pi * h - 1.0) < 1e-10

    def test_equals_squared_overlap(self):
        h = 0.1
        amp = overlap((Q, 0.4), (HO, 0.475), LAM, ALPHA, h)
        val = transition_probability((Q, 0.4), (HO, 0.475), h, LAM, ALPHA)
        assert val == pytest.approx(abs(amp.value) ** 2, rel=1e-12)

    def test_gauge_invariance(self):
        h = 0.1
        gauge = Observable.from_coeffs({(2, 0): -0.4, (0, 2): 0.9})
        a = transition_probability((Q, 0.4), (HO, 0.475), h, LAM, ALPHA)
        b = transition_probability(
            (Q, 0.4), (HO, 0.475), h, LAM, PrequantumForm(gauge=gauge)
        )
        assert a == pytest.approx(b, rel=1e-12)

    def test_reference_autopick(self):
        val = transition_probability((Q, 0.4), (HO, 0.475), 0.1)
        assert val > 0
        lam = pick_reference_lagrangian((Q, 0.4), (HO, 0.475))
        assert val == pytest.approx(
            transition_probability((Q, 0.4), (HO, 0.475), 0.1, lam), rel=1e-12
        )


class TestCyclic:
    def test_triangle_area_phase(self):
        h = 0.1
        h45 = Observable.linear(math.pi / 4)
        cyc = cyclic_amplitude([(Q, 0.3), (P, -0.2), (h45, 0.5)], h, LAM, ALPHA)
        assert len(cyc.chains) == 1
        chain = cyc.chains[0]
        c1, c2, c3 = chain.points
        verts = [c3, c1, c2]  # traversal c3 ->(L1) c1 ->(L2) c2 ->(L3) c3
        shoelace = 0.5 * sum(
            verts[i].q * verts[(i + 1) % 3].p - verts[(i + 1) % 3].q * verts[i].p
            for i in range(3)
        )
        assert chain.action == pytest.approx(-shoelace, abs=1e-10)

    def test_two_cycle_matches_probability(self):
        h = 0.1
        cyc = cyclic_amplitude([(Q, 0.3), (P, -0.2)], h, LAM, ALPHA)
        assert abs(cyc.value) * 2 * math.pi * h == pytest.approx(1.0, abs=1e-10)
        prob = transition_probability((Q, 0.3), (P, -0.2), h, LAM)
        assert abs(cyc.value) == pytest.approx(prob, rel=1e-10)

    def test_empty_pair_gives_zero(self):
        cyc = cyclic_amplitude([(Q, 1.0), (HO, 0.2)], 0.1, LAM, ALPHA)
        assert cyc.value == 0 and not cyc.chains

    def test_explicit_chain_selection(self):
        h = 0.1
        b2 = 0.475
        full = cyclic_amplitude([(Q, 0.4), (HO, b2)], h, LAM, ALPHA)
        pbar = math.sqrt(2 * b2 - 0.16)
        upper = cyclic_amplitude(
            [(Q, 0.4), (HO, b2)], h, LAM, ALPHA,
            chain=[PhasePoint(0.4, pbar), PhasePoint(0.4, pbar)],
        )
        assert len(full.chains) == 4
        assert len(upper.chains) == 1

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            cyclic_amplitude([(Q, 0.1)], 0.1, LAM, ALPHA)


class TestComposition:
    def test_identity_like_composition_is_degenerate(self):
        h = 0.1
        u20 = overlap_kernel((Q, 0.3), P, LAM, ALPHA, h, fixed_slot=2)
        u01 = overlap_kernel((Q, 0.3), P, LAM, ALPHA, h, fixed_slot=1)
        with pytest.raises(DegenerateStationaryPoint):
            compose_kernels(u20, u01, h, (-2.0, 2.0))

    def test_parallel_fibers_compose_to_zero(self):
        h = 0.1
        u20 = overlap_kernel((Q, 0.7), P, LAM, ALPHA, h, fixed_slot=2)
        u01 = overlap_kernel((Q, 0.3), P, LAM, ALPHA, h, fixed_slot=1)
        composed = compose_kernels(u20, u01, h, (-2.0, 2.0))
        assert composed.value == 0 and not composed.terms

    def test_linear_triple_exact(self):
        h = 0.1
        h45 = Observable.linear(math.pi / 4)
        u01 = overlap_kernel((Q, 0.3), P, LAM, ALPHA, h, fixed_slot=1)
        u20 = overlap_kernel((h45, 0.8), P, LAM, ALPHA, h, fixed_slot=2)
        composed = compose_kernels(u20, u01, h, (-2.5, 2.5))
        direct = overlap((Q, 0.3), (h45, 0.8), LAM, ALPHA, h)
        assert abs(abs(composed.value) - abs(direct.value)) / abs(
            direct.value
        ) < 1e-10
        quarter = cmath.phase(composed.value / direct.value) / (math.pi / 4)
        assert abs(quarter - round(quarter)) < 1e-6

    def test_oscillator_intermediate_within_5h(self):
        b1, b2 = 0.6, 0.8
        b_star = (b1 * b1 + b2 * b2) / 2
        for h in (0.1, 0.05):
            u01 = overlap_kernel((Q, b1), HO, LAM, ALPHA, h, fixed_slot=1)
            u20 = overlap_kernel((P, b2), HO, LAM, ALPHA, h, fixed_slot=2)
            composed = compose_kernels(u20, u01, h, (0.36, 0.95))
            direct = overlap((Q, b1), (P, b2), LAM, ALPHA, h)
            rel = abs(abs(composed.value) - abs(direct.value)) / abs(direct.value)
            assert rel <= 5 * h
            assert composed.terms[0].b_star == pytest.approx(b_star, abs=1e-7)
