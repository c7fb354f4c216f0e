import math

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from epbloch.bloch import (
    ControlParams,
    RateParams,
    auxiliaries,
    build_matrix,
    char_coeffs,
    classify_region,
    discriminant_pq,
    eigenvalues_closed_form,
    ep3_locus,
    general_relaxation,
    rates_to_controls,
    region_discriminant,
    solve_real_cubic,
)

G = 0.1
EP3 = ControlParams(G, math.sqrt(1 / 108) * G, math.sqrt(8 / 108) * G)


def hand_matrix(g, d, e):
    m = np.zeros((3, 3))
    m[0, 0] = m[1, 1] = -g / 2
    m[2, 2] = -g
    m[0, 1], m[1, 0] = d, -d
    m[1, 2], m[2, 1] = e, -e
    return m


def paired_diff(a, b):
    cost = np.abs(np.subtract.outer(np.asarray(a), np.asarray(b)))
    r, c = linear_sum_assignment(cost)
    return cost[r, c].max()


def ep2_root_delta(g, e):
    """Positive root in D of the EP2 polynomial, solved as a cubic in u = D^2 with numpy."""
    e2 = e * e
    # g^4 u + 16 (u + e2)^3 + g^2 (8 u^2 - 20 u e2 - e2^2)
    coeffs = [16.0, 48 * e2 + 8 * g * g, 48 * e2 * e2 + g**4 - 20 * g * g * e2, 16 * e2**3 - g * g * e2 * e2]
    u = [r.real for r in np.roots(coeffs) if abs(r.imag) < 1e-20 and r.real > 0]
    return math.sqrt(min(u))


class TestParams:
    def test_rejects_negative_gamma(self):
        with pytest.raises(ValueError):
            ControlParams(-0.1, 0, 0)

    @pytest.mark.parametrize("bad", [math.nan, math.inf])
    def test_rejects_nonfinite(self, bad):
        with pytest.raises(ValueError):
            ControlParams(0.1, bad, 0)

    def test_rates_reject_negative(self):
        with pytest.raises(ValueError):
            RateParams(-1.0)

    def test_spontaneous_emission_limit(self):
        r = RateParams(0.1)
        assert general_relaxation(r) == pytest.approx(0.1)
        assert rates_to_controls(r, 0.0, 0.0).gamma_rate == pytest.approx(0.1)

    def test_pure_dephasing_limit_is_negative(self):
        r = RateParams(0.0, 0.0, 0.2)
        assert general_relaxation(r) == pytest.approx(-0.2)
        with pytest.raises(ValueError):
            rates_to_controls(r, 0.0, 0.0)

    def test_mixed_rates_two_formulas_agree(self):
        r = RateParams(0.06, 0.04, 0.03)
        assert r.t1 == pytest.approx(10.0)
        assert r.t2 == pytest.approx(1 / 0.08)
        assert general_relaxation(r) == pytest.approx(0.07, abs=1e-15)
        assert 1.5 / r.t1 - 1 / r.t2 == pytest.approx(0.07, abs=1e-15)
        assert rates_to_controls(r, 0.2, 0.3) == ControlParams(0.07, 0.2, 0.3)


class TestMatrix:
    def test_decoupled_diagonal(self):
        np.testing.assert_array_equal(build_matrix(ControlParams(0.1, 0, 0)), np.diag([-0.05, -0.05, -0.1]))

    def test_free_precession(self):
        m = build_matrix(ControlParams(0.0, 0.3, 0.4))
        np.testing.assert_array_equal(m, -m.T)
        ev = np.sort_complex(np.linalg.eigvals(m))
        np.testing.assert_allclose(ev, [-0.5j, 0, 0.5j], atol=1e-15)
        assert ControlParams(0.0, 0.3, 0.4).rabi == pytest.approx(0.5)

    def test_matches_hand_constructor(self):
        np.testing.assert_array_equal(build_matrix(ControlParams(0.1, 0.01, 0.02)), hand_matrix(0.1, 0.01, 0.02))

    def test_trace(self):
        assert np.trace(build_matrix(ControlParams(0.3, 0.1, 0.7))) == pytest.approx(-0.6)


class TestAuxiliaries:
    def test_ep3_point(self):
        aux = auxiliaries(EP3)
        assert abs(aux.X) < 1e-17 and abs(aux.Y) < 1e-17 and abs(aux.W) < 1e-12

    def test_free_detuning(self):
        aux = auxiliaries(ControlParams(0.0, 1.0, 0.0))
        assert aux.X == -36 and aux.Y == 12
        assert aux.W == pytest.approx(math.sqrt(1728))

    def test_ep2_poly_vanishes_on_detuning_scan(self):
        d = ep2_root_delta(0.1, 0.01)
        # the rounded location quoted for this scan
        assert d == pytest.approx(1.021e-3, abs=5e-7)
        aux = auxiliaries(ControlParams(0.1, d, 0.01))
        assert abs(aux.ep2_poly) / (0.1**4 * (d * d + 1e-4)) < 1e-12

    def test_w_squared_is_108_ep2_poly(self):
        p = ControlParams(0.2, 0.03, 0.07)
        aux = auxiliaries(p)
        assert aux.w_squared == pytest.approx(108 * aux.ep2_poly, rel=1e-10)
        assert aux.W**2 == pytest.approx(p.gamma_rate**2 * aux.X**2 + aux.Y**3, rel=1e-10)

    def test_principal_branch(self):
        assert auxiliaries(ControlParams(0.1, 0.05, 0.05)).W.imag == 0
        w = auxiliaries(ControlParams(0.1, 0.0, 0.01)).W
        assert w.real == 0 and w.imag > 0


class TestSpectrum:
    def test_diagonal(self):
        m = eigenvalues_closed_form(ControlParams(0.1, 0, 0)).eigenvalues
        np.testing.assert_allclose(np.sort(m.real), [-0.1, -0.05, -0.05], atol=1e-15)
        # the double root is exact, not split by roundoff
        assert m[1] == m[2]

    def test_ep3_triple(self):
        m = eigenvalues_closed_form(EP3).eigenvalues
        np.testing.assert_allclose(m, -2 * G / 3, atol=1e-12)
        # independent check: the characteristic polynomial is (m + 2G/3)^3
        np.testing.assert_allclose(np.poly(build_matrix(EP3)), np.poly([-2 * G / 3] * 3), atol=1e-15)

    def test_frequencies_convention(self):
        p = ControlParams(0.1, 0.04, 0.03)
        s = eigenvalues_closed_form(p)
        np.testing.assert_allclose(s.frequencies, 1j * s.eigenvalues)
        assert np.all(s.frequencies.imag <= 0)

    def test_random_against_dense_solver(self):
        rng = np.random.default_rng(3)
        for g, d, e in rng.uniform(0, 1, size=(500, 3)):
            p = ControlParams(g, d, e)
            ref = np.linalg.eigvals(hand_matrix(g, d, e))
            assert paired_diff(eigenvalues_closed_form(p).eigenvalues, ref) < 1e-9

    def test_roots_annihilate_determinant(self):
        rng = np.random.default_rng(4)
        for g, d, e in rng.uniform(0, 1, size=(200, 3)):
            p = ControlParams(g, d, e)
            M = hand_matrix(g, d, e)
            scale = p.scale**3
            for m in eigenvalues_closed_form(p).eigenvalues:
                assert abs(np.linalg.det(M - m * np.eye(3))) < 1e-10 * scale

    def test_canonical_order_puts_closest_pair_last(self):
        m = eigenvalues_closed_form(ControlParams(0.1, 1.0e-3, 0.01)).eigenvalues
        gaps = [abs(m[1] - m[2]), abs(m[0] - m[1]), abs(m[0] - m[2])]
        assert gaps[0] == min(gaps)

    def test_free_precession_family(self):
        m = eigenvalues_closed_form(ControlParams(0.0, 0.3, 0.4)).eigenvalues
        assert paired_diff(m, [0, 0.5j, -0.5j]) < 1e-12


class TestRegion:
    def test_inside_triangle(self):
        assert classify_region(ControlParams(0.1, 0.0, 0.01)) == "all-real"

    def test_far_outside(self):
        assert classify_region(ControlParams(0.1, 0.05, 0.05)) == "complex-pair"

    def test_ep3_degenerate(self):
        assert classify_region(EP3) == "degenerate"

    def test_agrees_with_dense_solver(self):
        rng = np.random.default_rng(5)
        for d, e in rng.uniform(-0.05, 0.05, size=(300, 2)):
            p = ControlParams(0.1, d, e)
            value = region_discriminant(p)
            if abs(value) < 1e-8:
                continue
            ev = np.linalg.eigvals(hand_matrix(0.1, d, e))
            real = np.max(np.abs(ev.imag)) < 1e-12
            assert (value < 0) == real


class TestCoefficients:
    def test_diagonal_vieta(self):
        r, s, t = char_coeffs(ControlParams(0.1, 0, 0))
        np.testing.assert_allclose([1, r, s, t], np.poly([-0.05j, -0.05j, -0.1j]), atol=1e-15)

    def test_vieta_against_spectrum(self):
        rng = np.random.default_rng(6)
        for g, d, e in rng.uniform(0, 1, size=(50, 3)):
            p = ControlParams(g, d, e)
            w = eigenvalues_closed_form(p).frequencies
            r, s, t = char_coeffs(p)
            assert r == pytest.approx(-w.sum(), abs=1e-12)
            assert r == pytest.approx(2j * g, abs=1e-12)
            assert s == pytest.approx(w[0] * w[1] + w[1] * w[2] + w[0] * w[2], abs=1e-12)
            assert t == pytest.approx(-w.prod(), abs=1e-12)

    def test_ep3_perfect_cube(self):
        r, s, t = char_coeffs(EP3)
        w = 1j * (-2 * G / 3)
        assert r == pytest.approx(-3 * w, abs=1e-15)
        np.testing.assert_allclose([1, r, s, t], np.poly([w] * 3), atol=1e-15)

    def test_pq_zero_at_ep3(self):
        p, q = discriminant_pq(EP3)
        assert abs(p) / G**2 < 1e-12 and abs(q) / G**3 < 1e-12

    def test_pq_nonzero_on_diagonal(self):
        p, q = discriminant_pq(ControlParams(0.1, 0, 0))
        assert abs(p) > 1e-5 and abs(q) > 1e-7

    def test_depressed_cubic_roots(self):
        par = ControlParams(0.1, 0.03, 0.02)
        r, _, _ = char_coeffs(par)
        p, q = discriminant_pq(par)
        w = eigenvalues_closed_form(par).frequencies
        assert paired_diff(np.roots([1, 0, p, q]), w + r / 3) < 1e-12


class TestLocus:
    def test_values(self):
        plus, minus = ep3_locus(0.1)
        assert plus.detuning == pytest.approx(9.62250e-3, abs=5e-9)
        assert plus.drive == pytest.approx(2.72166e-2, abs=5e-8)
        assert minus.detuning == -plus.detuning and minus.drive == plus.drive

    def test_scales(self):
        plus, _ = ep3_locus(1.0)
        assert plus.detuning == pytest.approx(0.0962250, abs=5e-8)
        assert plus.drive == pytest.approx(0.272166, abs=5e-7)

    def test_x_y_vanish(self):
        for p in ep3_locus(0.3):
            aux = auxiliaries(p)
            assert abs(aux.X) < 1e-15 and abs(aux.Y) < 1e-15

    @pytest.mark.parametrize("g", [0.0, -1.0])
    def test_rejects_nonpositive(self, g):
        with pytest.raises(ValueError):
            ep3_locus(g)


def test_real_cubic_solver_against_numpy():
    rng = np.random.default_rng(7)
    for a, b, c in rng.normal(size=(300, 3)):
        assert paired_diff(solve_real_cubic(a, b, c), np.roots([1, a, b, c])) < 1e-8


def test_real_cubic_triple_root():
    np.testing.assert_allclose(solve_real_cubic(6.0, 12.0, 8.0), -2.0, atol=1e-12)
