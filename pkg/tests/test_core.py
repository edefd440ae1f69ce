import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nekmix.core import (
    TWO_PI,
    ActionDomain,
    PhasePoint,
    SeededRng,
    build_grid,
    count_wavevectors,
    distance_to_resonance,
    enumerate_wavevectors,
    restrict_grid,
    stable_sum,
    torus_distance,
    wrap_angles,
)


class TestWrapAngles:
    def test_identity(self):
        np.testing.assert_array_equal(wrap_angles([0.0, 0.0]), [0.0, 0.0])

    def test_modular(self):
        np.testing.assert_allclose(wrap_angles([TWO_PI, -np.pi / 2]), [0.0, 1.5 * np.pi], atol=1e-15)

    def test_against_fmod_oracle(self):
        raw = np.array([7.5, 13.1])
        expected = [math.fmod(7.5, TWO_PI), math.fmod(13.1, TWO_PI)]
        np.testing.assert_allclose(wrap_angles(raw), expected, rtol=0, atol=1e-14)
        np.testing.assert_allclose(wrap_angles(raw), [7.5 - TWO_PI, 13.1 - 2 * TWO_PI], atol=1e-14)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8))
    def test_half_open_range(self, xs):
        out = wrap_angles(xs)
        assert np.all(out >= 0) and np.all(out < TWO_PI)

    def test_tiny_negative_folds_to_zero(self):
        assert wrap_angles([-1e-300])[0] == 0.0


def test_phase_point_wraps_and_checks_shape():
    p = PhasePoint(np.array([7.0, -1.0]), np.array([0.5, 0.5]))
    assert p.dim == 2
    assert np.all((p.theta >= 0) & (p.theta < TWO_PI))
    with pytest.raises(ValueError):
        PhasePoint(np.array([0.0]), np.array([1.0, 2.0]))


def test_torus_distance_uses_shortest_arc():
    d = torus_distance(np.array([[0.01]]), np.array([[0.0]]), np.array([[TWO_PI - 0.01]]), np.array([[0.0]]))
    assert d[0] == pytest.approx(0.02)


class TestGrids:
    def test_box_midpoint_unit_volume(self):
        g = build_grid(ActionDomain.box((0, 0), (1, 1)), 10, "midpoint")
        assert g.size == 100
        assert math.fsum(g.weights) == pytest.approx(1.0, abs=1e-14)

    def test_ball_area(self):
        g = build_grid(ActionDomain.ball((0, 0), 1.0), 200, "midpoint")
        assert math.fsum(g.weights) == pytest.approx(math.pi, abs=1e-3)

    def test_ball_window_is_not_rescaled(self):
        g = build_grid(ActionDomain.ball((0, 0), 1.0), 400, "midpoint", window=((-1, -1), (0, 1)))
        assert math.fsum(g.weights) == pytest.approx(math.pi / 2, abs=1e-2)
        assert g.meta["rescale"] is None

    def test_gauss_legendre_exact_quartic(self):
        g = build_grid(ActionDomain.box((-1,), (1,)), 5, "gauss-legendre")
        assert g.integrate(g.nodes[:, 0] ** 4) == pytest.approx(0.4, abs=1e-14)

    def test_restrict_keeps_layout(self):
        g = build_grid(ActionDomain.box((0, 0), (1, 1)), 8)
        keep = g.nodes[:, 0] < 0.5
        r = restrict_grid(g, keep)
        assert r.size == 32 and r.mask.shape == g.mask.shape

    def test_gradient_tensor_linear(self):
        g = build_grid(ActionDomain.box((0, 0), (1, 2)), (20, 30))
        vals = g.to_tensor(3 * g.nodes[:, 0] - g.nodes[:, 1])
        grad = g.gradient_tensor(vals)
        np.testing.assert_allclose(grad, np.tile([3.0, -1.0], (g.size, 1)), atol=1e-12)

    def test_rejects_bad_resolution(self):
        with pytest.raises(ValueError):
            build_grid(ActionDomain.box((0,), (1,)), 1)

    def test_domain_validation(self):
        with pytest.raises(ValueError):
            ActionDomain.ball((0, 0), -1.0)
        with pytest.raises(ValueError):
            ActionDomain.box((1, 0), (0, 1))


class TestResonanceDistance:
    def test_exact_resonance(self):
        assert distance_to_resonance((1, 1), (1, -1)) == 0.0

    def test_axis(self):
        assert distance_to_resonance((2, 1), (1, 0)) == 2.0

    def test_diagonal(self):
        assert distance_to_resonance((1, 1), (1, 1)) == pytest.approx(math.sqrt(2))

    def test_zero_k_rejected(self):
        with pytest.raises(ValueError):
            distance_to_resonance((1, 1), (0, 0))


class TestWavevectors:
    @given(st.integers(1, 4), st.integers(0, 6))
    @settings(max_examples=40, deadline=None)
    def test_count_matches_enumeration(self, n, K):
        full = enumerate_wavevectors(n, K, half=False)
        assert full.shape[0] == count_wavevectors(n, K)
        assert enumerate_wavevectors(n, K).shape[0] == count_wavevectors(n, K) // 2

    def test_ordering_and_representatives(self):
        ks = enumerate_wavevectors(2, 2)
        orders = np.abs(ks).sum(axis=1)
        assert np.all(np.diff(orders) >= 0)
        first = ks[np.arange(len(ks)), np.argmax(ks != 0, axis=1)]
        assert np.all(first > 0)
        assert [tuple(k) for k in ks[:2]] == [(1, 0), (0, 1)]

    def test_guard(self):
        with pytest.raises(ValueError):
            enumerate_wavevectors(6, 60)


def test_stable_sum_order_independent(rng):
    v = rng.normal(size=1000) * 10.0 ** rng.integers(-8, 8, 1000)
    assert stable_sum(v) == stable_sum(v[::-1]) == math.fsum(v)
    c = v + 1j * v[::-1]
    assert stable_sum(c) == complex(math.fsum(c.real), math.fsum(c.imag))


class TestSeededRng:
    def test_reproducible(self):
        a = SeededRng(7).generator().random(5)
        b = SeededRng(7).generator().random(5)
        np.testing.assert_array_equal(a, b)

    def test_children_are_distinct_streams(self):
        r = SeededRng(7)
        assert r.child(0) != r.child(1)
        assert not np.array_equal(r.child(0).generator().random(3), r.child(1).generator().random(3))

    def test_rejects_bad_seed(self):
        with pytest.raises(ValueError):
            SeededRng(-1)
