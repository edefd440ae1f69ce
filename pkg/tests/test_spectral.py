import numpy as np
import pytest

from nekmix.core import TWO_PI, ActionDomain, build_grid
from nekmix.model import TrigPolyField
from nekmix.spectral import fft_mode_table, fourier_coeff, mode_product, mode_table_json, parseval_check, tail, tail_decay_fit

BOX = ActionDomain.box((0.0, 0.0), (1.0, 1.0))


@pytest.fixture(scope="module")
def grid():
    return build_grid(BOX, 40, "gauss-legendre")


def _field(terms, n=2):
    return TrigPolyField.from_real_terms(terms, n)


class TestFourierCoeff:
    def test_cosine(self):
        c = fourier_coeff(_field([("cos", (1, 0), 1.0)]), (1, 0))
        assert c.value(np.zeros((1, 2)))[0] == pytest.approx(0.5)

    def test_sine_with_action(self):
        c = fourier_coeff(_field([("sin", (0, 1), "I2")]), (0, 1))
        assert c.value(np.array([[0.0, 3.0]]))[0] == pytest.approx(-1.5j)

    def test_absent_mode(self):
        assert fourier_coeff(_field([("cos", (1, 0), 1.0)]), (2, 1)).is_zero


class TestModeProduct:
    def test_missing_mode_gives_zero(self):
        mp = mode_product(_field([("cos", (1, 0), 1.0)]), _field([("cos", (0, 1), "I1")]), (1, 0))
        assert mp.is_zero

    def test_product_read_off(self):
        rho = "bump([0.5, 0.5], 0.4)"
        G = _field([("cos", (1, 0), 1.0)])
        f0 = _field([("const", None, rho), ("cos", (1, 0), rho)])
        I = np.array([[0.5, 0.5], [0.6, 0.4]])
        a = mode_product(G, f0, (1, 0)).a
        expected = 0.25 * _field([("const", None, rho)]).zero_mode().value(I)
        np.testing.assert_allclose(a.value(I), expected)

    def test_gradient_matches_finite_differences(self, rng):
        G = _field([("cos", (1, 1), "I1^2"), ("sin", (1, 1), "I2")])
        f0 = _field([("cos", (1, 1), "exp(I1) * I2")])
        a = mode_product(G, f0, (1, 1)).a
        I = rng.uniform(0.2, 0.8, (5, 2))
        h = 1e-6
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            np.testing.assert_allclose(a.grad(I)[:, j], (a.value(I + e) - a.value(I - e)) / (2 * h), rtol=1e-6, atol=1e-9)


class TestTail:
    def test_band_limited_vanishes(self, grid):
        G = _field([("cos", (1, 0), 1.0), ("cos", (1, 1), 1.0)])
        f0 = _field([("const", None, 1.0), ("cos", (1, 1), 0.5)])
        assert tail(G, f0, G.band_limit + f0.band_limit, grid) == 0.0

    def test_single_high_mode(self, grid):
        G = _field([("cos", (2, 1), 1.0)])
        f0 = _field([("cos", (2, 1), "bump([0.5, 0.5], 0.3)")])
        # |a_{+-k}| = bump / 4 on both modes of the pair
        mass = grid.integrate(_field([("const", None, "bump([0.5, 0.5], 0.3)")]).zero_mode().value(grid.nodes).real)
        assert tail(G, f0, 2, grid) == pytest.approx(TWO_PI**2 * 2 * mass / 4, rel=1e-12)

    def test_K_zero_with_theta_uniform_density(self, grid):
        assert tail(_field([("cos", (1, 0), 1.0)]), _field([("const", None, 1.0)]), 0, grid) == 0.0

    def test_cutoff_weights_reduce_tail(self, grid):
        G = _field([("cos", (2, 1), 1.0)])
        f0 = _field([("cos", (2, 1), 1.0)])
        full = tail(G, f0, 1, grid)
        half = tail(G, f0, 1, grid, cutoff=np.where(grid.nodes[:, 0] < 0.5, 1.0, 0.0))
        assert half == pytest.approx(full / 2, rel=1e-12)


class TestTailFit:
    def _synthetic(self, rate):
        G = _field([("cos", (m, 0), float(np.exp(-rate * m))) for m in range(1, 15)])
        f0 = _field([("cos", (m, 0), 1.0) for m in range(1, 15)])
        return G, f0

    def test_recovers_rate(self, grid):
        sigma, resid = tail_decay_fit(*self._synthetic(0.5), range(2, 10), grid)
        assert sigma == pytest.approx(0.5, abs=0.1)

    def test_small_residual(self, grid):
        _, resid = tail_decay_fit(*self._synthetic(1.0), range(2, 10), grid)
        assert resid < 1e-2

    def test_needs_three_points(self, grid):
        with pytest.raises(ValueError):
            tail_decay_fit(*self._synthetic(0.5), [2, 3], grid)


def test_fft_table_is_exact_for_trig_polys():
    F = _field([("cos", (1, -2), "I1"), ("sin", (2, 0), 3.0)])
    I = np.array([[0.3, 0.4], [0.8, 0.1]])
    table = fft_mode_table({"F": F.eval}, I, 2, 8)
    for k in [(1, -2), (-1, 2), (2, 0), (0, 1)]:
        np.testing.assert_allclose(table.coeff("F", k), F.coeff(k).value(I) if k in F.modes else 0.0, atol=1e-15)
    with pytest.raises(ValueError):
        fft_mode_table({"F": F.eval}, I, 2, 5)


def test_parseval(grid):
    F = _field([("cos", (1, 0), "I1"), ("sin", (1, -1), "I2 + 1"), ("const", None, 0.5)])
    lhs, rhs = parseval_check(F, grid)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_mode_table_json_lists_modes():
    import json

    data = json.loads(mode_table_json(_field([("cos", (1, 0), "I1")])))
    assert data
