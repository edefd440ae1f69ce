import math

import numpy as np
import pytest

from nekmix import expr as ex
from nekmix.core import TWO_PI, ActionDomain, build_grid
from nekmix.mixing import (
    ResonantRegionError,
    SingularPhaseError,
    lemma_l1_bound,
    mixing_constant,
    mixing_constant_from_table,
    mode_l1_norms,
    oscillatory_integral,
    phase_data,
    u_field,
    u_values,
)
from nekmix.model import CoeffFn, IntegrablePart, TrigPolyField
from nekmix.spectral import fft_mode_table, mode_product


def _c(text, n):
    return CoeffFn(text, n)


class TestU:
    def test_linear_phase(self):
        I = np.linspace(0.1, 0.9, 7)[:, None]
        u = u_field(_c("sin(I1) + I1^2", 1), _c("I1", 1))(I)
        np.testing.assert_allclose(u, np.cos(I[:, 0]) + 2 * I[:, 0], rtol=1e-14)

    def test_quadratic_phase(self):
        I = np.linspace(1.0, 2.0, 5)[:, None]
        u = u_field(_c("1", 1), _c("0.5*I1^2", 1))(I)
        np.testing.assert_allclose(u, -1 / I[:, 0] ** 2, rtol=1e-14)

    def test_matches_fd_divergence(self, rng):
        a = _c("exp(-I1^2) * (1 + I1*I2)", 2)
        phi = _c("1.3*I1 - 0.7*I2 + 0.2*I1^2 + 0.1*I1*I2", 2)
        I = rng.uniform(0.2, 0.8, (10, 2))
        h = 1e-5

        def flux(J):
            g = np.real(phi.grad(J))
            return np.real(a.value(J))[:, None] * g / np.sum(g * g, axis=1, keepdims=True)

        div = sum((flux(I + h * np.eye(2)[j])[:, j] - flux(I - h * np.eye(2)[j])[:, j]) / (2 * h) for j in range(2))
        np.testing.assert_allclose(np.real(u_field(a, phi)(I)), div, atol=1e-5)

    def test_singular_phase(self):
        with pytest.raises(SingularPhaseError):
            u_values(np.ones(1), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1, 1)))


class TestOscillatoryIntegral:
    grid = build_grid(ActionDomain.box((0.0,), (1.0,)), 20_000, "midpoint")

    def test_lambda_zero(self):
        a = _c("bump([0.5], 0.3)", 1)
        assert oscillatory_integral(a, _c("I1", 1), 0.0, self.grid).real == pytest.approx(self.grid.integrate(a.value(self.grid.nodes)).real)

    def test_identity_self_check(self):
        a, phi = _c("bump([0.5], 0.3)", 1), _c("I1", 1)
        lhs = oscillatory_integral(a, phi, 50.0, self.grid)
        rhs = oscillatory_integral(u_field(a, phi), phi, 50.0, self.grid)
        assert abs(lhs + rhs / 50j) < 1e-8

    @pytest.mark.parametrize("lam", [10.0, 100.0, 1000.0])
    def test_decay_bound(self, lam):
        a, phi = _c("bump([0.5], 0.3) * (1 + I1)", 1), _c("I1 + 0.2*I1^2", 1)
        u_l1 = self.grid.integrate(np.abs(u_field(a, phi)(self.grid.nodes)))
        assert abs(oscillatory_integral(a, phi, lam, self.grid)) <= u_l1 / lam

    def test_refuses_under_resolved_grid(self):
        coarse = build_grid(ActionDomain.box((0.0,), (1.0,)), 50)
        with pytest.raises(ValueError, match="under-resolves"):
            oscillatory_integral(_c("1", 1), _c("I1", 1), 1000.0, coarse)


class TestL1Norms:
    grid = build_grid(ActionDomain.box((0.0,), (1.0,)), 4000, "midpoint")

    def test_zero(self):
        assert mode_l1_norms(_c("0", 1), self.grid) == (0.0, 0.0)

    def test_unit_mass_bump(self):
        raw = _c("bump([0.5], 0.3)", 1)
        m = self.grid.integrate(raw.value(self.grid.nodes)).real
        a = CoeffFn(ex.mul(ex.const(1 / m), raw.expr), 1)
        a_l1, g_l1 = mode_l1_norms(a, self.grid)
        assert a_l1 == pytest.approx(1.0, abs=1e-6)
        # total variation of a unimodal profile is twice its peak
        assert g_l1 == pytest.approx(2 / m, rel=1e-4)

    def test_complex_modulus(self):
        a = CoeffFn(ex.mul(ex.const(3 + 4j), ex.parse("bump([0.5], 0.3)", 1)), 1)
        re, im = a.parts()
        a_l1, _ = mode_l1_norms(a, self.grid)
        v = np.sqrt(np.real(ex.evaluate(re, self.grid.nodes)) ** 2 + np.real(ex.evaluate(im, self.grid.nodes)) ** 2)
        assert a_l1 == pytest.approx(self.grid.integrate(v), rel=1e-13)


class TestLemmaBound:
    def test_linear_phase_unit_gamma(self):
        assert lemma_l1_bound(2.5, 1.0, 1.0, 0.0, 2) == 2.5

    def test_arithmetic(self):
        assert lemma_l1_bound(2.0, 1.0, 0.5, 1.0, 2) == pytest.approx(20.0)

    def test_floor(self):
        with pytest.raises(ResonantRegionError):
            lemma_l1_bound(1.0, 1.0, 0.0, 1.0, 2)


class TestMixingConstant:
    def test_theta_independent_observable(self, twist2_zero):
        G = TrigPolyField.from_real_terms([("const", None, "I1")], 2)
        grid = build_grid(twist2_zero.system.domain, 64, window=twist2_zero.density.support)
        rep = mixing_constant(G, twist2_zero.density, 3, grid, twist2_zero.system.integrable)
        assert rep.C_direct == 0.0 and rep.C_lemma == 0.0 and rep.records == []

    def test_twist2_phase_data(self, twist2_zero):
        case = twist2_zero
        grid = build_grid(case.system.domain, 128, window=case.density.support)
        rep = mixing_constant(case.observable, case.density, 2, grid, case.system.integrable)
        expected = 0.0
        for r in rep.records:
            assert r.gamma == pytest.approx(math.hypot(*r.k), rel=1e-12)
            assert r.M == 0.0
            assert r.u_l1 <= r.lemma * (1 + 1e-12)
            a = mode_product(case.observable, case.density, r.k).a
            expected += 2 * mode_l1_norms(a, grid)[1] / math.hypot(*r.k)
        assert rep.C_lemma == pytest.approx(TWO_PI**2 * expected, rel=1e-12)
        assert rep.coordinates == "original"
        assert "C_G_direct" in rep.to_dict()

    def test_resonant_support_raises(self):
        dom = ActionDomain.ball((0.0, 0.0), 2.0)
        G = TrigPolyField.from_real_terms([("cos", (1, 0), 1.0)], 2)
        f0 = TrigPolyField.from_real_terms([("const", None, "bump([0, 0.5], 0.3)"), ("cos", (1, 0), "bump([0, 0.5], 0.3)")], 2)
        grid = build_grid(dom, 64)
        with pytest.raises(ResonantRegionError) as info:
            # omega_1 = I1^2 has a degenerate phase gradient on I1 = 0, inside the support
            mixing_constant(G, f0, 1, grid, IntegrablePart("I1^3/3 + 0.5*I2^2", 2))
        assert info.value.offending == [(1, 0)]

    def test_fft_table_path_agrees(self, twist2_zero):
        case = twist2_zero
        grid = build_grid(case.system.domain, 96, window=case.density.support)
        exact = mixing_constant(case.observable, case.density, 2, grid, case.system.integrable)
        tensor = grid.tensor_nodes().reshape(-1, 2)
        table = fft_mode_table({"G": case.observable.field.eval, "f0": case.density.field.eval}, tensor, 2, 8)
        sampled = mixing_constant_from_table(table, 2, grid, case.system.integrable, coordinates="original")
        assert sampled.C_direct == pytest.approx(exact.C_direct, rel=2e-2)

    def test_phase_data_for_twist(self, twist2_zero):
        grid = build_grid(twist2_zero.system.domain, 16)
        pd = phase_data((2, -1), twist2_zero.system.integrable, grid)
        assert pd.gamma == pytest.approx(math.sqrt(5))
        np.testing.assert_allclose(pd.grad_norm(), math.sqrt(5))
