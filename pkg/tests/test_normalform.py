import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nekmix.core import ActionDomain, SeededRng
from nekmix.estimator import sample_density
from nekmix.flow import FlowSpec
from nekmix.model import HamiltonianSystem, IntegrablePart, TrigPolyField, builtin_case, builtin_system
from nekmix.normalform import (
    SmallDivisorError,
    build_normal_form,
    calibrate_c_err,
    eq_change_error,
    homological_residual,
    nf_error_bound,
    nf_error_measured,
    normal_form_coordinates,
    normal_form_cutoff,
    poisson_bracket,
    pullback_check,
    solve_homological,
)
from nekmix.resonance import PartitionSpec, SmoothCutoff

SPEC = PartitionSpec(2, 0.15)


def _single_mode_system(eps, terms=None):
    n = 2
    terms = [("cos", (1, 0), eps)] if terms is None else terms
    return HamiltonianSystem(IntegrablePart("0.5*I1^2 + 0.5*I2^2", n), TrigPolyField.from_real_terms(terms, n), eps, ActionDomain.ball((1.0, 1.0), 0.7))


@pytest.fixture(scope="module")
def pkg():
    return build_normal_form(builtin_system("twist2", 1e-3), SPEC, dt_nf=0.1, probe_count=100)


@pytest.fixture(scope="module")
def samples():
    case = builtin_case("twist2", 1e-3)
    return sample_density(case.density, 3000, SeededRng(11))


class TestHomological:
    def test_single_mode_generator(self):
        eps = 0.01
        sys_ = _single_mode_system(eps)
        gen = solve_homological(sys_, PartitionSpec(1, 0.1), probe_count=300)
        rng = np.random.default_rng(0)
        th = rng.uniform(0, 2 * np.pi, (300, 2))
        I = gen.probes
        assert np.max(np.abs(homological_residual(gen, th, I))) < 1e-12
        # chi = eps sin(theta1) / I1 up to the sign convention
        chi = gen.chi.eval(th, I)
        expected = eps * np.sin(th[:, 0]) / I[:, 0]
        sign = np.sign(np.sum(chi * expected))
        np.testing.assert_allclose(chi, sign * expected, rtol=1e-12, atol=1e-15)

    def test_zero_perturbation(self):
        gen = solve_homological(_single_mode_system(0.0, []), PartitionSpec(1, 0.1), probe_count=10)
        assert gen.is_trivial

    def test_averaged_only(self):
        gen = solve_homological(_single_mode_system(0.01, [("const", None, "0.01*I1^2")]), PartitionSpec(1, 0.1), probe_count=10)
        assert gen.is_trivial
        assert gen.averaged.value(np.array([[2.0, 0.0]]))[0] == pytest.approx(0.04)

    def test_small_divisor_reported(self):
        with pytest.raises(SmallDivisorError, match=r"k=\(1, -1\)"):
            solve_homological(builtin_system("twist2", 1e-3), SPEC, probes=np.array([[1.0, 1.0]]))

    def test_divisors_recorded(self):
        gen = solve_homological(builtin_system("twist2", 1e-3), SPEC, probe_count=200)
        assert set(gen.small_divisors) == {(1, 0), (1, -1)}
        for k, v in gen.small_divisors.items():
            assert v >= 0.15 * np.linalg.norm(k) - 1e-12


class TestPoissonBracket:
    def test_matches_finite_differences(self, rng):
        F = TrigPolyField.from_real_terms([("cos", (1, 0), "I1^2"), ("sin", (1, -1), "I2")], 2)
        G = TrigPolyField.from_real_terms([("cos", (0, 1), "I1*I2"), ("const", None, "I1")], 2)
        B = poisson_bracket(F, G)
        th, I = rng.uniform(0, 6, (6, 2)), rng.uniform(0.2, 1.0, (6, 2))
        expected = np.sum(F.grad_theta(th, I) * G.grad_I(th, I) - F.grad_I(th, I) * G.grad_theta(th, I), axis=1)
        np.testing.assert_allclose(B.eval(th, I), expected, atol=1e-12)

    def test_antisymmetric(self, rng):
        F = TrigPolyField.from_real_terms([("cos", (1, 1), "I1")], 2)
        G = TrigPolyField.from_real_terms([("sin", (2, -1), "I2^2")], 2)
        th, I = rng.uniform(0, 6, (4, 2)), rng.uniform(0, 1, (4, 2))
        np.testing.assert_allclose(poisson_bracket(F, G).eval(th, I), -poisson_bracket(G, F).eval(th, I), atol=1e-13)


class TestPackage:
    def test_identity_at_zero_eps(self):
        p = build_normal_form(builtin_system("twist2", 0.0), SPEC, dt_nf=0.1, probe_count=20)
        assert p.is_identity
        assert p.r_inf == 0.0
        th, I = np.ones((3, 2)), np.full((3, 2), 0.5)
        np.testing.assert_array_equal(p.transform(th, I)[1], I)

    def test_diagnostics(self, pkg):
        assert pkg.det_error < 1e-6
        assert pkg.symplectic_error < 1e-6
        assert pkg.roundtrip_error < 1e-12
        assert 0 < pkg.r_inf < 1e-4
        summary = json.loads(pkg.to_json())
        assert summary["r_inf"] == pytest.approx(pkg.r_inf)

    def test_displacement_halves_with_eps(self, pkg):
        half = build_normal_form(builtin_system("twist2", 5e-4), SPEC, dt_nf=0.1, probe_I=pkg.probe_I)
        assert pkg.c0 / half.c0 == pytest.approx(2.0, rel=0.25)

    def test_remainder_ratio(self, pkg):
        half = build_normal_form(builtin_system("twist2", 5e-4), SPEC, dt_nf=0.1, probe_I=pkg.probe_I)
        assert pkg.r_inf / half.r_inf == pytest.approx(4.0, abs=0.5)

    def test_inverse_round_trip(self, pkg, rng):
        th = rng.uniform(0, 2 * np.pi, (10, 2))
        I = pkg.probe_I[:10]
        back = pkg.inverse(*pkg.transform(th, I, wrap=False), wrap=False)
        np.testing.assert_allclose(back[0], th, atol=1e-12)
        np.testing.assert_allclose(back[1], I, atol=1e-12)


class TestErrorBound:
    def test_time_zero(self):
        assert nf_error_bound(2.0, 0.0, 1e-6, 1.0) == pytest.approx(2e-6)

    def test_time_ten(self):
        assert nf_error_bound(1.0, 10.0, 1e-8, 1.0) == pytest.approx(1.11e-6)

    def test_zero_remainder(self):
        assert nf_error_bound(3.0, 50.0, 0.0, 2.0) == 0.0

    @given(st.floats(0, 10), st.floats(-1e3, 1e3), st.floats(0, 1), st.floats(0, 10))
    def test_nonnegative_and_even_in_t(self, g, t, r, c):
        assert nf_error_bound(g, t, r, c) == nf_error_bound(g, -t, r, c) >= 0

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            nf_error_bound(1.0, 1.0, -1.0, 1.0)


class TestMeasuredError:
    def test_zero_eps(self, samples):
        case = builtin_case("twist2", 0.0)
        p = build_normal_form(case.system, SPEC, dt_nf=0.1, probe_count=20)
        flow = FlowSpec.exact(case.system.integrable)
        w = np.ones(500)
        assert nf_error_measured(case.observable, samples.theta[:500], samples.action[:500], w, p, 10.0, flow) < 1e-12

    def test_growth_at_most_quadratic(self, pkg, samples):
        case = builtin_case("twist2", 1e-3)
        flow = FlowSpec.for_system(case.system, dt=1e-2)
        w = np.ones(samples.count)
        times = np.array([1.0, 10.0, 100.0])
        errs = np.array([nf_error_measured(case.observable, samples.theta, samples.action, w, pkg, t, flow) for t in times])
        slope = np.polyfit(np.log(times), np.log(errs), 1)[0]
        assert slope <= 2.2

    def test_calibrated_bound_covers_measurements(self, pkg, samples):
        case = builtin_case("twist2", 1e-3)
        flow = FlowSpec.for_system(case.system, dt=1e-2)
        w = np.ones(samples.count)
        times = np.array([1.0, 2.0, 5.0, 10.0, 20.0])
        errs = np.array([nf_error_measured(case.observable, samples.theta, samples.action, w, pkg, t, flow) for t in times])
        cal = calibrate_c_err(times, errs, 2.0, pkg.r_inf)
        bound = np.array([nf_error_bound(2.0, t, pkg.r_inf, cal.C_err) for t in times])
        assert np.all(errs[::2] <= bound[::2] * (1 + 1e-12))
        if cal.holdout_ok:
            assert np.all(errs <= bound * (1 + 1e-12))

    def test_pullback(self, pkg, samples):
        case = builtin_case("twist2", 1e-3)
        flow = FlowSpec.for_system(case.system, dt=1e-2)
        diff, se = pullback_check(case.observable, samples.theta[:100], samples.action[:100], np.ones(100), pkg, 2.0, flow)
        assert diff <= 3 * se + 1e-5


class TestCalibration:
    def test_max_ratio_on_training_times(self):
        cal = calibrate_c_err([1, 2, 3, 4], [2.0, 1.0, 4.0, 1.0], 1.0, 1.0)
        # shapes 3, 7, 13, 21; training ratios 2/3 and 4/13
        assert cal.C_err == pytest.approx(2 / 3)
        assert cal.train_times == [1.0, 3.0]
        assert cal.holdout_ok

    def test_holdout_failure_detected(self):
        cal = calibrate_c_err([1, 2], [1.0, 100.0], 1.0, 1.0)
        assert not cal.holdout_ok

    def test_override(self):
        cal = calibrate_c_err([1, 2], [1.0, 1.0], 1.0, 1.0, override=5.0)
        assert cal.C_err == 5.0 and cal.source == "override"


class TestEquilibriumChange:
    def test_identity_transform(self):
        case = builtin_case("twist2", 0.0)
        p = build_normal_form(case.system, SPEC, dt_nf=0.1, probe_count=20)
        cut = SmoothCutoff(SPEC, case.system.integrable, 0.0, 0.1)
        assert eq_change_error(case.observable, case.density, p, cut, resolution=24, theta_res=8) == pytest.approx(0.0, abs=1e-12)

    def test_ratio_to_displacement_bounded(self):
        ratios = []
        for eps in (1e-2, 1e-3, 1e-4):
            case = builtin_case("twist2", eps)
            p = build_normal_form(case.system, SPEC, dt_nf=0.1, probe_count=60)
            cut = normal_form_cutoff(p, SPEC, case.system.integrable, 0.1)
            coords = normal_form_coordinates(case.observable, case.density, p, cut, resolution=24, theta_res=8)
            e_eq = eq_change_error(case.observable, case.density, p, cut, coords=coords)
            ratios.append(e_eq / max(p.c0, p.c1))
        assert max(ratios) / min(ratios) < 10

    def test_action_only_crude_bound(self):
        # G and f0 independent of theta: E_eq <= ||G||_C1 ||Phi - Id||_C0 * mass
        dom = ActionDomain.ball((0.0, 0.0), 2.0)
        from nekmix.model import EnsembleDensity, Observable

        prof = "bump([1.386, 0.574], 0.18)"
        f0 = EnsembleDensity(TrigPolyField.from_real_terms([("const", None, prof)], 2), dom)
        G = Observable(TrigPolyField.from_real_terms([("const", None, "I1 + 0.5*I2^2")], 2), dom)
        system = builtin_system("twist2", 1e-3)
        p = build_normal_form(system, SPEC, dt_nf=0.1, probe_count=60)
        cut = normal_form_cutoff(p, SPEC, system.integrable, 0.1)
        e_eq = eq_change_error(G, f0, p, cut, resolution=32, theta_res=8)
        g_c1 = np.sqrt(1 + 2.0**2)
        assert e_eq <= g_c1 * p.c0 * (1 + 1e-9)
