"""Acceptance criteria C1-C10, each reported as one PASS/FAIL summary line."""

import json
import math
import time
from importlib import resources
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from nekmix import expr as ex
from nekmix.cli import cli
from nekmix.config import load_config
from nekmix.core import ActionDomain, PhasePoint, SeededRng, build_grid
from nekmix.estimator import EstimatorConfig, deviation_series, sample_density
from nekmix.flow import FlowSpec, conjugacy_residual, flow_jacobian_det, trajectory
from nekmix.mixing import lemma_l1_bound, mixing_constant, mode_l1_norms, oscillatory_integral, phase_data_for, u_field
from nekmix.model import CoeffFn, EnsembleDensity, IntegrablePart, Observable, TrigPolyField, builtin_case, builtin_system
from nekmix.normalform import NormalFormFlow, build_normal_form, homological_residual, nonresonant_probes, solve_homological
from nekmix.pipeline import Run, run_verify
from nekmix.resonance import PartitionSpec, default_mass_grid, min_distance, resonant_mass
from nekmix.spectral import tail

TIMES = [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000]


def _config_path(name):
    return Path(str(resources.files("nekmix") / "configs" / name))


def _random_amplitude(rng):
    """Bump times a random quadratic, supported inside [0,1]^2."""
    c = rng.uniform(0.35, 0.65, 2)
    w = rng.uniform(0.2, 0.3)
    p = rng.normal(size=6)
    I1, I2 = ex.var(0), ex.var(1)
    poly = ex.add(ex.const(p[0] + 2.0), ex.mul(ex.const(p[1]), I1), ex.mul(ex.const(p[2]), I2),
                  ex.mul(ex.const(p[3]), I1, I1), ex.mul(ex.const(p[4]), I1, I2), ex.mul(ex.const(p[5]), I2, I2))
    return CoeffFn(ex.mul(ex.bump(tuple(c), w), poly), 2)


def _random_phase(rng, gmax=3.0):
    """Linear plus small quadratic phase with |grad phi| in [0.5, gmax] on the unit box."""
    ang = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(1.0, gmax - 0.9)
    b = speed * np.array([np.cos(ang), np.sin(ang)])
    Q = rng.uniform(-0.25, 0.25, (2, 2))
    Q = 0.5 * (Q + Q.T)
    I1, I2 = ex.var(0), ex.var(1)
    e = ex.add(ex.mul(ex.const(b[0]), I1), ex.mul(ex.const(b[1]), I2),
               ex.mul(ex.const(0.5 * Q[0, 0]), I1, I1), ex.mul(ex.const(Q[0, 1]), I1, I2), ex.mul(ex.const(0.5 * Q[1, 1]), I2, I2))
    return CoeffFn(e, 2)


@pytest.mark.criterion(1, "IBP identity")
def test_c1_ibp_identity(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    grid = build_grid(ActionDomain.box((0.0, 0.0), (1.0, 1.0)), 500, "midpoint")
    worst = 0.0
    for _ in range(20):
        a, phi = _random_amplitude(rng), _random_phase(rng)
        u = u_field(a, phi)
        for lam in (1.0, 10.0, 100.0):
            lhs = oscillatory_integral(a, phi, lam, grid)
            rhs = oscillatory_integral(u, phi, lam, grid)
            worst = max(worst, abs(lhs + rhs / (1j * lam)))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max residual {worst:.2e} (< 1e-8), {elapsed:.1f} s (< 30 s)")
    assert worst < 1e-8
    assert elapsed < 30


@pytest.mark.criterion(2, "L1 dominance")
def test_c2_l1_dominance(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    grid = build_grid(ActionDomain.box((0.0, 0.0), (1.0, 1.0)), 200, "midpoint")
    violations = 0
    tightest = math.inf
    for _ in range(100):
        a, phi = _random_amplitude(rng), _random_phase(rng)
        av = a.value(grid.nodes)
        pd = phase_data_for(phi, grid, np.abs(av) > 0)
        a_l1, g_l1 = mode_l1_norms(a, grid)
        bound = lemma_l1_bound(g_l1, a_l1, pd.gamma, pd.M, 2)
        direct = grid.integrate(np.abs(u_field(a, phi)(grid.nodes)))
        violations += direct > bound
        tightest = min(tightest, bound / direct)
    elapsed = time.perf_counter() - start
    record_property("detail", f"{violations} violations in 100 cases, min bound/direct {tightest:.3f}, {elapsed:.1f} s")
    assert violations == 0
    assert elapsed < 60


@pytest.mark.criterion(3, "integrable mixing")
def test_c3_integrable_mixing(record_property, twist2_zero):
    start = time.perf_counter()
    case = twist2_zero
    G, f0 = case.observable, case.density
    K = G.field.band_limit + f0.field.band_limit
    grid = build_grid(case.system.domain, 256, "midpoint", window=f0.support)
    rep = mixing_constant(G, f0, K, grid, case.system.integrable)
    R = tail(G, f0, K, grid)
    series = deviation_series(G, FlowSpec.exact(case.system.integrable), f0, TIMES, EstimatorConfig(samples=100_000, seed=3))
    bound = rep.C_direct / series.times + R
    slack = bound + 3 * series.stderr - series.deviation
    elapsed = time.perf_counter() - start
    record_property("detail", f"C_G={rep.C_direct:.4g}, R={R:.2g}, min slack {slack.min():.3g} over {len(TIMES)} times, {elapsed:.1f} s")
    assert np.all(slack >= 0)
    assert elapsed < 300


@pytest.mark.criterion(4, "1/t rate")
def test_c4_one_over_t_rate(record_property):
    # rho ~ (1 - I1) on [0,1]^2 with a sin(theta1) modulation and G = cos(theta1):
    # <G>_t = -(1/t - sin t / t^2) exactly, equilibrium 0
    n = 2
    dom = ActionDomain.box((0.0, 0.0), (1.0, 1.0))
    prof = ex.add(ex.const(1.0), ex.mul(ex.const(-1.0), ex.var(0)))
    dens = TrigPolyField.from_real_terms([("const", None, prof), ("sin", (1, 0), prof)], n)
    f0 = EnsembleDensity(dens, dom, allow_boundary_mass=True)
    G = Observable(TrigPolyField.from_real_terms([("cos", (1, 0), 1.0)], n), dom)
    h = CoeffFn(ex.mul(ex.const(0.5), ex.add(ex.mul(ex.var(0), ex.var(0)), ex.mul(ex.var(1), ex.var(1)))), n)
    times = np.geomspace(10, 1000, 25)
    grid = build_grid(dom, (900, 4), "gauss-legendre")
    series = deviation_series(G, FlowSpec.exact(IntegrablePart(h, n)), f0, times, EstimatorConfig(kind="quadrature", grid=grid))
    oracle = np.abs(1 / times - np.sin(times) / times**2)
    slope = np.polyfit(np.log(times), np.log(series.deviation), 1)[0]
    record_property("detail", f"slope {slope:.4f} (target -1 +- 0.15), max |dev - oracle| {np.max(np.abs(series.deviation - oracle)):.1e}")
    np.testing.assert_allclose(series.deviation, oracle, rtol=1e-6, atol=1e-10)
    assert abs(slope + 1.0) <= 0.15


@pytest.mark.criterion(5, "symplectic integrator")
def test_c5_symplectic_integrator(record_property):
    system = builtin_system("pendulum1", 1e-2)
    flow = FlowSpec.for_system(system, dt=1e-2)
    rng = np.random.default_rng(55)
    starts = [PhasePoint(rng.uniform(0, 2 * np.pi, 1), rng.uniform(0.6, 1.4, 1)) for _ in range(4)]
    drift = max(trajectory(flow, p, np.arange(1.0, 1001.0)).energy_drift for p in starts)
    det = max(abs(flow_jacobian_det(flow, p, 10.0) - 1.0) for p in starts)
    th0 = np.array([p.theta for p in starts])
    I0 = np.array([p.action for p in starts])
    rt, ra = FlowSpec.for_system(system, dt=1e-2 / 32).evolve_arrays(th0, I0, 10.0, wrap=False)
    errs = []
    for dt in (2e-2, 1e-2):
        a, b = FlowSpec.for_system(system, dt=dt).evolve_arrays(th0, I0, 10.0, wrap=False)
        errs.append(np.max(np.abs(np.concatenate([a - rt, b - ra]))))
    ratio = errs[0] / errs[1]
    record_property("detail", f"energy drift {drift:.2e} (< 1e-6), |det - 1| {det:.1e} (< 1e-5), error ratio {ratio:.3f} (4 +- 20%)")
    assert drift < 1e-6
    assert det < 1e-5
    assert abs(ratio - 4.0) <= 0.8


@pytest.mark.criterion(6, "normal form")
def test_c6_normal_form(record_property):
    spec = PartitionSpec(2, 0.15)
    system = builtin_system("twist2", 1e-3)
    gen = solve_homological(system, spec, probe_count=1000)
    probes = nonresonant_probes(system.domain, spec, system.integrable, 1000, SeededRng(61))
    theta = np.random.default_rng(62).uniform(0, 2 * np.pi, probes.shape)
    hres = float(np.max(np.abs(homological_residual(gen, theta, probes))))

    pkg = build_normal_form(system, spec, dt_nf=0.1, probe_count=150)
    flow = FlowSpec.for_system(system, dt=1e-2)
    nf_flow = NormalFormFlow(pkg, dt=0.1)
    conj = {t: conjugacy_residual(pkg.transform, flow, nf_flow, t, theta[:5], pkg.probe_I[:5]) for t in (1.0, 10.0, 100.0)}

    half = build_normal_form(builtin_system("twist2", 5e-4), spec, dt_nf=0.1, probe_I=pkg.probe_I)
    ratio = pkg.r_inf / half.r_inf
    record_property(
        "detail",
        f"homological residual {hres:.1e} (< 1e-10), conjugacy max {max(conj.values()):.1e} (<= 1e-5), r ratio {ratio:.3f} (4 +- 0.5)",
    )
    assert probes.shape[0] == 1000
    assert hres < 1e-10
    assert max(conj.values()) <= 1e-5
    assert abs(ratio - 4.0) <= 0.5


@pytest.mark.criterion(7, "main theorem")
def test_c7_main_theorem(record_property):
    start = time.perf_counter()
    cfg = load_config(_config_path("theorem.toml"))
    run = Run(cfg, float(cfg.epsilon[0]), cfg.estimator.seed)
    res = run_verify(run)
    rep = res.report
    elapsed = time.perf_counter() - start
    inside = [v for v, w in zip(rep.verdicts, rep.in_window) if w]
    ok = all(v in ("holds", "holds-within-3sigma") for v in inside)
    record_property(
        "detail",
        f"K={run.spec.K}, alpha={run.spec.alpha:.3g}, P_res={rep.details['P_res']:.3g}, "
        f"{len(inside)}/{len(TIMES)} times in window, verdicts {sorted(set(inside))}, {elapsed:.0f} s (< 1200 s)",
    )
    assert list(rep.times) == TIMES
    assert ok
    assert elapsed < 1200


@pytest.mark.criterion(8, "resonant mass")
def test_c8_resonant_mass(record_property):
    case = builtin_case("twist2", 0.0)
    f0, integ = case.density, case.system.integrable
    spec = PartitionSpec(3, 0.05)
    grid = default_mass_grid(f0)
    p_quad = resonant_mass(f0, spec, integ, grid, conservative=False)
    N = 100_000
    samples = sample_density(f0, N, SeededRng(88))
    d, _ = min_distance(integ.frequency(samples.action), spec)
    p_mc = float(np.mean(d < spec.alpha))
    sigma = math.sqrt(p_mc * (1 - p_mc) / N)
    alphas = [0.01, 0.03, 0.05, 0.08, 0.12]
    sweep = [resonant_mass(f0, PartitionSpec(3, a), integ, grid) for a in alphas]
    inversions = sum(b < a for a, b in zip(sweep, sweep[1:]))
    record_property("detail", f"quadrature {p_quad:.4f} vs MC {p_mc:.4f} +- {sigma:.4f}, {inversions} inversions over alpha sweep")
    assert 0 < p_quad < 1
    assert abs(p_quad - p_mc) <= 3 * sigma
    assert inversions == 0


@pytest.mark.criterion(9, "negative control")
def test_c9_negative_control(record_property, tmp_path):
    result = CliRunner().invoke(cli, ["verify", "--config", str(_config_path("fault.toml")), "--out", str(tmp_path)])
    run_dir = next(tmp_path.iterdir())
    rows = (run_dir / "verdict.csv").read_text().splitlines()[1:]
    violated = sum(r.endswith(",violated") for r in rows)
    record_property("detail", f"exit code {result.exit_code}, {violated}/{len(rows)} rows violated")
    assert result.exit_code == 2
    assert violated >= 1


@pytest.mark.criterion(10, "determinism")
def test_c10_determinism(record_property, quickstart_runs):
    first, second = quickstart_runs
    names = sorted(p.name for p in first.iterdir())
    assert names == sorted(p.name for p in second.iterdir())
    payload = [n for n in names if n != "manifest.json"]
    differing = [n for n in payload if (first / n).read_bytes() != (second / n).read_bytes()]
    m1 = json.loads((first / "manifest.json").read_text())
    m2 = json.loads((second / "manifest.json").read_text())
    m1.pop("timestamp")
    m2.pop("timestamp")
    record_property("detail", f"{len(payload) - len(differing)}/{len(payload)} artifacts byte-identical, manifests equal except timestamp: {m1 == m2}")
    assert not differing
    assert m1 == m2
