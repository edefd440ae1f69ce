"""Ensemble averages, equilibrium values and empirical deviation series."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .core import TWO_PI, ActionGrid, SeededRng, stable_sum, wrap_angles
from .model import EnsembleDensity, Observable, theta_grid

__all__ = [
    "SamplingError",
    "SampleSet",
    "DeviationSeries",
    "EstimatorConfig",
    "sample_density",
    "ensemble_average",
    "angular_average",
    "equilibrium_value",
    "deviation_series",
    "quadrature_average",
    "discretization_error",
]

BATCH = 65_536
MIN_ACCEPTANCE = 1e-4


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleSet:
    theta: np.ndarray
    action: np.ndarray
    seed: int
    stream: int
    acceptance_rate: float
    proposed: int

    @property
    def count(self) -> int:
        return self.theta.shape[0]

    def subset(self, m: int) -> "SampleSet":
        return SampleSet(self.theta[:m], self.action[:m], self.seed, self.stream, self.acceptance_rate, self.proposed)


def sample_density(f0: EnsembleDensity, count: int, rng: SeededRng) -> SampleSet:
    """I.i.d. draws from ``f0`` by rejection from uniform on ``T^n x`` (domain within the support box).

    Proposals come in fixed batches of ``BATCH`` so the accepted sequence does
    not depend on ``count``: a larger request extends a smaller one.
    """
    if count < 1:
        raise ValueError("count must be positive")
    n = f0.dim
    gen = rng.generator()
    lo, hi = f0.domain.bbox()
    if f0.support is not None:
        lo, hi = f0.support
    fmax = f0.sup.bound
    if not fmax > 0:
        raise SamplingError("density sup bound is not positive")
    got_th, got_I = [], []
    accepted = 0
    proposed = 0
    while accepted < count:
        th = TWO_PI * gen.random((BATCH, n))
        I = lo + (hi - lo) * gen.random((BATCH, n))
        u = gen.random(BATCH)
        inside = f0.domain.contains(I)
        vals = np.zeros(BATCH)
        vals[inside] = f0(th[inside], I[inside])
        if np.any(vals > fmax * (1 + 1e-12)):
            raise SamplingError("density exceeds its certified sup bound; increase probe resolution")
        keep = inside & (u * fmax < vals)
        proposed += BATCH
        got_th.append(th[keep])
        got_I.append(I[keep])
        accepted += int(np.count_nonzero(keep))
        if accepted / proposed < MIN_ACCEPTANCE and proposed >= BATCH:
            raise SamplingError(
                f"rejection acceptance rate {accepted / proposed:.2e} below {MIN_ACCEPTANCE:g}; density too peaked"
            )
    theta = wrap_angles(np.concatenate(got_th)[:count])
    action = np.concatenate(got_I)[:count]
    theta.setflags(write=False)
    action.setflags(write=False)
    return SampleSet(theta, action, rng.seed, rng.stream, accepted / proposed, proposed)


def _mean_stderr(values: np.ndarray) -> tuple[float, float]:
    N = values.size
    mean = math.fsum(values) / N
    if N < 2:
        return mean, 0.0
    var = math.fsum((values - mean) ** 2) / (N - 1)
    return mean, math.sqrt(var / N)


def ensemble_average(G: Observable, flow, samples: SampleSet, t: float, weights=None) -> tuple[float, float]:
    """Monte Carlo ``<G>_t`` and its standard error.

    ``weights`` (optional, per sample) estimate ``int G(Phi^t) w f0``.
    """
    if samples.count == 0:
        raise ValueError("empty sample set")
    th, ac = flow.evolve_arrays(samples.theta, samples.action, t)
    vals = G(th, ac)
    if weights is not None:
        vals = vals * np.asarray(weights)
    return _mean_stderr(vals)


def angular_average(G: Observable, I) -> np.ndarray | float:
    """``<G>_theta(I)``: the zero Fourier mode."""
    fld = G.field if isinstance(G, Observable) else G
    I = np.asarray(I, dtype=float)
    out = np.real(fld.zero_mode().value(I))
    return float(out[0]) if I.ndim == 1 else out


def equilibrium_value(G: Observable, f0: EnsembleDensity, grid: ActionGrid | None = None) -> float:
    """``(2 pi)^n int G_0(I) f_{0,0}(I) dI`` by quadrature."""
    grid = f0.quad_grid if grid is None else grid
    if grid.size == 0:
        return 0.0
    g0 = np.real(G.field.zero_mode().value(grid.nodes))
    rho = f0.marginal(grid.nodes)
    return float(grid.integrate(g0 * rho))


def quadrature_average(G: Observable, f0: EnsembleDensity, omega, t: float, grid: ActionGrid | None = None, theta_res: int | None = None, chunk: int = 4096) -> float:
    """``<G>_t`` for the exact integrable flow by ``(theta, I)`` quadrature.

    The uniform angle rule is exact for trigonometric polynomials of degree
    below ``theta_res`` (default ``2 (K_G + K_f0) + 1``).
    """
    grid = f0.quad_grid if grid is None else grid
    n = f0.dim
    if theta_res is None:
        theta_res = 2 * (G.field.band_limit + f0.field.band_limit) + 1
    thetas = theta_grid(n, theta_res)
    wth = (TWO_PI / theta_res) ** n
    partial = []
    for s in range(0, grid.size, chunk):
        I = grid.nodes[s : s + chunk]
        w = grid.weights[s : s + chunk]
        om = omega(I)
        th = thetas[None, :, :] + t * om[:, None, :]
        Ib = np.broadcast_to(I[:, None, :], th.shape)
        g = G(th.reshape(-1, n), Ib.reshape(-1, n)).reshape(I.shape[0], -1)
        f = f0(np.broadcast_to(thetas[None], th.shape).reshape(-1, n), Ib.reshape(-1, n)).reshape(I.shape[0], -1)
        partial.append(((g * f).sum(axis=1) * wth) * w)
    return stable_sum(np.concatenate(partial)) if partial else 0.0


@dataclass
class EstimatorConfig:
    kind: str = "monte-carlo"
    samples: int = 10_000
    seed: int = 0
    stream: int = 0
    grid: ActionGrid | None = None
    theta_res: int | None = None

    def __post_init__(self):
        if self.kind not in ("monte-carlo", "quadrature"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")


@dataclass
class DeviationSeries:
    times: np.ndarray
    deviation: np.ndarray
    stderr: np.ndarray
    mean: np.ndarray
    equilibrium: float
    estimator: str
    seed: int
    samples: int
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "deviation", "stderr", "estimator", "seed"])
        for t, d, s in zip(self.times, self.deviation, self.stderr):
            w.writerow([f"{t:.17g}", f"{d:.17g}", f"{s:.17g}", self.estimator, self.seed])
        return buf.getvalue()


def deviation_series(G: Observable, flow, f0: EnsembleDensity, times, config: EstimatorConfig, samples: SampleSet | None = None, on_step=None) -> DeviationSeries:
    """``|<G>_t - <<G>_theta>_0|`` on a time grid.

    Monte Carlo reuses one sample set for every ``t`` (common random
    numbers) and integrates progressively between grid times;
    ``on_step(t, theta, action)`` sees the evolved samples at each grid time.
    The quadrature estimator needs an exact integrable flow.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or np.any(np.diff(times) <= 0) or times[0] < 0:
        raise ValueError("times must be nonnegative and strictly increasing")
    eq = equilibrium_value(G, f0)
    if config.kind == "quadrature":
        if flow.kind != "exact":
            raise ValueError("the quadrature estimator needs the exact integrable flow")
        means = np.array([quadrature_average(G, f0, flow.integrable.frequency, t, config.grid, config.theta_res) for t in times])
        grid = config.grid if config.grid is not None else f0.quad_grid
        return DeviationSeries(times, np.abs(means - eq), np.zeros_like(times), means, eq, "quadrature", config.seed, int(grid.size))
    if samples is None:
        samples = sample_density(f0, config.samples, SeededRng(config.seed, config.stream))
    th, ac = samples.theta, samples.action
    means, errs = [], []
    prev = 0.0
    for t in times:
        th, ac = flow.evolve_arrays(th, ac, t - prev)
        prev = t
        if on_step is not None:
            on_step(t, th, ac)
        m, s = _mean_stderr(G(th, ac))
        means.append(m)
        errs.append(s)
    means = np.array(means)
    return DeviationSeries(
        times,
        np.abs(means - eq),
        np.array(errs),
        means,
        eq,
        "monte-carlo",
        config.seed,
        samples.count,
        {"acceptance_rate": samples.acceptance_rate},
    )


def discretization_error(G: Observable, flow, samples: SampleSet, times, subsample: int = 2000) -> np.ndarray:
    """Richardson estimate of the time-step error of ``<G>_t`` per time.

    Runs the same samples at ``dt`` and ``dt/2``; for an order-2 scheme the
    error of the ``dt`` run is about ``4/3 |mean_dt - mean_dt/2|``.  Exact
    flows return zeros.
    """
    times = np.asarray(times, dtype=float)
    if flow.kind == "exact":
        return np.zeros_like(times)
    from .flow import FlowSpec

    fine = FlowSpec(flow.kind, flow.integrable, flow.perturbation, flow.dt / 2, flow.scheme, flow.jit)
    sub = samples.subset(min(subsample, samples.count))
    out = []
    tha = thb = sub.theta
    aca = acb = sub.action
    prev = 0.0
    for t in times:
        tha, aca = flow.evolve_arrays(tha, aca, t - prev)
        thb, acb = fine.evolve_arrays(thb, acb, t - prev)
        prev = t
        # paired difference: common samples cancel most Monte Carlo noise
        out.append(4.0 / 3.0 * abs(math.fsum(G(tha, aca) - G(thb, acb)) / sub.count))
    return np.array(out)
