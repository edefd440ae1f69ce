"""Single-step (optionally iterated) Lie normal form on the nonresonant region.

Conventions: ``{F, G} = sum_j dF/dtheta_j dG/dI_j - dF/dI_j dG/dtheta_j``.
The transform ``Phi`` is the time-1 flow of ``X_chi`` (``theta' = d chi/dI``,
``I' = -d chi/dtheta``), so ``H o Phi = H + {H, chi} + 1/2 {{H, chi}, chi} + ...``.
The generator solves ``{h, chi} = <f> - f_{<=K}``, i.e.
``chi_k = f_k / (i k . omega)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .core import TWO_PI, ActionGrid, SeededRng, build_grid, restrict_grid, torus_distance, wrap_angles
from .flow import FlowError, FlowSpec, numerical_jacobian
from .model import CoeffFn, is_representative, EnsembleDensity, HamiltonianSystem, IntegrablePart, Observable, TrigPolyField, theta_grid
from .resonance import PartitionSpec, SmoothCutoff, min_distance
from .spectral import ModeTable, fft_mode_table

__all__ = [
    "SmallDivisorError",
    "MarginError",
    "Generator",
    "NormalFormPackage",
    "NormalFormFlow",
    "NormalFormCoordinates",
    "poisson_bracket",
    "solve_homological",
    "homological_residual",
    "build_package",
    "build_normal_form",
    "nf_error_bound",
    "nf_error_measured",
    "calibrate_c_err",
    "eq_change_error",
    "pullback_check",
    "nonresonant_probes",
    "normal_form_coordinates",
    "normal_form_cutoff",
    "nf_tail",
    "gtilde_c1",
    "conjugate_terms",
    "CErrCalibration",
]

SMALL_DIVISOR_FLOOR = 1e-8


class SmallDivisorError(ValueError):
    pass


class MarginError(ValueError):
    pass


# ---------------------------------------------------------------------------
# symbolic brackets


def poisson_bracket(F: TrigPolyField, G: TrigPolyField) -> TrigPolyField:
    """``{F, G}`` computed mode by mode with symbolic action derivatives."""
    if F.dim != G.dim:
        raise ValueError("dimension mismatch")
    n = F.dim
    modes: dict = {}
    for k, fk in F.modes.items():
        for l, gl in G.modes.items():
            terms = []
            for j in range(n):
                if k[j] != 0:
                    dg = gl.grad_exprs[j]
                    if not ex.is_zero(dg):
                        terms.append(ex.mul(ex.const(float(k[j])), fk.expr, dg))
                if l[j] != 0:
                    df = fk.grad_exprs[j]
                    if not ex.is_zero(df):
                        terms.append(ex.mul(ex.const(-float(l[j])), df, gl.expr))
            if not terms:
                continue
            m = tuple(a + b for a, b in zip(k, l))
            c = ex.mul(ex.const(1j), ex.add(*terms))
            modes[m] = ex.add(modes[m], c) if m in modes else c
    out = TrigPolyField({m: CoeffFn(e, n) for m, e in modes.items()}, n, real=False)
    out.real = F.real and G.real
    return out


# ---------------------------------------------------------------------------


def nonresonant_probes(domain, spec: PartitionSpec, integrable: IntegrablePart, count: int, rng: SeededRng, margin: float = 0.0, boundary_margin: float = 0.0, max_batches: int = 200) -> np.ndarray:
    """Uniform action probes with resonance distance ``>= alpha + margin``."""
    gen = rng.generator()
    lo, hi = domain.bbox()
    n = domain.dim
    got = []
    total = 0
    for _ in range(max_batches):
        cand = lo + (hi - lo) * gen.random((4096, n))
        cand = cand[domain.contains(cand, boundary_margin)]
        if cand.shape[0]:
            d, _ = min_distance(integrable.frequency(cand), spec)
            cand = cand[d >= spec.alpha + margin]
        got.append(cand)
        total += cand.shape[0]
        if total >= count:
            break
    out = np.concatenate(got)[:count] if got else np.zeros((0, n))
    return out


@dataclass
class Generator:
    chi: TrigPolyField
    system: HamiltonianSystem
    integrable: IntegrablePart
    perturbation: TrigPolyField
    spec: PartitionSpec
    small_divisors: dict
    probes: np.ndarray
    step: int = 1

    @property
    def is_trivial(self) -> bool:
        return len(self.chi.modes) == 0

    @property
    def averaged(self) -> CoeffFn:
        return self.perturbation.zero_mode()


def solve_homological(system: HamiltonianSystem, spec: PartitionSpec, *, integrable: IntegrablePart | None = None, perturbation: TrigPolyField | None = None, probes=None, probe_count: int = 1000, seed: int = 0, floor: float = SMALL_DIVISOR_FLOOR, step: int = 1) -> Generator:
    """Generator ``chi`` with ``chi_k = f_k / (i k . omega)`` for ``0 < ||k||_1 <= K``.

    Small divisors ``|k . omega|`` are checked on action probes in ``D``; a
    divisor below ``floor`` raises :class:`SmallDivisorError` naming ``k`` and
    ``I``.
    """
    integrable = system.integrable if integrable is None else integrable
    f = system.perturbation if perturbation is None else perturbation
    n = system.dim
    if probes is None:
        probes = nonresonant_probes(system.domain, spec, integrable, probe_count, SeededRng(seed, 7919 + step))
    probes = np.atleast_2d(np.asarray(probes, dtype=float)).reshape(-1, n)
    omega_exprs = [ex.split_complex(e)[0] for e in integrable.frequency_exprs]
    modes = {}
    divisors = {}
    for k, fk in f.modes.items():
        order = sum(abs(v) for v in k)
        if order == 0 or order > spec.K:
            continue
        phase = ex.add(*[ex.mul(ex.const(float(kj)), w) for kj, w in zip(k, omega_exprs) if kj != 0])
        if probes.shape[0] and is_representative(k):
            vals = np.abs(np.real(ex.evaluate(phase, probes)))
            i = int(np.argmin(vals))
            divisors[k] = float(vals[i])
            if vals[i] < floor:
                raise SmallDivisorError(f"small divisor |k.omega| = {vals[i]:.3e} for k={k} at I={probes[i].tolist()}")
        modes[k] = CoeffFn(ex.mul(ex.const(-1j), fk.expr, ex.power(phase, -1.0)), n)
    chi = TrigPolyField(modes, n, real=False)
    chi.real = True
    return Generator(chi, system, integrable, f, spec, divisors, probes, step)


def homological_residual(gen: Generator, theta, I) -> np.ndarray:
    """``<f> - f_{<=K} - {h, chi}`` at paired points (should vanish)."""
    th = np.atleast_2d(theta)
    ac = np.atleast_2d(I)
    f = gen.perturbation
    avg = np.real(f.zero_mode().value(ac))
    low = f.truncate(gen.spec.K).eval(th, ac)
    # {h, chi} = -omega . d chi / d theta
    bracket = -np.sum(gen.integrable.frequency(ac) * gen.chi.grad_theta(th, ac), axis=1)
    return avg - low - bracket


def _next_step(gen: Generator) -> tuple[IntegrablePart, TrigPolyField]:
    """Second-order transformed system ``h + <f>`` and ``f_{>K} + {f, chi} + 1/2 {<f> - f_{<=K}, chi}``."""
    f = gen.perturbation
    K = gen.spec.K
    n = f.dim
    avg = f.zero_mode()
    h_next = gen.integrable.plus(avg)
    homo = TrigPolyField({(0,) * n: avg}, n) + f.truncate(K).scale(-1.0)
    second = poisson_bracket(f, gen.chi) + poisson_bracket(homo, gen.chi).scale(0.5)
    return h_next, f.high_part(K) + second


# ---------------------------------------------------------------------------


@dataclass
class NormalFormPackage:
    generators: list
    system: HamiltonianSystem
    h_eps: IntegrablePart
    dt_nf: float
    jit: bool = True
    r_inf: float = 0.0
    step_remainders: list = field(default_factory=list)
    c0: float = 0.0
    c0_action: float = 0.0
    c1: float = 0.0
    delta_nf: float = 0.0
    det_error: float = 0.0
    symplectic_error: float = 0.0
    roundtrip_error: float = 0.0
    probe_I: np.ndarray | None = None
    probe_theta_res: int = 0
    margin_freq: float = 0.0
    lipschitz: float = 0.0
    _flows: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._flows = [None if g.is_trivial else FlowSpec.field_flow(g.chi, self.dt_nf, self.jit) for g in self.generators]

    @property
    def spec(self) -> PartitionSpec:
        return self.generators[0].spec

    @property
    def is_identity(self) -> bool:
        return all(f is None for f in self._flows)

    def _apply(self, theta, action, sign: float, wrap: bool):
        th = np.atleast_2d(np.asarray(theta, dtype=float))
        ac = np.atleast_2d(np.asarray(action, dtype=float))
        # Phi = Phi_1 o Phi_2 o ... : the last generator acts first
        order = list(reversed(self._flows)) if sign > 0 else list(self._flows)
        for fl in order:
            if fl is not None:
                th, ac = fl.evolve_arrays(th, ac, sign * 1.0, wrap=False)
        return (wrap_angles(th) if wrap else th.copy()), ac.copy()

    def transform(self, theta, action, wrap: bool = True):
        return self._apply(theta, action, 1.0, wrap)

    def inverse(self, theta, action, wrap: bool = True):
        return self._apply(theta, action, -1.0, wrap)

    def partial_transform(self, m: int, theta, action):
        th, ac = np.atleast_2d(theta), np.atleast_2d(action)
        for fl in reversed(self._flows[:m]):
            if fl is not None:
                th, ac = fl.evolve_arrays(th, ac, 1.0, wrap=False)
        return th, ac

    def remainder(self, theta, action) -> np.ndarray:
        """``r = H o Phi - h_eps`` at paired points."""
        pth, pac = self.transform(theta, action, wrap=False)
        return self.system.energy(pth, pac) - self.h_eps.value(np.atleast_2d(action))

    def summary(self) -> dict:
        return {
            "steps": len(self.generators),
            "dt_nf": self.dt_nf,
            "r_inf": self.r_inf,
            "step_remainders": self.step_remainders,
            "phi_minus_id_C0": self.c0,
            "phi_minus_id_C0_action": self.c0_action,
            "phi_minus_id_C1": self.c1,
            "delta_nf": self.delta_nf,
            "margin_freq": self.margin_freq,
            "lipschitz_omega": self.lipschitz,
            "jacobian_det_error": self.det_error,
            "symplectic_form_error": self.symplectic_error,
            "roundtrip_error": self.roundtrip_error,
            "probes": {"actions": 0 if self.probe_I is None else int(self.probe_I.shape[0]), "theta_res": self.probe_theta_res},
            "small_divisors": [
                {"step": g.step, "k": list(k), "min_abs_k_dot_omega": v} for g in self.generators for k, v in sorted(g.small_divisors.items())
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _pair(thetas, actions):
    return np.repeat(thetas, actions.shape[0], axis=0), np.tile(actions, (thetas.shape[0], 1))


def _symplectic_errors(J: np.ndarray) -> tuple[float, float]:
    m, d, _ = J.shape
    n = d // 2
    Om = np.zeros((d, d))
    Om[:n, n:] = np.eye(n)
    Om[n:, :n] = -np.eye(n)
    det_err = float(np.max(np.abs(np.linalg.det(J) - 1.0)))
    sym_err = float(np.max(np.abs(np.einsum("mji,jk,mkl->mil", J, Om, J) - Om[None])))
    return det_err, sym_err


def build_package(generator: Generator | list, system: HamiltonianSystem | None = None, *, dt_nf: float = 1e-3, probe_I=None, probe_count: int = 200, theta_res: int | None = None, jacobian_probes: int = 10, seed: int = 0, jit: bool = True, boundary_margin: float | None = None) -> NormalFormPackage:
    """Integrate the generator flow and measure the remainder and transform norms.

    Without ``probe_I`` the probes are drawn in ``D`` eroded by
    ``delta_nf = 2 max |I(Phi(z)) - I|`` (the region is a set of actions, so
    the action displacement sets the erosion).  Raises :class:`MarginError`
    when a probe image leaves ``D`` or the domain.
    """
    gens = generator if isinstance(generator, list) else [generator]
    system = gens[0].system if system is None else system
    n = system.dim
    spec = gens[0].spec
    h_eps = gens[-1].integrable.plus(gens[-1].perturbation.zero_mode())
    pkg = NormalFormPackage(gens, system, h_eps, dt_nf, jit)
    if theta_res is None:
        theta_res = {1: 32, 2: 8}.get(n, 4)
    thetas = theta_grid(n, theta_res)
    pkg.probe_theta_res = theta_res
    integ = system.integrable
    if boundary_margin is None:
        boundary_margin = 0.02 * system.domain.diameter
    lip_nodes = build_grid(system.domain, 15 if n <= 2 else 7).nodes
    L = float(np.max(np.linalg.norm(integ.frequency_jacobian(lip_nodes), ord=2, axis=(-2, -1)))) if lip_nodes.size else 0.0
    pkg.lipschitz = L
    if pkg.is_identity:
        pkg.probe_I = np.zeros((0, n)) if probe_I is None else np.atleast_2d(probe_I)
        pkg.step_remainders = [0.0] * len(gens)
        return pkg
    rng = SeededRng(seed, 104729)
    if probe_I is None:
        first = nonresonant_probes(system.domain, spec, integ, probe_count, rng, 0.0, boundary_margin)
        if first.shape[0] == 0:
            raise MarginError("no nonresonant probes: D(eps) is empty at this resolution")
        th, ac = _pair(thetas, first)
        pth, pac = pkg.transform(th, ac, wrap=False)
        disp = float(np.max(np.abs(pac - ac)))
        delta = 2.0 * disp
        probe_I = nonresonant_probes(system.domain, spec, integ, probe_count, rng.child(1), L * delta, boundary_margin + delta)
        if probe_I.shape[0] == 0:
            raise MarginError("no probes left after eroding D(eps) by the transform margin")
    probe_I = np.atleast_2d(np.asarray(probe_I, dtype=float))
    pkg.probe_I = probe_I
    th, ac = _pair(thetas, probe_I)
    pth, pac = pkg.transform(th, ac, wrap=False)
    # margin checks: images must stay in the domain and in D
    if not np.all(system.domain.contains(pac)):
        raise MarginError("transform maps probes outside the action domain; enlarge the margin")
    d_img, _ = min_distance(integ.frequency(pac), spec)
    if np.any(d_img < spec.alpha):
        raise MarginError("transform maps probes into the resonant zone; enlarge the margin")
    pkg.c0_action = float(np.max(np.abs(pac - ac)))
    pkg.c0 = float(np.max(torus_distance(pth, pac, th, ac)))
    pkg.delta_nf = 2.0 * pkg.c0_action
    pkg.margin_freq = L * pkg.delta_nf
    r = system.energy(pth, pac) - h_eps.value(ac)
    pkg.r_inf = float(np.max(np.abs(r)))
    # per-step remainders with partial compositions
    rems = []
    for m in range(1, len(gens) + 1):
        hm = gens[m - 1].integrable.plus(gens[m - 1].perturbation.zero_mode())
        qth, qac = pkg.partial_transform(m, th, ac)
        rems.append(float(np.max(np.abs(system.energy(qth, qac) - hm.value(ac)))))
    pkg.step_remainders = rems
    # Jacobian diagnostics on a few probes
    sel = np.linspace(0, th.shape[0] - 1, min(jacobian_probes, th.shape[0])).astype(int)
    J = numerical_jacobian(lambda a, b: pkg.transform(a, b, wrap=False), th[sel], ac[sel], h=1e-5)
    pkg.det_error, pkg.symplectic_error = _symplectic_errors(J)
    D = J - np.eye(2 * n)[None]
    pkg.c1 = max(pkg.c0, float(np.max(np.linalg.norm(D, ord=2, axis=(-2, -1)))))
    ith, iac = pkg.inverse(pth, pac, wrap=False)
    pkg.roundtrip_error = float(np.max(torus_distance(ith, iac, th, ac)))
    return pkg


def build_normal_form(system: HamiltonianSystem, spec: PartitionSpec, *, steps: int = 1, dt_nf: float = 1e-3, probe_I=None, probe_count: int = 200, seed: int = 0, jit: bool = True, theta_res: int | None = None) -> NormalFormPackage:
    """Solve ``steps`` (1 to 3) homological equations and build the package."""
    if not 1 <= steps <= 3:
        raise ValueError("steps must be 1, 2 or 3")
    gens = [solve_homological(system, spec, seed=seed)]
    for s in range(2, steps + 1):
        h_next, f_next = _next_step(gens[-1])
        gens.append(solve_homological(system, spec, integrable=h_next, perturbation=f_next, probes=gens[0].probes, step=s))
    return build_package(gens, system, dt_nf=dt_nf, probe_I=probe_I, probe_count=probe_count, seed=seed, jit=jit, theta_res=theta_res)


# ---------------------------------------------------------------------------


def nf_error_bound(Gtilde_C1: float, t: float, r_inf: float, C_err: float) -> float:
    """``C_err ||G~||_C1 (1 + |t| + t^2) ||r||_inf``."""
    for name, v in (("Gtilde_C1", Gtilde_C1), ("r_inf", r_inf), ("C_err", C_err)):
        if v < 0:
            raise ValueError(f"{name} must be nonnegative")
    return C_err * Gtilde_C1 * (1.0 + abs(t) + t * t) * r_inf


def gtilde_c1(G: Observable, pkg: NormalFormPackage, max_points: int = 400) -> float:
    """``max(sup|G o Phi|, sup |grad(G o Phi)|)`` on the package probes."""
    if pkg.is_identity or pkg.probe_I is None or pkg.probe_I.shape[0] == 0:
        return _g_c1_plain(G, pkg)
    n = G.dim
    th, ac = _pair(theta_grid(n, pkg.probe_theta_res), pkg.probe_I)
    sel = np.linspace(0, th.shape[0] - 1, min(max_points, th.shape[0])).astype(int)
    th, ac = th[sel], ac[sel]
    J = numerical_jacobian(lambda a, b: pkg.transform(a, b, wrap=False), th, ac, h=1e-5)
    pth, pac = pkg.transform(th, ac, wrap=False)
    gradG = np.concatenate([G.field.grad_theta(pth, pac), G.field.grad_I(pth, pac)], axis=1)
    grad_tilde = np.einsum("mji,mj->mi", J, gradG)
    return max(G.sup_norm, float(np.max(np.linalg.norm(grad_tilde, axis=1))))


def _g_c1_plain(G: Observable, pkg: NormalFormPackage) -> float:
    n = G.dim
    grid = build_grid(pkg.system.domain, 21 if n <= 2 else 9)
    th, ac = _pair(theta_grid(n, 16 if n <= 2 else 6), grid.nodes)
    gradG = np.concatenate([G.field.grad_theta(th, ac), G.field.grad_I(th, ac)], axis=1)
    return max(G.sup_norm, float(np.max(np.linalg.norm(gradG, axis=1))))


def nf_error_measured(G: Observable, theta, action, weights, pkg: NormalFormPackage, t: float, flow: FlowSpec, *, method: str = "conjugate", nf_flow=None) -> float:
    """``|int G~(Phi~^t) f~0 - int G~(Psi^t) f~0|`` on common samples.

    ``(theta, action)`` are draws ``w`` from ``f0`` with ``weights`` the cutoff
    values, so ``z = Phi^-1(w)`` samples ``f~0``.  ``method="conjugate"``
    evaluates ``G~(Phi~^t z) = G(Phi^t w)`` through the conjugacy relation;
    ``method="direct"`` integrates ``H o Phi`` itself (``nf_flow``).
    """
    w = np.asarray(weights, dtype=float)
    zth, zac = pkg.inverse(theta, action, wrap=False)
    psi = FlowSpec.exact(pkg.h_eps)
    bth, bac = psi.evolve_arrays(zth, zac, t)
    B = G(*pkg.transform(bth, bac))
    if method == "conjugate":
        ath, aac = flow.evolve_arrays(theta, action, t)
        A = G(ath, aac)
    elif method == "direct":
        nf_flow = NormalFormFlow(pkg, dt=0.1) if nf_flow is None else nf_flow
        ath, aac = nf_flow.evolve_arrays(zth, zac, t)
        A = G(*pkg.transform(ath, aac))
    else:
        raise ValueError(f"unknown method {method!r}")
    return abs(math.fsum(w * (A - B)) / w.size)


def conjugate_terms(G: Observable, theta, action, weights, pkg: NormalFormPackage, t: float, evolved=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``w G(Phi^t w)`` (from ``evolved``) and ``w G(Phi(Psi^t(Phi^-1 w)))``."""
    zth, zac = pkg.inverse(theta, action, wrap=False)
    bth, bac = FlowSpec.exact(pkg.h_eps).evolve_arrays(zth, zac, t)
    B = G(*pkg.transform(bth, bac))
    A = G(*evolved) if evolved is not None else None
    return A, B


@dataclass
class CErrCalibration:
    C_err: float
    train_times: list
    holdout_times: list
    train_ratios: list
    holdout_ok: bool
    holdout_ratios: list
    source: str = "calibrated"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def calibrate_c_err(times, measured, Gtilde_C1: float, r_inf: float, override: float | None = None) -> CErrCalibration:
    """``C_err`` = max of measured / (||G~||_C1 (1+|t|+t^2) ||r||) over every other time.

    The remaining times are held out and checked against the calibrated bound.
    """
    times = np.asarray(times, dtype=float)
    measured = np.asarray(measured, dtype=float)
    shape = Gtilde_C1 * (1.0 + np.abs(times) + times**2) * r_inf
    ratios = np.where(shape > 0, measured / np.where(shape > 0, shape, 1.0), 0.0)
    train = np.arange(times.size) % 2 == 0
    c = float(np.max(ratios[train])) if np.any(train) else 0.0
    if override is not None:
        c = float(override)
    hold = ~train
    ok = bool(np.all(measured[hold] <= c * shape[hold] * (1 + 1e-12))) if np.any(hold) else True
    return CErrCalibration(
        c,
        times[train].tolist(),
        times[hold].tolist(),
        ratios[train].tolist(),
        ok,
        ratios[hold].tolist(),
        "override" if override is not None else "calibrated",
    )


# ---------------------------------------------------------------------------
# direct flow of H o Phi


class NormalFormFlow:
    """Strang flow of ``H~ = H o Phi``: exact ``h_eps`` twist plus an
    implicit-midpoint substep on ``X_r = J grad H~ - X_{h_eps}``.

    ``grad H~ = DPhi^T grad H(Phi)`` with ``DPhi`` by central differences, so
    this is slow and meant for probes and small sample sets.
    """

    kind = "symplectic"

    def __init__(self, pkg: NormalFormPackage, dt: float = 0.1, fd_step: float = 1e-5, tol: float = 1e-13, maxit: int = 30):
        self.pkg = pkg
        self.dt = float(dt)
        self.h = fd_step
        self.tol = tol
        self.maxit = maxit

    def _grad_H(self, th, ac):
        f = self.pkg.system.perturbation
        om = self.pkg.system.integrable.frequency(ac)
        return np.concatenate([f.grad_theta(th, ac), om + f.grad_I(th, ac)], axis=1)

    def remainder_field(self, th, ac):
        n = th.shape[1]
        J = numerical_jacobian(lambda a, b: self.pkg.transform(a, b, wrap=False), th, ac, h=self.h)
        pth, pac = self.pkg.transform(th, ac, wrap=False)
        g = np.einsum("mji,mj->mi", J, self._grad_H(pth, pac))
        dth = g[:, n:] - self.pkg.h_eps.frequency(ac)
        dI = -g[:, :n]
        return dth, dI

    def _substep(self, th, ac, dt):
        dth, dI = self.remainder_field(th, ac)
        th1, ac1 = th + dt * dth, ac + dt * dI
        for _ in range(self.maxit):
            dth, dI = self.remainder_field(0.5 * (th + th1), 0.5 * (ac + ac1))
            a, b = th + dt * dth, ac + dt * dI
            err = max(float(np.max(np.abs(a - th1))), float(np.max(np.abs(b - ac1))))
            th1, ac1 = a, b
            if err <= self.tol:
                break
        return th1, ac1

    def evolve_arrays(self, theta, action, t: float, wrap: bool = True):
        th = np.atleast_2d(np.asarray(theta, dtype=float)).copy()
        ac = np.atleast_2d(np.asarray(action, dtype=float)).copy()
        nsteps = int(math.ceil(abs(t) / self.dt - 1e-9)) if t != 0 else 0
        h = t / nsteps if nsteps else 0.0
        for _ in range(nsteps):
            th = th + 0.5 * h * self.pkg.h_eps.frequency(ac)
            if not self.pkg.is_identity:
                th, ac = self._substep(th, ac, h)
            th = th + 0.5 * h * self.pkg.h_eps.frequency(ac)
        if not (np.all(np.isfinite(th)) and np.all(np.isfinite(ac))):
            raise FlowError("non-finite state in the normal-form flow")
        return (wrap_angles(th) if wrap else th), ac


# ---------------------------------------------------------------------------
# normal-form coordinates on an action grid


@dataclass
class NormalFormCoordinates:
    """Fourier data of ``G~ = G o Phi`` and ``f~0 = (f0 chi_D) o Phi`` on an action grid.

    ``grid`` is restricted to ``D`` eroded by the transform margin; the table
    is sampled on every tensor node (zero outside the restricted set, where
    ``f~0`` vanishes by construction of the cutoff margin).
    """

    grid: ActionGrid
    table: ModeTable
    cutoff: SmoothCutoff
    theta_res: int

    def describe(self) -> dict:
        d = self.grid.describe()
        d["restricted_nodes"] = int(self.grid.size)
        d["theta_fft"] = self.theta_res
        d["cutoff"] = self.cutoff.describe()
        return d


def normal_form_cutoff(pkg: NormalFormPackage, spec: PartitionSpec, integrable: IntegrablePart, width: float) -> SmoothCutoff:
    """Cutoff whose support stays ``2 L delta_nf`` inside ``D`` (covers the transform displacement)."""
    return SmoothCutoff(spec, integrable, margin=2.0 * pkg.margin_freq, width=width)


def normal_form_coordinates(G: Observable, f0: EnsembleDensity, pkg: NormalFormPackage, cutoff: SmoothCutoff, resolution: int = 96, theta_res: int = 16) -> NormalFormCoordinates:
    n = G.dim
    system = pkg.system
    lo, hi = system.domain.bbox()
    if f0.support is not None:
        pad = pkg.delta_nf + 1e-12
        lo, hi = f0.support[0] - pad, f0.support[1] + pad
    grid = build_grid(system.domain, resolution, "midpoint", window=(lo, hi))
    d, _ = min_distance(system.integrable.frequency(grid.nodes), pkg.spec) if grid.size else (np.zeros(0), None)
    keep = d >= pkg.spec.alpha + pkg.margin_freq
    grid = restrict_grid(grid, keep, "nonresonant, eroded by the transform margin")
    tensor = grid.tensor_nodes().reshape(-1, n)
    flat_mask = grid.mask.ravel()
    valid = tensor[flat_mask]

    memo: dict = {}

    def mapped(th, ac):
        # both fields are sampled on the same chunk; transform it once
        if memo.get("key") is not th:
            memo["key"], memo["val"] = th, pkg.transform(th, ac)
        return memo["val"]

    def g_tilde(th, ac):
        return G(*mapped(th, ac))

    def f_tilde(th, ac):
        pth, pac = mapped(th, ac)
        return f0(pth, pac) * cutoff.value(pac)

    table_valid = fft_mode_table({"G": g_tilde, "f0": f_tilde}, valid, n, theta_res) if valid.shape[0] else None
    coeffs = {}
    for name in ("G", "f0"):
        full = np.zeros((theta_res,) * n + (tensor.shape[0],), dtype=complex)
        if table_valid is not None:
            full[..., flat_mask] = table_valid.coeffs[name]
        coeffs[name] = full
    return NormalFormCoordinates(grid, ModeTable(n, theta_res, coeffs), cutoff, theta_res)


def nf_tail(coords: NormalFormCoordinates, K: int) -> float:
    """Tail ``R_{>K}`` in normal-form coordinates over the resolved modes."""
    n = coords.grid.dim
    tab = coords.table
    grid = coords.grid
    total = []
    for k in tab.wavevectors():
        if int(np.sum(np.abs(k))) <= K:
            continue
        a = tab.product(k).reshape(grid.shape)[grid.mask]
        total.append(grid.integrate(np.abs(a)))
    return TWO_PI**n * math.fsum(total)


def eq_change_error(G: Observable, f0: EnsembleDensity, pkg: NormalFormPackage, cutoff: SmoothCutoff, coords: NormalFormCoordinates | None = None, **grid_kw) -> float:
    """``|int <G~>_theta f~0 - int <G>_theta f0 chi_D|`` by ``(theta, I)`` quadrature."""
    n = G.dim
    orig_grid = f0.quad_grid
    chi = cutoff.value(orig_grid.nodes)
    second = TWO_PI**n * orig_grid.integrate(np.real(G.field.zero_mode().value(orig_grid.nodes)) * np.real(f0.field.zero_mode().value(orig_grid.nodes)) * chi)
    if pkg.is_identity:
        return 0.0
    coords = normal_form_coordinates(G, f0, pkg, cutoff, **grid_kw) if coords is None else coords
    grid = coords.grid
    zero = (0,) * n
    g0 = coords.table.coeff("G", zero).reshape(grid.shape)[grid.mask]
    f00 = coords.table.coeff("f0", zero).reshape(grid.shape)[grid.mask]
    first = TWO_PI**n * grid.integrate(np.real(g0 * f00))
    return abs(float(first) - float(second))


def pullback_check(G: Observable, theta, action, weights, pkg: NormalFormPackage, t: float, flow: FlowSpec, nf_flow: NormalFormFlow | None = None) -> tuple[float, float]:
    """``|MC<G(Phi^t)>_{f0 chi} - MC<G~(Phi~^t)>_{f~0}|`` on shared samples and its standard error.

    The right side maps each draw ``w`` to ``z = Phi^-1(w)`` and integrates
    ``H o Phi`` directly, so the two sides share nothing but the samples.
    """
    w = np.asarray(weights, dtype=float)
    lth, lac = flow.evolve_arrays(theta, action, t)
    left = w * G(lth, lac)
    zth, zac = pkg.inverse(theta, action, wrap=False)
    nf_flow = NormalFormFlow(pkg) if nf_flow is None else nf_flow
    rth, rac = nf_flow.evolve_arrays(zth, zac, t)
    right = w * G(*pkg.transform(rth, rac))
    diff = left - right
    N = diff.size
    se = float(np.std(diff, ddof=1) / math.sqrt(N)) if N > 1 else 0.0
    return abs(math.fsum(left) - math.fsum(right)) / N, se
