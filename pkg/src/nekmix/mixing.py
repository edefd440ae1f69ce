"""Stationary-phase machinery: phases ``phi_k = k . omega``, the field ``u_k``,
the constants ``gamma_k`` and ``M_k``, and the mixing constant ``C_G``.

For a compactly supported amplitude ``a`` and a phase with nonvanishing
gradient, ``u = div(a grad(phi) / |grad(phi)|^2)`` satisfies

    int a exp(i lam phi) = -(1 / (i lam)) int u exp(i lam phi),

so ``|int a exp(i lam phi)| <= ||u||_1 / |lam|``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import expr as ex
from .core import TWO_PI, ActionGrid, stable_sum
from .model import CoeffFn, IntegrablePart
from .spectral import ModeTable, mode_product

__all__ = [
    "SingularPhaseError",
    "ResonantRegionError",
    "PhaseData",
    "ModeRecord",
    "MixingReport",
    "phase_data",
    "phase_data_for",
    "u_field",
    "u_values",
    "oscillatory_integral",
    "mode_l1_norms",
    "lemma_l1_bound",
    "mixing_constant",
    "mixing_constant_from_table",
]

GAMMA_FLOOR = 1e-8
NODES_PER_WAVELENGTH = 10

CUTOFF_NOTE = (
    "amplitudes restricted to the nonresonant region are multiplied by a smooth cutoff; "
    "the cutoff gradient enters ||grad a_k||_1"
)


class SingularPhaseError(ValueError):
    pass


class ResonantRegionError(ValueError):
    def __init__(self, offending):
        self.offending = [tuple(int(v) for v in k) for k in offending]
        super().__init__(f"gamma_k at or below the floor for k in {self.offending}; shrink the region")


@dataclass
class PhaseData:
    """``phi_k = k . omega`` with grid-certified ``gamma_k`` and ``M_k``.

    ``gamma = max(0, min|grad phi| - M h)`` and
    ``M = max ||hess phi||_2 + max ||D^3 phi||_F h`` with ``h`` the half cell
    diagonal, so both are on the safe side of the true inf/sup over the cells.
    """

    k: tuple
    phi: CoeffFn
    grad: np.ndarray
    hess: np.ndarray
    gamma: float
    M: float
    grid_min_grad: float
    grid_max_hess: float

    def grad_norm(self) -> np.ndarray:
        return np.linalg.norm(self.grad, axis=-1)


def _phase_coeff(k, omega: IntegrablePart) -> CoeffFn:
    terms = [ex.mul(ex.const(float(kj)), ex.split_complex(w)[0]) for kj, w in zip(k, omega.frequency_exprs) if kj != 0]
    return CoeffFn(ex.add(*terms), omega.dim)


def _third_frobenius(phi: CoeffFn, nodes: np.ndarray) -> np.ndarray:
    n = phi.dim
    total = np.zeros(nodes.shape[0])
    for i in range(n):
        for j in range(n):
            hij = phi.hess_exprs[i][j]
            if ex.is_zero(hij):
                continue
            for l in range(n):
                d = ex.diff(hij, l)
                if not ex.is_zero(d):
                    total += np.real(ex.evaluate(d, nodes)) ** 2
    return np.sqrt(total)


def phase_data(k, omega: IntegrablePart, grid: ActionGrid, nodes_mask=None) -> PhaseData:
    """Phase data over the grid nodes (optionally a subset given by ``nodes_mask``)."""
    k = tuple(int(v) for v in k)
    return phase_data_for(_phase_coeff(k, omega), grid, nodes_mask, k)


def phase_data_for(phi: CoeffFn, grid: ActionGrid, nodes_mask=None, k=()) -> PhaseData:
    """Certified ``gamma`` and ``M`` for an arbitrary real phase."""
    nodes = grid.nodes if nodes_mask is None else grid.nodes[nodes_mask]
    g = np.real(phi.grad(nodes))
    H = np.real(phi.hess(nodes))
    h = grid.half_diagonal
    if nodes.shape[0] == 0:
        return PhaseData(k, phi, g, H, 0.0, 0.0, 0.0, 0.0)
    gmin = float(np.min(np.linalg.norm(g, axis=-1)))
    hmax = float(np.max(np.linalg.norm(H, ord=2, axis=(-2, -1))))
    t3 = float(np.max(_third_frobenius(phi, nodes)))
    M = hmax + t3 * h
    gamma = max(0.0, gmin - M * h)
    return PhaseData(k, phi, g, H, gamma, M, gmin, hmax)


def u_values(a, grad_a, grad_phi, hess_phi, gamma_floor: float = GAMMA_FLOOR) -> np.ndarray:
    """``u = grad a . grad phi / |grad phi|^2 + a [lap phi / |grad phi|^2 - 2 grad phi^T hess phi grad phi / |grad phi|^4]``."""
    gp = np.asarray(grad_phi)
    g2 = np.sum(gp * gp, axis=-1)
    if np.any(np.sqrt(g2) < gamma_floor):
        raise SingularPhaseError(f"|grad phi| below {gamma_floor:g} at an evaluation point")
    lap = np.trace(hess_phi, axis1=-2, axis2=-1)
    quad = np.einsum("...i,...ij,...j->...", gp, hess_phi, gp)
    return np.sum(grad_a * gp, axis=-1) / g2 + a * (lap / g2 - 2.0 * quad / g2**2)


def u_field(a: CoeffFn, phi, gamma_floor: float = GAMMA_FLOOR):
    """Evaluator ``I -> u(I)`` for an amplitude and a phase (:class:`PhaseData` or :class:`CoeffFn`)."""
    phi_fn = phi.phi if isinstance(phi, PhaseData) else phi

    def evaluate(I):
        I = np.atleast_2d(np.asarray(I, dtype=float))
        return u_values(a.value(I), a.grad(I), np.real(phi_fn.grad(I)), np.real(phi_fn.hess(I)), gamma_floor)

    return evaluate


def oscillatory_integral(a, phi, lam: float, grid: ActionGrid) -> complex:
    """``int a exp(i lam phi) dI`` by quadrature, refusing under-resolved grids.

    ``a`` and ``phi`` are :class:`CoeffFn` (``phi`` may be :class:`PhaseData`)
    or callables of the action points.
    """
    phi_fn = phi.phi if isinstance(phi, PhaseData) else phi
    nodes = grid.nodes
    if lam != 0:
        gmax = float(np.max(np.linalg.norm(np.real(phi_fn.grad(nodes)), axis=-1)))
        if gmax > 0:
            wavelength = TWO_PI / (abs(lam) * gmax)
            need = grid.spacing > wavelength / NODES_PER_WAVELENGTH
            if np.any(need):
                span = np.array([ax[-1] - ax[0] for ax in grid.axes]) + grid.spacing
                required = np.ceil(span * NODES_PER_WAVELENGTH / wavelength).astype(int)
                raise ValueError(
                    f"grid under-resolves the oscillation (wavelength {wavelength:.3g}); "
                    f"need at least {required.tolist()} nodes per axis"
                )
    av = a.value(nodes) if hasattr(a, "value") else a(nodes)
    ph = np.real(phi_fn.value(nodes)) if hasattr(phi_fn, "value") else phi_fn(nodes)
    return complex(stable_sum(grid.weights * av * np.exp(1j * lam * ph)))


def mode_l1_norms(a, grid: ActionGrid, grad=None, cutoff=None) -> tuple[float, float]:
    """``(||a||_1, ||grad a||_1)`` by quadrature, complex modulus throughout.

    ``a`` is a :class:`CoeffFn` or nodal values (then ``grad`` is required).
    ``cutoff`` is an optional ``(values, gradients)`` pair multiplying ``a``.
    """
    if hasattr(a, "value"):
        av = a.value(grid.nodes)
        gv = a.grad(grid.nodes)
    else:
        av = np.asarray(a)
        gv = np.asarray(grad)
    if cutoff is not None:
        cv, cg = cutoff
        gv = cv[:, None] * gv + av[:, None] * cg
        av = av * cv
    if grid.size == 0:
        return 0.0, 0.0
    return float(grid.integrate(np.abs(av))), float(grid.integrate(np.sqrt(np.sum(np.abs(gv) ** 2, axis=-1))))


def lemma_l1_bound(grad_l1: float, a_l1: float, gamma: float, M: float, n: int, gamma_floor: float = GAMMA_FLOOR) -> float:
    """``||grad a||_1 / gamma + (n + 2) M ||a||_1 / gamma^2``."""
    if not gamma > gamma_floor:
        raise ResonantRegionError([])
    return grad_l1 / gamma + (n + 2) * M * a_l1 / gamma**2


@dataclass
class ModeRecord:
    k: tuple
    gamma: float
    M: float
    a_l1: float
    grad_a_l1: float
    u_l1: float
    lemma: float
    multiplicity: int = 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k"] = list(self.k)
        return d


@dataclass
class MixingReport:
    records: list
    C_direct: float
    C_lemma: float
    K: int
    region: dict
    coordinates: str
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "coordinates": self.coordinates,
            "C_G_direct": self.C_direct,
            "C_G_lemma": self.C_lemma,
            "region": self.region,
            "notes": list(self.notes),
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _record(k, av, gv, pd: PhaseData, grid: ActionGrid, n: int, gamma_floor: float) -> ModeRecord:
    a_l1, g_l1 = mode_l1_norms(av, grid, gv)
    u = u_values(av, gv, pd.grad, pd.hess, gamma_floor)
    u_l1 = float(grid.integrate(np.abs(u)))
    lemma = lemma_l1_bound(g_l1, a_l1, pd.gamma, pd.M, n, gamma_floor)
    return ModeRecord(tuple(int(v) for v in k), pd.gamma, pd.M, a_l1, g_l1, u_l1, lemma)


def _assemble(records, K, n, region, coordinates, notes) -> MixingReport:
    scale = TWO_PI**n
    c_dir = scale * math.fsum(r.multiplicity * r.u_l1 for r in records)
    c_lem = scale * math.fsum(r.multiplicity * r.lemma for r in records)
    return MixingReport(records, c_dir, c_lem, int(K), region, coordinates, notes)


def mixing_constant(G, f0, K: int, grid: ActionGrid, omega: IntegrablePart, cutoff=None, gamma_floor: float = GAMMA_FLOOR, region: dict | None = None) -> MixingReport:
    """``C_G(K; Omega)`` from the exact mode data of ``G`` and ``f0``.

    One representative of each ``+-k`` pair is processed and counted twice
    (``a_{-k} = conj(a_k)`` and ``phi_{-k} = -phi_k`` give equal ``||u||_1``).
    ``cutoff`` is an optional nodal ``(values, gradients)`` mask.
    """
    from .core import enumerate_wavevectors

    gf = G.field if hasattr(G, "field") else G
    ff = f0.field if hasattr(f0, "field") else f0
    n = gf.dim
    records, offending = [], []
    for k in enumerate_wavevectors(n, K):
        mp = mode_product(gf, ff, k)
        if mp.is_zero:
            continue
        av = mp.a.value(grid.nodes)
        gv = mp.a.grad(grid.nodes)
        if cutoff is not None:
            cv, cg = cutoff
            gv = cv[:, None] * gv + av[:, None] * cg
            av = av * cv
        if not np.any(av != 0):
            continue
        pd = phase_data(k, omega, grid, np.abs(av) > 0)
        if not pd.gamma > gamma_floor:
            offending.append(k)
            continue
        pd_full = _restrict(pd, k, omega, grid)
        records.append(_record(k, av, gv, pd_full, grid, n, gamma_floor))
    if offending:
        raise ResonantRegionError(offending)
    notes = [CUTOFF_NOTE] if cutoff is not None else []
    notes.append("gamma_k and M_k are taken over the support of a_k inside the region; spectral norm for the Hessian")
    return _assemble(records, K, n, region or grid.describe(), "original", notes)


def _restrict(pd: PhaseData, k, omega, grid) -> PhaseData:
    """Phase data with certified constants from the support but arrays on all nodes."""
    full = phase_data(k, omega, grid)
    return PhaseData(pd.k, pd.phi, full.grad, full.hess, pd.gamma, pd.M, pd.grid_min_grad, pd.grid_max_hess)


def mixing_constant_from_table(table: ModeTable, K: int, grid: ActionGrid, omega: IntegrablePart, gamma_floor: float = GAMMA_FLOOR, region: dict | None = None, coordinates: str = "normal-form", rel_floor: float = 1e-12) -> MixingReport:
    """``C_G`` from sampled Fourier coefficients on the full tensor grid.

    The table must hold names ``"G"`` and ``"f0"`` sampled on
    ``grid.tensor_nodes()`` (flattened); gradients are central differences
    along grid lines.
    """
    from .core import enumerate_wavevectors

    n = grid.dim
    candidates = []
    for k in enumerate_wavevectors(n, K):
        if np.max(np.abs(k)) > table.M // 2 - 1:
            continue
        a_full = table.product(k).reshape(grid.shape)
        candidates.append((k, a_full, float(np.max(np.abs(a_full[grid.mask]))) if grid.size else 0.0))
    scale = max((c[2] for c in candidates), default=0.0)
    records, offending = [], []
    for k, a_full, amax in candidates:
        # FFT round-off leaves ~1e-17 noise in absent modes
        if amax <= rel_floor * scale or amax == 0.0:
            continue
        av = a_full[grid.mask]
        gv = grid.gradient_tensor(a_full.real) + 1j * grid.gradient_tensor(a_full.imag)
        support = np.abs(av) > rel_floor * scale
        pd = phase_data(k, omega, grid, support)
        if not pd.gamma > gamma_floor:
            offending.append(k)
            continue
        pd_full = _restrict(pd, k, omega, grid)
        records.append(_record(k, av, gv, pd_full, grid, n, gamma_floor))
    if offending:
        raise ResonantRegionError(offending)
    notes = [
        CUTOFF_NOTE,
        f"coefficients from a {table.M}^{n} angle FFT; action gradients by central differences",
        "gamma_k and M_k are taken over the support of a_k inside the region; spectral norm for the Hessian",
    ]
    return _assemble(records, K, n, region or grid.describe(), coordinates, notes)
