"""Resonant zone ``N`` / nonresonant region ``D``, resonant mass and ``(K, alpha)`` schedules."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core import ActionGrid, build_grid, enumerate_wavevectors
from .model import EnsembleDensity, IntegrablePart

__all__ = [
    "PartitionSpec",
    "PartitionMap",
    "SmoothCutoff",
    "is_resonant",
    "min_distance",
    "partition_map",
    "resonant_mass",
    "effective_resonant_mass",
    "zz_schedule",
    "power_schedule",
    "default_mass_grid",
]

CHUNK = 2048


@dataclass(frozen=True)
class PartitionSpec:
    """Order cutoff ``K`` (on ``||k||_1``) and resonance width ``alpha``.

    ``distance="euclidean"`` measures ``|k . omega| / ||k||_2``;
    ``distance="raw"`` uses ``|k . omega|``.
    """

    K: int
    alpha: float
    distance: str = "euclidean"
    schedule: str = "explicit"
    r: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be an integer >= 1, got {self.K}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.distance not in ("euclidean", "raw"):
            raise ValueError(f"unknown distance convention {self.distance!r}")

    def to_dict(self) -> dict:
        return {"K": int(self.K), "alpha": float(self.alpha), "distance": self.distance, "schedule": self.schedule, "r": self.r, **self.params}


@lru_cache(maxsize=32)
def _wavevectors(n: int, K: int) -> np.ndarray:
    ks = enumerate_wavevectors(n, K)
    ks.setflags(write=False)
    return ks


def _scaled_ks(n: int, spec: PartitionSpec) -> tuple[np.ndarray, np.ndarray]:
    ks = _wavevectors(n, int(spec.K))
    kf = ks.astype(float)
    if spec.distance == "euclidean":
        kf = kf / np.linalg.norm(kf, axis=1, keepdims=True)
    return ks, kf


def min_distance(omegas: np.ndarray, spec: PartitionSpec) -> tuple[np.ndarray, np.ndarray]:
    """Distance to the nearest resonance plane and the index of its ``k``."""
    omegas = np.atleast_2d(np.asarray(omegas, dtype=float))
    ks, kf = _scaled_ks(omegas.shape[1], spec)
    dist = np.empty(omegas.shape[0])
    arg = np.empty(omegas.shape[0], dtype=np.int64)
    for s in range(0, omegas.shape[0], CHUNK):
        d = np.abs(omegas[s : s + CHUNK] @ kf.T)
        a = np.argmin(d, axis=1)
        arg[s : s + CHUNK] = a
        dist[s : s + CHUNK] = d[np.arange(d.shape[0]), a]
    return dist, arg


def is_resonant(I, spec: PartitionSpec, omega) -> tuple[bool, tuple, float]:
    """``(flag, argmin k, distance)`` for a single action vector.

    ``omega`` is an :class:`IntegrablePart` or a callable returning frequencies.
    """
    I = np.asarray(I, dtype=float)
    w = omega.frequency(I[None, :]) if hasattr(omega, "frequency") else np.atleast_2d(omega(I[None, :]))
    d, a = min_distance(w, spec)
    ks = _wavevectors(I.size, int(spec.K))
    return bool(d[0] < spec.alpha), tuple(int(v) for v in ks[a[0]]), float(d[0])


def _lipschitz(integrable: IntegrablePart, nodes: np.ndarray) -> float:
    if nodes.shape[0] == 0:
        return 0.0
    J = integrable.frequency_jacobian(nodes)
    return float(np.max(np.linalg.norm(J, ord=2, axis=(-2, -1))))


@dataclass
class PartitionMap:
    nodes: np.ndarray
    resonant: np.ndarray
    conservative: np.ndarray
    argmin_k: np.ndarray
    distance: np.ndarray
    spec: PartitionSpec
    band: float

    def to_csv(self) -> str:
        n = self.nodes.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"I{j + 1}" for j in range(n)] + ["resonant", "conservative"] + [f"k{j + 1}" for j in range(n)] + ["distance"])
        for I, f, c, k, d in zip(self.nodes, self.resonant, self.conservative, self.argmin_k, self.distance):
            w.writerow([f"{x:.17g}" for x in I] + [int(f), int(c)] + [int(x) for x in k] + [f"{d:.17g}"])
        return buf.getvalue()


def partition_map(grid: ActionGrid, spec: PartitionSpec, integrable: IntegrablePart) -> PartitionMap:
    """Classify grid nodes.

    ``resonant`` is ``distance < alpha``.  ``conservative`` also flags nodes
    within ``L h`` of the threshold (``L = max ||grad omega||_2``, ``h`` the
    half cell diagonal), since the cell around such a node may straddle it.
    """
    nodes = grid.nodes
    dist, arg = min_distance(integrable.frequency(nodes), spec) if grid.size else (np.zeros(0), np.zeros(0, dtype=np.int64))
    ks = _wavevectors(grid.dim, int(spec.K))
    band = _lipschitz(integrable, nodes) * grid.half_diagonal
    return PartitionMap(
        nodes=nodes,
        resonant=dist < spec.alpha,
        conservative=dist < spec.alpha + band,
        argmin_k=ks[arg] if grid.size else np.zeros((0, grid.dim), dtype=np.int64),
        distance=dist,
        spec=spec,
        band=band,
    )


def default_mass_grid(f0: EnsembleDensity, resolution: int | None = None) -> ActionGrid:
    n = f0.dim
    if resolution is None:
        resolution = {1: 4000, 2: 400}.get(n, 60)
    return build_grid(f0.domain, resolution, "midpoint", window=f0.support)


def resonant_mass(f0: EnsembleDensity, spec: PartitionSpec, integrable: IntegrablePart, grid: ActionGrid | None = None, conservative: bool = True) -> float:
    """``P_res = int_N rho_0(I) dI`` with ``rho_0 = (2 pi)^n f_{0,0}``."""
    grid = default_mass_grid(f0) if grid is None else grid
    pm = partition_map(grid, spec, integrable)
    flags = pm.conservative if conservative else pm.resonant
    rho = f0.marginal(grid.nodes)
    return float(grid.integrate(np.where(flags, rho, 0.0)))


# ---------------------------------------------------------------------------


def _e(x):
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos])
    return out


def smooth_step(x) -> tuple[np.ndarray, np.ndarray]:
    """C-infinity step (0 for x <= 0, 1 for x >= 1) and its derivative."""
    x = np.asarray(x, dtype=float)
    a, b = _e(x), _e(1.0 - x)
    s = a + b
    val = np.where(s > 0, a / np.where(s > 0, s, 1.0), 0.0)
    da = np.where(x > 0, a / np.where(x > 0, x, 1.0) ** 2, 0.0)
    db = np.where(1 - x > 0, b / np.where(1 - x > 0, 1 - x, 1.0) ** 2, 0.0)
    der = np.where(s > 0, (da * b + a * db) / np.where(s > 0, s, 1.0) ** 2, 0.0)
    return val, der


@dataclass(frozen=True)
class SmoothCutoff:
    """Smooth indicator of the nonresonant region.

    ``chi = S((d(I) - alpha - margin) / width)`` with ``d`` the resonance
    distance, so ``chi`` vanishes on ``N`` and on a margin inside ``D``.
    All lengths are in frequency units.
    """

    spec: PartitionSpec
    integrable: IntegrablePart
    margin: float = 0.0
    width: float = 0.05

    def __post_init__(self):
        if not self.width > 0 or self.margin < 0:
            raise ValueError("cutoff width must be positive and margin nonnegative")

    def __call__(self, I) -> tuple[np.ndarray, np.ndarray]:
        I = np.atleast_2d(np.asarray(I, dtype=float))
        if I.shape[0] == 0:
            return np.zeros(0), np.zeros((0, I.shape[1]))
        w = self.integrable.frequency(I)
        d, a = min_distance(w, self.spec)
        ks, kf = _scaled_ks(I.shape[1], self.spec)
        kk = kf[a]
        sgn = np.sign(np.sum(kk * w, axis=1))
        J = self.integrable.frequency_jacobian(I)
        grad_d = sgn[:, None] * np.einsum("mij,mi->mj", J, kk)
        x = (d - self.spec.alpha - self.margin) / self.width
        val, der = smooth_step(x)
        return val, (der / self.width)[:, None] * grad_d

    def value(self, I) -> np.ndarray:
        return self(I)[0]

    @property
    def threshold(self) -> float:
        """Distance beyond which the cutoff equals 1."""
        return self.spec.alpha + self.margin + self.width

    def describe(self) -> dict:
        return {"margin": self.margin, "width": self.width, "alpha": self.spec.alpha, "profile": "exp(-1/x) smooth step"}


def effective_resonant_mass(f0: EnsembleDensity, cutoff: SmoothCutoff, grid: ActionGrid | None = None) -> float:
    """``int rho_0 (1 - chi) dI``: mass not carried by the cut-off density ``f0 chi``."""
    grid = default_mass_grid(f0) if grid is None else grid
    rho = f0.marginal(grid.nodes)
    return float(grid.integrate(rho * (1.0 - cutoff.value(grid.nodes))))


# ---------------------------------------------------------------------------


def zz_schedule(eps: float, beta: float, s0: float) -> PartitionSpec:
    """``K = ceil(-12 s0 log eps)``, ``r = sqrt(eps) / beta``, ``alpha = r K / beta``."""
    if not 0 < eps < 1:
        raise ValueError("schedule undefined unless 0 < eps < 1")
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    if not s0 > 0:
        raise ValueError("s0 must be positive")
    raw = -12.0 * s0 * math.log(eps)
    # tolerance keeps exact integers (eps = e^-1) from rounding up
    K = max(1, math.ceil(raw - 1e-9))
    r = math.sqrt(eps) / beta
    return PartitionSpec(K, r * K / beta, schedule="zz", r=r, params={"beta": beta, "s0": s0, "K_raw": raw})


def power_schedule(eps: float, a: float, prefactor: float = 1.0, *, alpha: float) -> PartitionSpec:
    """``K = floor(prefactor * eps^-a)`` with ``alpha`` supplied separately."""
    if not a > 0:
        raise ValueError("exponent a must be positive")
    if not eps > 0:
        raise ValueError("eps must be positive")
    K = math.floor(prefactor * eps ** (-a) + 1e-9)
    if K < 1:
        raise ValueError(f"power schedule gives K = {K}; increase the prefactor")
    return PartitionSpec(K, alpha, schedule="power", params={"a": a, "prefactor": prefactor})
