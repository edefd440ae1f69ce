"""Fourier modes, mode products ``a_k = G_k f_{0,-k}`` and the high-frequency tail."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import TWO_PI, ActionGrid, stable_sum
from .model import CoeffFn, EnsembleDensity, Observable, TrigPolyField, theta_grid

__all__ = [
    "ModeProduct",
    "ModeTable",
    "fourier_coeff",
    "mode_product",
    "tail",
    "tail_decay_fit",
    "fft_mode_table",
    "parseval_check",
    "mode_table_json",
]


def _l1(k) -> int:
    return int(sum(abs(int(v)) for v in k))


def _field(x) -> TrigPolyField:
    return x.field if isinstance(x, (Observable, EnsembleDensity)) else x


def fourier_coeff(fld, k) -> CoeffFn:
    """Exact read-off of ``c_k``; the zero function when the mode is absent."""
    return _field(fld).coeff(k)


@dataclass(frozen=True)
class ModeProduct:
    k: tuple
    a: CoeffFn
    band_limits: tuple

    @property
    def is_zero(self) -> bool:
        return self.a.is_zero


def mode_product(G, f0, k) -> ModeProduct:
    """``a_k(I) = G_k(I) f_{0,-k}(I)`` with symbolic derivatives."""
    gf, ff = _field(G), _field(f0)
    k = tuple(int(v) for v in k)
    gk = gf.coeff(k)
    fk = ff.coeff(tuple(-v for v in k))
    if gk.is_zero or fk.is_zero:
        a = CoeffFn(0.0, gf.dim)
    else:
        a = gk * fk
    return ModeProduct(k, a, (gf.band_limit, ff.band_limit))


def _cutoff_values(grid: ActionGrid, cutoff) -> np.ndarray:
    if cutoff is None:
        return np.ones(grid.size)
    return np.asarray(cutoff, dtype=float)


def tail(G, f0, K: int, grid: ActionGrid, cutoff=None) -> float:
    """``(2 pi)^n sum_{||k||_1 > K} int |G_k f_{0,-k}| dI`` (exact mode sum).

    ``cutoff`` holds optional nodal weights in ``[0, 1]`` that restrict the
    action integral (the smooth mask of the nonresonant region).
    """
    gf, ff = _field(G), _field(f0)
    n = gf.dim
    chi = _cutoff_values(grid, cutoff)
    parts = []
    for k in gf.modes:
        if _l1(k) <= K:
            continue
        mp = mode_product(gf, ff, k)
        if mp.is_zero or grid.size == 0:
            continue
        parts.append(grid.integrate(np.abs(mp.a.value(grid.nodes)) * chi))
    return TWO_PI**n * math.fsum(parts)


def tail_decay_fit(G, f0, K_values, grid: ActionGrid, cutoff=None) -> tuple[float, float]:
    """Least-squares fit ``log R_{>K} ~ c - sigma0 K``; returns ``(sigma0, rms residual)``."""
    Ks = np.unique(np.asarray(K_values, dtype=int))
    if Ks.size < 3:
        raise ValueError("tail_decay_fit needs at least 3 distinct K values")
    tails = np.array([tail(G, f0, int(K), grid, cutoff) for K in Ks])
    if np.all(tails == 0):
        raise ValueError("band-limited, no decay law: all tails vanish")
    keep = tails > 0
    if np.count_nonzero(keep) < 3:
        raise ValueError("fewer than 3 K values with nonzero tails")
    slope, icpt = np.polyfit(Ks[keep].astype(float), np.log(tails[keep]), 1)
    resid = np.log(tails[keep]) - (slope * Ks[keep] + icpt)
    return float(-slope), float(np.sqrt(np.mean(resid**2)))


# ---------------------------------------------------------------------------
# FFT path: fields that are not trigonometric polynomials (normal-form coordinates)


@dataclass
class ModeTable:
    """Fourier coefficients sampled on action points.

    ``coeffs[name]`` has shape ``(M,)*n + (P,)`` in numpy FFT ordering.
    """

    n: int
    M: int
    coeffs: dict

    def coeff(self, name: str, k) -> np.ndarray:
        idx = tuple(int(v) % self.M for v in k)
        return self.coeffs[name][idx]

    def wavevectors(self) -> np.ndarray:
        """All resolved nonzero ``k`` (components in ``[-M/2+1, M/2-1]``)."""
        half = self.M // 2 - 1
        ax = np.arange(-half, half + 1)
        mesh = np.stack(np.meshgrid(*([ax] * self.n), indexing="ij"), axis=-1).reshape(-1, self.n)
        return mesh[np.any(mesh != 0, axis=1)]

    def product(self, k, a: str = "G", b: str = "f0") -> np.ndarray:
        return self.coeff(a, k) * self.coeff(b, tuple(-int(v) for v in k))


def fft_mode_table(functions: dict, actions: np.ndarray, n: int, M: int, chunk: int = 2048) -> ModeTable:
    """Fourier coefficients in ``theta`` of callables ``F(theta, I)`` at each action point.

    ``c_k(I) = M^-n sum_theta F(theta, I) exp(-i k . theta)`` on the uniform
    ``M^n`` grid; exact for trigonometric polynomials with ``|k_j| < M/2``.
    """
    if M < 4 or M % 2:
        raise ValueError("M must be an even integer >= 4")
    actions = np.atleast_2d(actions)
    P = actions.shape[0]
    thetas = theta_grid(n, M)
    T = thetas.shape[0]
    out = {name: np.empty((M,) * n + (P,), dtype=complex) for name in functions}
    for s in range(0, P, chunk):
        I = actions[s : s + chunk]
        m = I.shape[0]
        th = np.repeat(thetas, m, axis=0)
        ac = np.tile(I, (T, 1))
        for name, fn in functions.items():
            vals = np.asarray(fn(th, ac)).reshape((M,) * n + (m,))
            out[name][..., s : s + m] = np.fft.fftn(vals, axes=tuple(range(n))) / T
    return ModeTable(n, M, out)


def parseval_check(fld, grid: ActionGrid, theta_res: int | None = None) -> tuple[float, float]:
    """``((2 pi)^n sum_k int |c_k|^2, int int |F|^2)``, both by quadrature."""
    f = _field(fld)
    n = f.dim
    lhs = TWO_PI**n * math.fsum(grid.integrate(np.abs(c.value(grid.nodes)) ** 2) for c in f.modes.values())
    if theta_res is None:
        theta_res = 2 * f.band_limit + 2
    thetas = theta_grid(n, theta_res)
    wth = (TWO_PI / theta_res) ** n
    per_node = np.array([wth * np.sum(f.eval(thetas, np.broadcast_to(I, thetas.shape)) ** 2) for I in grid.nodes])
    rhs = stable_sum(per_node * grid.weights)
    return float(lhs), float(rhs)


def mode_table_json(fld) -> str:
    """Mode table ``k -> coefficient expression`` as JSON."""
    return json.dumps(_field(fld).to_dict(), indent=2, sort_keys=True)
