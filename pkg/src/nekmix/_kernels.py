"""Compiled flow kernels.

Each trigonometric field is turned into scalar Python source (complex
coefficients split into real and imaginary parts) and compiled with numba
together with generic Strang and implicit-midpoint drivers.  Kernels are
cached by source text, so rebuilding an identical system is free.

Per-sample work is identical whatever the thread count, so results do not
depend on how the sample loop is partitioned.
"""

from __future__ import annotations

import threading

import numpy as np

from . import expr as ex
from .expr import _bump_poly

__all__ = ["FlowKernel", "compile_flow", "kernel_cache_size"]

_CACHE: dict = {}
_LOCK = threading.Lock()

# status bits written per sample
STATUS_NOT_CONVERGED = 1

_MAX_BUMP_ORDER = 8


def _bump_table() -> np.ndarray:
    table = np.zeros((_MAX_BUMP_ORDER + 1, 2 * _MAX_BUMP_ORDER + 1))
    for d in range(_MAX_BUMP_ORDER + 1):
        coef = _bump_poly(d).coef
        table[d, : coef.size] = coef
    return table


_PRELUDE = '''
import math
import numpy as np
from numba import njit, prange

@njit(cache=False, nogil=True)
def _bump(s, d):
    if s >= 1.0:
        return 0.0
    u = 1.0 / (1.0 - s)
    if u >= 700.0:
        return 0.0
    p = 0.0
    for i in range(2 * d, -1, -1):
        p = p * u + BUMP_TABLE[d, i]
    return math.exp(1.0 - u) * p
'''


def _names(n: int) -> list:
    return [f"x{j}" for j in range(n)]


def _unpack(n: int, indent: str = "    ") -> str:
    return "".join(f"{indent}x{j} = I[{j}]\n" for j in range(n))


def _omega_source(omega_exprs, n: int) -> str:
    names = _names(n)
    body = _unpack(n)
    for j in range(n):
        e = omega_exprs[j] if omega_exprs is not None else ex.const(0.0)
        body += f"    w[{j}] = {ex.to_source(e, names)}\n"
    return f"@njit(cache=False, nogil=True)\ndef omega(I, w):\n{body}"


def _hvalue_source(h_expr, n: int) -> str:
    names = _names(n)
    e = h_expr if h_expr is not None else ex.const(0.0)
    return f"@njit(cache=False, nogil=True)\ndef hvalue(I):\n{_unpack(n)}    return {ex.to_source(e, names)}\n"


def _field_sources(modes, n: int) -> tuple[str, str]:
    """``fgrad(th, I, gth, gI)`` and ``fvalue(th, I)`` for a real field.

    ``modes`` is a list of ``(k, expr)`` with one representative per +-k pair.
    """
    names = _names(n)
    grad = _unpack(n)
    grad += "".join(f"    gth[{j}] = 0.0\n    gI[{j}] = 0.0\n" for j in range(n))
    val = _unpack(n) + "    v = 0.0\n"
    for k, e in modes:
        re_, im_ = ex.split_complex(e)
        if all(v == 0 for v in k):
            if not ex.is_zero(re_):
                val += f"    v += {ex.to_source(re_, names)}\n"
            for j in range(n):
                d = ex.diff(re_, j)
                if not ex.is_zero(d):
                    grad += f"    gI[{j}] += {ex.to_source(d, names)}\n"
            continue
        phase = " + ".join(f"{float(kj)!r} * th[{j}]" for j, kj in enumerate(k) if kj != 0)
        block = f"    ph = {phase}\n    cs = math.cos(ph)\n    sn = math.sin(ph)\n"
        block += f"    re = {ex.to_source(re_, names)}\n    im = {ex.to_source(im_, names)}\n"
        grad += block
        val += block + "    v += 2.0 * (re * cs - im * sn)\n"
        for j, kj in enumerate(k):
            if kj != 0:
                grad += f"    gth[{j}] += {2.0 * kj!r} * (-re * sn - im * cs)\n"
        for j in range(n):
            dre = ex.diff(re_, j)
            dim = ex.diff(im_, j)
            terms = []
            if not ex.is_zero(dre):
                terms.append(f"({ex.to_source(dre, names)}) * cs")
            if not ex.is_zero(dim):
                terms.append(f"-({ex.to_source(dim, names)}) * sn")
            if terms:
                grad += f"    gI[{j}] += 2.0 * ({' + '.join(terms)})\n"
    fgrad = f"@njit(cache=False, nogil=True)\ndef fgrad(th, I, gth, gI):\n{grad}"
    fvalue = f"@njit(cache=False, nogil=True)\ndef fvalue(th, I):\n{val}    return v\n"
    return fgrad, fvalue


_DRIVERS = '''
@njit(cache=False, nogil=True)
def vector_field(th, I, w, gth, gI, dth, dI, with_h):
    fgrad(th, I, gth, gI)
    n = th.shape[0]
    if with_h:
        omega(I, w)
        for j in range(n):
            dth[j] = w[j] + gI[j]
    else:
        for j in range(n):
            dth[j] = gI[j]
    for j in range(n):
        dI[j] = -gth[j]


@njit(cache=False, nogil=True)
def midpoint_step(th, I, dt, tol, maxit, with_h, w, gth, gI, dth, dI, th1, I1, thm, Im):
    n = th.shape[0]
    vector_field(th, I, w, gth, gI, dth, dI, with_h)
    for j in range(n):
        th1[j] = th[j] + dt * dth[j]
        I1[j] = I[j] + dt * dI[j]
    ok = False
    for it in range(maxit):
        for j in range(n):
            thm[j] = 0.5 * (th[j] + th1[j])
            Im[j] = 0.5 * (I[j] + I1[j])
        vector_field(thm, Im, w, gth, gI, dth, dI, with_h)
        err = 0.0
        scale = 1.0
        for j in range(n):
            a = th[j] + dt * dth[j]
            b = I[j] + dt * dI[j]
            err = max(err, abs(a - th1[j]), abs(b - I1[j]))
            scale = max(scale, abs(a), abs(b))
            th1[j] = a
            I1[j] = b
        if err <= tol * scale:
            ok = True
            break
    for j in range(n):
        th[j] = th1[j]
        I[j] = I1[j]
    return 0 if ok else 1


@njit(cache=False, nogil=True, parallel=PARALLEL)
def strang(TH, IA, dt, nsteps, kick_only, tol, maxit, status):
    N, n = TH.shape
    for s in prange(N):
        th = TH[s].copy()
        I = IA[s].copy()
        w = np.empty(n)
        gth = np.empty(n)
        gI = np.empty(n)
        dth = np.empty(n)
        dI = np.empty(n)
        th1 = np.empty(n)
        I1 = np.empty(n)
        thm = np.empty(n)
        Im = np.empty(n)
        st = 0
        half = 0.5 * dt
        for step in range(nsteps):
            omega(I, w)
            for j in range(n):
                th[j] += half * w[j]
            if kick_only:
                fgrad(th, I, gth, gI)
                for j in range(n):
                    I[j] -= dt * gth[j]
            else:
                st |= midpoint_step(th, I, dt, tol, maxit, False, w, gth, gI, dth, dI, th1, I1, thm, Im)
            omega(I, w)
            for j in range(n):
                th[j] += half * w[j]
        for j in range(n):
            TH[s, j] = th[j]
            IA[s, j] = I[j]
        status[s] |= st


@njit(cache=False, nogil=True, parallel=PARALLEL)
def midpoint(TH, IA, dt, nsteps, with_h, tol, maxit, status):
    N, n = TH.shape
    for s in prange(N):
        th = TH[s].copy()
        I = IA[s].copy()
        w = np.empty(n)
        gth = np.empty(n)
        gI = np.empty(n)
        dth = np.empty(n)
        dI = np.empty(n)
        th1 = np.empty(n)
        I1 = np.empty(n)
        thm = np.empty(n)
        Im = np.empty(n)
        st = 0
        for step in range(nsteps):
            st |= midpoint_step(th, I, dt, tol, maxit, with_h, w, gth, gI, dth, dI, th1, I1, thm, Im)
        for j in range(n):
            TH[s, j] = th[j]
            IA[s, j] = I[j]
        status[s] |= st


@njit(cache=False, nogil=True, parallel=PARALLEL)
def energy(TH, IA, out):
    N = TH.shape[0]
    for s in prange(N):
        out[s] = hvalue(IA[s]) + fvalue(TH[s], IA[s])
'''


class FlowKernel:
    """Compiled Strang / implicit-midpoint integrators for ``H = h(I) + f``."""

    def __init__(self, namespace: dict, source: str, kick_only: bool, has_h: bool):
        self._ns = namespace
        self.source = source
        self.kick_only = kick_only
        self.has_h = has_h

    def strang(self, TH, IA, dt: float, nsteps: int, tol: float = 1e-15, maxit: int = 60):
        TH = np.ascontiguousarray(TH, dtype=float).copy()
        IA = np.ascontiguousarray(IA, dtype=float).copy()
        status = np.zeros(TH.shape[0], dtype=np.int64)
        if nsteps > 0:
            self._ns["strang"](TH, IA, float(dt), int(nsteps), bool(self.kick_only), float(tol), int(maxit), status)
        return TH, IA, status

    def midpoint(self, TH, IA, dt: float, nsteps: int, tol: float = 1e-15, maxit: int = 60):
        TH = np.ascontiguousarray(TH, dtype=float).copy()
        IA = np.ascontiguousarray(IA, dtype=float).copy()
        status = np.zeros(TH.shape[0], dtype=np.int64)
        if nsteps > 0:
            self._ns["midpoint"](TH, IA, float(dt), int(nsteps), bool(self.has_h), float(tol), int(maxit), status)
        return TH, IA, status

    def energy(self, TH, IA) -> np.ndarray:
        TH = np.ascontiguousarray(TH, dtype=float)
        IA = np.ascontiguousarray(IA, dtype=float)
        out = np.empty(TH.shape[0])
        self._ns["energy"](TH, IA, out)
        return out


def _parallel_default() -> bool:
    import numba

    return numba.config.NUMBA_NUM_THREADS > 1


def compile_flow(h_expr, omega_exprs, modes, n: int, kick_only: bool) -> FlowKernel:
    """Build (or fetch from cache) the kernel for one Hamiltonian.

    ``h_expr``/``omega_exprs`` may be ``None`` for a pure field flow (e.g. a
    normal-form generator); ``modes`` lists representative ``(k, expr)`` pairs.
    """
    parallel = _parallel_default()
    fgrad, fvalue = _field_sources(modes, n)
    source = "\n\n".join(
        [
            _PRELUDE,
            _omega_source(omega_exprs, n),
            _hvalue_source(h_expr, n),
            fgrad,
            fvalue,
            _DRIVERS.replace("PARALLEL", "True" if parallel else "False"),
        ]
    )
    key = source
    with _LOCK:
        hit = _CACHE.get(key)
        if hit is not None:
            return FlowKernel(hit, source, kick_only, omega_exprs is not None)
        ns = {"BUMP_TABLE": _bump_table()}
        exec(compile(source, "<nekmix-kernel>", "exec"), ns)
        _CACHE[key] = ns
    return FlowKernel(ns, source, kick_only, omega_exprs is not None)


def kernel_cache_size() -> int:
    return len(_CACHE)
