"""Integrable flow, symplectic integrators and flow diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import expr as ex
from ._kernels import compile_flow
from .core import TWO_PI, PhasePoint, build_grid, torus_distance, wrap_angles
from .model import HamiltonianSystem, IntegrablePart, TrigPolyField

__all__ = [
    "FlowError",
    "FlowSpec",
    "Trajectory",
    "integrable_flow",
    "evolve",
    "trajectory",
    "flow_jacobian_det",
    "numerical_jacobian",
    "conjugacy_residual",
    "default_dt",
]

MAX_STEPS = 10**9
IMPLICIT_TOL = 1e-15
IMPLICIT_MAXIT = 60


class FlowError(RuntimeError):
    """Integration failure (step guard, divergence, non-finite state)."""


def _as_arrays(theta, action):
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    ac = np.atleast_2d(np.asarray(action, dtype=float))
    if th.shape != ac.shape:
        raise ValueError(f"theta and action shapes differ: {th.shape} vs {ac.shape}")
    return th, ac


def default_dt(integrable: IntegrablePart, domain, res: int = 21) -> float:
    """``min(1e-2, 0.1 / max|omega|)`` with the max taken on a probe grid."""
    grid = build_grid(domain, res, "midpoint")
    wmax = float(np.max(np.abs(integrable.frequency(grid.nodes)))) if grid.size else 0.0
    return min(1e-2, 0.1 / wmax) if wmax > 0 else 1e-2


class FlowSpec:
    """How to advance phase points.

    ``kind="exact"``: the integrable twist ``(theta + t omega(I), I)``.
    ``kind="symplectic"``: Strang splitting (``h`` twist, ``f`` substep) or
    implicit midpoint for ``H = h + f``.  ``integrable`` may be ``None`` to
    integrate a bare field (for instance a normal-form generator).
    """

    def __init__(
        self,
        kind: str,
        integrable: IntegrablePart | None = None,
        perturbation: TrigPolyField | None = None,
        dt: float | None = None,
        scheme: str = "strang",
        jit: bool = True,
    ):
        if kind not in ("exact", "symplectic"):
            raise ValueError(f"unknown flow kind {kind!r}")
        if scheme not in ("strang", "midpoint"):
            raise ValueError(f"unknown scheme {scheme!r}")
        if kind == "exact" and integrable is None:
            raise ValueError("exact flow needs an integrable part")
        if kind == "symplectic":
            if dt is None or not dt > 0:
                raise ValueError("symplectic flow needs dt > 0")
            if perturbation is None:
                n = integrable.dim
                perturbation = TrigPolyField.zero(n)
            if scheme == "strang" and integrable is None:
                scheme = "midpoint"
        self.kind = kind
        self.integrable = integrable
        self.perturbation = perturbation
        self.dt = None if dt is None else float(dt)
        self.scheme = scheme
        self.jit = bool(jit)
        self._kernel = None

    # -- constructors -------------------------------------------------------
    @classmethod
    def exact(cls, integrable: IntegrablePart) -> "FlowSpec":
        return cls("exact", integrable)

    @classmethod
    def for_system(cls, system: HamiltonianSystem, dt: float | None = None, scheme: str = "strang", jit: bool = True) -> "FlowSpec":
        if dt is None:
            dt = default_dt(system.integrable, system.domain)
        return cls("symplectic", system.integrable, system.perturbation, dt, scheme, jit)

    @classmethod
    def field_flow(cls, fld: TrigPolyField, dt: float, jit: bool = True) -> "FlowSpec":
        return cls("symplectic", None, fld, dt, "midpoint", jit)

    @property
    def dim(self) -> int:
        return self.integrable.dim if self.integrable is not None else self.perturbation.dim

    @property
    def kick_only(self) -> bool:
        return self.perturbation.coefficients_constant

    def describe(self) -> dict:
        return {"kind": self.kind, "scheme": self.scheme if self.kind == "symplectic" else None, "dt": self.dt, "jit": self.jit}

    # -- machinery ----------------------------------------------------------
    @property
    def kernel(self):
        if self._kernel is None:
            n = self.dim
            h_expr = omega = None
            if self.integrable is not None:
                h_expr = ex.split_complex(self.integrable.h.expr)[0]
                omega = [ex.split_complex(e)[0] for e in self.integrable.frequency_exprs]
            modes = [(k, c.expr) for k, c in self.perturbation.representatives()]
            self._kernel = compile_flow(h_expr, omega, modes, n, self.kick_only)
        return self._kernel

    def energy(self, theta, action) -> np.ndarray:
        th, ac = _as_arrays(theta, action)
        h = self.integrable.value(ac) if self.integrable is not None else 0.0
        return h + self.perturbation.eval(th, ac)

    def _omega(self, I):
        if self.integrable is None:
            return np.zeros_like(I)
        return self.integrable.frequency(I)

    def _field_vf(self, th, I, with_h: bool):
        gth = self.perturbation.grad_theta(th, I)
        gI = self.perturbation.grad_I(th, I)
        dth = gI + (self._omega(I) if with_h else 0.0)
        return dth, -gth

    def _midpoint_numpy(self, th, I, dt, with_h):
        dth, dI = self._field_vf(th, I, with_h)
        th1, I1 = th + dt * dth, I + dt * dI
        for _ in range(IMPLICIT_MAXIT):
            dth, dI = self._field_vf(0.5 * (th + th1), 0.5 * (I + I1), with_h)
            a, b = th + dt * dth, I + dt * dI
            err = np.maximum(np.max(np.abs(a - th1), axis=1), np.max(np.abs(b - I1), axis=1))
            scale = np.maximum(1.0, np.maximum(np.max(np.abs(a), axis=1), np.max(np.abs(b), axis=1)))
            th1, I1 = a, b
            if np.all(err <= IMPLICIT_TOL * scale):
                return th1, I1, True
        return th1, I1, False

    def _run_numpy(self, th, I, dt, nsteps):
        ok = True
        for _ in range(nsteps):
            if self.scheme == "strang":
                th = th + 0.5 * dt * self._omega(I)
                if self.kick_only:
                    I = I - dt * self.perturbation.grad_theta(th, I)
                else:
                    th, I, conv = self._midpoint_numpy(th, I, dt, False)
                    ok &= conv
                th = th + 0.5 * dt * self._omega(I)
            else:
                th, I, conv = self._midpoint_numpy(th, I, dt, self.integrable is not None)
                ok &= conv
        return th, I, ok

    def evolve_arrays(self, theta, action, t: float, wrap: bool = True):
        """Advance arrays of points by time ``t``; returns ``(theta, action)``."""
        th, ac = _as_arrays(theta, action)
        t = float(t)
        if self.kind == "exact":
            out = th + t * self.integrable.frequency(ac)
            return (wrap_angles(out) if wrap else out), ac.copy()
        nsteps = int(math.ceil(abs(t) / self.dt - 1e-9)) if t != 0 else 0
        if nsteps > MAX_STEPS:
            raise FlowError(f"|t|/dt = {abs(t) / self.dt:.3g} exceeds the step guard {MAX_STEPS:.0e}")
        if nsteps == 0:
            return (wrap_angles(th) if wrap else th.copy()), ac.copy()
        h = t / nsteps
        if self.jit:
            k = self.kernel
            if self.scheme == "strang":
                th2, ac2, status = k.strang(th, ac, h, nsteps, IMPLICIT_TOL, IMPLICIT_MAXIT)
            else:
                th2, ac2, status = k.midpoint(th, ac, h, nsteps, IMPLICIT_TOL, IMPLICIT_MAXIT)
            converged = not np.any(status)
        else:
            th2, ac2, converged = self._run_numpy(th, ac, h, nsteps)
        if not (np.all(np.isfinite(th2)) and np.all(np.isfinite(ac2))):
            raise FlowError("non-finite state encountered; reduce dt")
        if not converged:
            raise FlowError("implicit midpoint iteration did not converge; reduce dt")
        return (wrap_angles(th2) if wrap else th2), ac2


def integrable_flow(point: PhasePoint, t: float, omega) -> PhasePoint:
    """``Psi_t(theta, I) = (theta + t omega(I), I)``; ``omega`` is callable or a vector."""
    w = omega(point.action) if callable(omega) else np.asarray(omega, dtype=float)
    w = np.asarray(w, dtype=float).reshape(point.action.shape)
    return PhasePoint(point.theta + t * w, point.action)


def evolve(flow, point, t: float):
    """Time-``t`` map.  Accepts a :class:`PhasePoint` or a ``(theta, action)`` pair of arrays."""
    if isinstance(point, PhasePoint):
        th, ac = flow.evolve_arrays(point.theta[None, :], point.action[None, :], t)
        return PhasePoint(th[0], ac[0])
    th, ac = point
    return flow.evolve_arrays(th, ac, t)


@dataclass
class Trajectory:
    times: np.ndarray
    theta: np.ndarray
    action: np.ndarray
    energy: np.ndarray

    @property
    def states(self) -> list:
        return [PhasePoint(a, b) for a, b in zip(self.theta, self.action)]

    @property
    def energy_drift(self) -> float:
        return float(np.max(np.abs(self.energy - self.energy[0])))


def trajectory(flow: FlowSpec, point: PhasePoint, times) -> Trajectory:
    """States at increasing ``times`` (progressive integration from ``times[0] = 0``)."""
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    th = point.theta[None, :].copy()
    ac = point.action[None, :].copy()
    thetas, actions = [], []
    prev = 0.0
    for t in times:
        th, ac = flow.evolve_arrays(th, ac, t - prev)
        prev = t
        thetas.append(th[0])
        actions.append(ac[0])
    thetas = np.array(thetas)
    actions = np.array(actions)
    energy = flow.energy(thetas, actions)
    return Trajectory(times, thetas, actions, energy)


def numerical_jacobian(mapping, theta, action, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a phase-space map, shape ``(m, 2n, 2n)``.

    ``mapping(theta, action) -> (theta, action)`` acts on arrays; angle
    differences are taken on the torus.
    """
    th, ac = _as_arrays(theta, action)
    m, n = th.shape
    z = np.concatenate([th, ac], axis=1)
    plus = np.repeat(z, 2 * n, axis=0).reshape(m, 2 * n, 2 * n)
    minus = plus.copy()
    idx = np.arange(2 * n)
    plus[:, idx, idx] += h
    minus[:, idx, idx] -= h
    zz = np.concatenate([plus.reshape(-1, 2 * n), minus.reshape(-1, 2 * n)], axis=0)
    oth, oac = mapping(zz[:, :n], zz[:, n:])
    half = m * 2 * n
    dth = np.mod(oth[:half] - oth[half:] + np.pi, TWO_PI) - np.pi
    dac = oac[:half] - oac[half:]
    cols = np.concatenate([dth, dac], axis=1).reshape(m, 2 * n, 2 * n) / (2 * h)
    return np.transpose(cols, (0, 2, 1))


def flow_jacobian_det(flow: FlowSpec, point: PhasePoint, t: float, h: float = 1e-6) -> float:
    """Determinant of the Jacobian of the time-``t`` map at ``point``."""
    if flow.kind == "exact" or t == 0:
        return 1.0
    J = numerical_jacobian(lambda a, b: flow.evolve_arrays(a, b, t, wrap=False), point.theta[None, :], point.action[None, :], h)
    return float(np.linalg.det(J[0]))


def conjugacy_residual(transform, flow_a, flow_b, t: float, theta, action) -> float:
    """``max |flow_a^t(Phi(z)) - Phi(flow_b^t(z))|`` over probes (torus-aware)."""
    th, ac = _as_arrays(theta, action)
    if t == 0:
        return 0.0
    pth, pac = transform(th, ac)
    lth, lac = flow_a.evolve_arrays(pth, pac, t)
    bth, bac = flow_b.evolve_arrays(th, ac, t)
    rth, rac = transform(bth, bac)
    return float(np.max(torus_distance(lth, lac, rth, rac)))
