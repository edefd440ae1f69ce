"""Hamiltonians, observables and densities as finite Fourier series in the angles.

A :class:`TrigPolyField` is ``sum_k c_k(I) exp(i k . theta)`` with each
``c_k`` a :class:`CoeffFn` (an expression tree in the actions), so values and
action derivatives of any order are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .core import TWO_PI, ActionDomain, PhasePoint, build_grid, wrap_angles

__all__ = [
    "CoeffFn",
    "TrigPolyField",
    "IntegrablePart",
    "HamiltonianSystem",
    "EnsembleDensity",
    "Observable",
    "eval_field",
    "frequency",
    "builtin_system",
    "builtin_case",
    "BUILTINS",
]

REALITY_TOL = 1e-10


def _as_points(I, n: int) -> np.ndarray:
    I = np.asarray(I, dtype=float)
    if I.ndim == 1:
        I = I[None, :]
    if I.shape[-1] != n:
        raise ValueError(f"expected action points of dimension {n}, got shape {I.shape}")
    return I


class CoeffFn:
    """Action-dependent coefficient with exact gradient and Hessian."""

    def __init__(self, expression, dim: int):
        if isinstance(expression, str):
            expression = ex.parse(expression, dim)
        elif not isinstance(expression, ex.Expr):
            expression = ex.const(expression)
        self.expr = expression
        self.dim = int(dim)
        self._grad = None
        self._hess = None

    # -- derivative trees -------------------------------------------------
    @property
    def grad_exprs(self) -> list:
        if self._grad is None:
            self._grad = [ex.diff(self.expr, j) for j in range(self.dim)]
        return self._grad

    @property
    def hess_exprs(self) -> list:
        if self._hess is None:
            g = self.grad_exprs
            self._hess = [[ex.diff(g[i], j) for j in range(self.dim)] for i in range(self.dim)]
        return self._hess

    # -- evaluation ---------------------------------------------------------
    def value(self, I) -> np.ndarray:
        return ex.evaluate(self.expr, _as_points(I, self.dim))

    def grad(self, I) -> np.ndarray:
        P = _as_points(I, self.dim)
        return np.stack([ex.evaluate(g, P) for g in self.grad_exprs], axis=-1)

    def hess(self, I) -> np.ndarray:
        P = _as_points(I, self.dim)
        H = self.hess_exprs
        rows = [np.stack([ex.evaluate(H[i][j], P) for j in range(self.dim)], axis=-1) for i in range(self.dim)]
        return np.stack(rows, axis=-2)

    # -- algebra ------------------------------------------------------------
    @property
    def is_zero(self) -> bool:
        return ex.is_zero(self.expr)

    @property
    def is_constant(self) -> bool:
        return ex.is_constant(self.expr)

    def conj(self) -> "CoeffFn":
        re, im = ex.split_complex(self.expr)
        if ex.is_zero(im):
            return self
        return CoeffFn(ex.add(re, ex.mul(ex.const(-1j), im)), self.dim)

    def parts(self) -> tuple:
        """Real and imaginary parts as real expression trees."""
        return ex.split_complex(self.expr)

    def __add__(self, other: "CoeffFn") -> "CoeffFn":
        return CoeffFn(ex.add(self.expr, _expr_of(other)), self.dim)

    def __mul__(self, other) -> "CoeffFn":
        return CoeffFn(ex.mul(self.expr, _expr_of(other)), self.dim)

    __rmul__ = __mul__

    def __str__(self) -> str:
        return ex.to_string(self.expr)

    def __repr__(self) -> str:
        return f"CoeffFn({self})"

    def support_box(self):
        return ex.support_box(self.expr, self.dim)


def _expr_of(x):
    if isinstance(x, CoeffFn):
        return x.expr
    if isinstance(x, ex.Expr):
        return x
    return ex.const(x)


def _key(k) -> tuple:
    return tuple(int(v) for v in k)


def _neg(k: tuple) -> tuple:
    return tuple(-v for v in k)


def is_representative(k: tuple) -> bool:
    """First nonzero component positive (or k = 0)."""
    for v in k:
        if v != 0:
            return v > 0
    return True


class TrigPolyField:
    """Finite Fourier series in ``theta`` with :class:`CoeffFn` coefficients."""

    def __init__(self, modes: dict, dim: int, real: bool = True):
        self.dim = int(dim)
        self.real = bool(real)
        clean = {}
        for k, c in modes.items():
            k = _key(k)
            if len(k) != self.dim:
                raise ValueError(f"wavevector {k} has wrong dimension (expected {self.dim})")
            if not isinstance(c, CoeffFn):
                c = CoeffFn(c, self.dim)
            if c.dim != self.dim:
                raise ValueError("coefficient dimension mismatch")
            if c.is_zero:
                continue
            clean[k] = clean[k] + c if k in clean else c
        if self.real:
            for k in list(clean):
                nk = _neg(k)
                if nk not in clean:
                    clean[nk] = clean[k].conj()
        self.modes = dict(sorted(clean.items()))

    # -- constructors -------------------------------------------------------
    @classmethod
    def zero(cls, dim: int) -> "TrigPolyField":
        return cls({}, dim)

    @classmethod
    def from_real_terms(cls, terms, dim: int) -> "TrigPolyField":
        """Build a real field from ``(kind, k, coefficient)`` terms.

        ``kind`` is ``"cos"``, ``"sin"`` or ``"const"``; the term is
        ``coefficient(I) * cos(k . theta)`` and so on.
        """
        modes: dict = {}

        def put(k, c):
            k = _key(k)
            modes[k] = modes[k] + c if k in modes else c

        for kind, k, coeff in terms:
            k = _key(k if k is not None else (0,) * dim)
            c = coeff if isinstance(coeff, CoeffFn) else CoeffFn(coeff, dim)
            if kind == "const" or all(v == 0 for v in k):
                if kind == "sin":
                    continue
                put((0,) * dim, c)
            elif kind == "cos":
                put(k, c * 0.5)
                put(_neg(k), c * 0.5)
            elif kind == "sin":
                put(k, c * (-0.5j))
                put(_neg(k), c * 0.5j)
            else:
                raise ValueError(f"unknown term kind {kind!r}")
        return cls(modes, dim, real=False)._mark_real()

    def _mark_real(self) -> "TrigPolyField":
        self.real = True
        return self

    # -- structure ----------------------------------------------------------
    @property
    def band_limit(self) -> int:
        return max((sum(abs(v) for v in k) for k in self.modes), default=0)

    def coeff(self, k) -> CoeffFn:
        k = _key(k)
        c = self.modes.get(k)
        return c if c is not None else CoeffFn(ex.const(0.0), self.dim)

    def zero_mode(self) -> CoeffFn:
        return self.coeff((0,) * self.dim)

    def representatives(self) -> list:
        """``(k, c_k)`` for ``k = 0`` and one member of each ``+-k`` pair."""
        return [(k, c) for k, c in self.modes.items() if is_representative(k)]

    def _filter(self, pred) -> "TrigPolyField":
        return TrigPolyField({k: c for k, c in self.modes.items() if pred(k)}, self.dim, real=self.real)

    def truncate(self, K: int) -> "TrigPolyField":
        return self._filter(lambda k: sum(abs(v) for v in k) <= K)

    def high_part(self, K: int) -> "TrigPolyField":
        return self._filter(lambda k: sum(abs(v) for v in k) > K)

    def oscillating(self) -> "TrigPolyField":
        return self._filter(lambda k: any(v != 0 for v in k))

    def scale(self, s) -> "TrigPolyField":
        return TrigPolyField({k: c * s for k, c in self.modes.items()}, self.dim, real=self.real and np.isrealobj(s))

    def __add__(self, other: "TrigPolyField") -> "TrigPolyField":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        modes = dict(self.modes)
        for k, c in other.modes.items():
            modes[k] = modes[k] + c if k in modes else c
        return TrigPolyField(modes, self.dim, real=self.real and other.real)

    @property
    def coefficients_constant(self) -> bool:
        return all(c.is_constant for c in self.modes.values())

    # -- evaluation ---------------------------------------------------------
    def _prep(self, theta, I):
        th = np.asarray(theta, dtype=float)
        ac = np.asarray(I, dtype=float)
        if th.ndim == 1:
            th = th[None, :]
        if ac.ndim == 1:
            ac = ac[None, :]
        if th.shape[-1] != self.dim or ac.shape[-1] != self.dim:
            raise ValueError(f"field has dimension {self.dim}; got theta {th.shape}, I {ac.shape}")
        th, ac = np.broadcast_arrays(th, ac)
        return th, ac

    def eval_complex(self, theta, I) -> np.ndarray:
        th, ac = self._prep(theta, I)
        out = np.zeros(th.shape[0], dtype=complex)
        for k, c in self.modes.items():
            out += c.value(ac) * np.exp(1j * (th @ np.asarray(k, dtype=float)))
        return out

    def eval(self, theta, I) -> np.ndarray:
        """Values at paired points; real fields return real arrays."""
        th, ac = self._prep(theta, I)
        if not self.real:
            return self.eval_complex(th, ac)
        out = np.zeros(th.shape[0])
        for k, c in self.representatives():
            v = c.value(ac)
            if all(x == 0 for x in k):
                out += np.real(v)
                continue
            ph = th @ np.asarray(k, dtype=float)
            out += 2.0 * (np.real(v) * np.cos(ph) - np.imag(v) * np.sin(ph))
        return out

    def grad_theta(self, theta, I) -> np.ndarray:
        th, ac = self._prep(theta, I)
        out = np.zeros(th.shape, dtype=complex)
        for k, c in self.modes.items():
            kv = np.asarray(k, dtype=float)
            if not kv.any():
                continue
            term = c.value(ac) * np.exp(1j * (th @ kv))
            out += 1j * term[:, None] * kv[None, :]
        return out.real if self.real else out

    def grad_I(self, theta, I) -> np.ndarray:
        th, ac = self._prep(theta, I)
        out = np.zeros(th.shape, dtype=complex)
        for k, c in self.modes.items():
            out += c.grad(ac) * np.exp(1j * (th @ np.asarray(k, dtype=float)))[:, None]
        return out.real if self.real else out

    def support_box(self):
        """Bounding box of the action support, or ``None`` when unbounded."""
        boxes = [c.support_box() for c in self.modes.values()]
        if not boxes or any(b is None for b in boxes):
            return None
        return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "modes": [{"k": list(k), "coefficient": str(c)} for k, c in self.modes.items()],
        }

    def __repr__(self) -> str:
        return f"TrigPolyField(dim={self.dim}, modes={len(self.modes)}, band_limit={self.band_limit})"


def eval_field(field: TrigPolyField, point: PhasePoint) -> float:
    """Evaluate a field at one phase point."""
    if point.dim != field.dim:
        raise ValueError(f"point dimension {point.dim} does not match field dimension {field.dim}")
    val = field.eval_complex(point.theta, point.action)[0]
    if field.real:
        scale = 1.0 + abs(val)
        if abs(val.imag) > REALITY_TOL * scale:
            raise ValueError(f"real field evaluated to complex value {val}")
        return float(val.real)
    return val


# ---------------------------------------------------------------------------


class IntegrablePart:
    """``h(I)`` with frequency map ``omega = grad h`` and its Jacobian."""

    def __init__(self, h, dim: int):
        self.h = h if isinstance(h, CoeffFn) else CoeffFn(h, dim)
        self.dim = int(dim)
        if self.h.parts()[1] is not None and not ex.is_zero(self.h.parts()[1]):
            raise ValueError("integrable part must be real")

    @property
    def frequency_exprs(self) -> list:
        return self.h.grad_exprs

    def value(self, I) -> np.ndarray:
        return np.real(self.h.value(I))

    def frequency(self, I) -> np.ndarray:
        return np.real(self.h.grad(I))

    def frequency_jacobian(self, I) -> np.ndarray:
        return np.real(self.h.hess(I))

    def plus(self, extra: CoeffFn) -> "IntegrablePart":
        return IntegrablePart(CoeffFn(ex.add(self.h.expr, ex.split_complex(extra.expr)[0]), self.dim), self.dim)


@dataclass
class HamiltonianSystem:
    integrable: IntegrablePart
    perturbation: TrigPolyField
    epsilon: float
    domain: ActionDomain
    name: str = "custom"

    def __post_init__(self):
        if self.integrable.dim != self.perturbation.dim or self.domain.dim != self.perturbation.dim:
            raise ValueError("integrable part, perturbation and domain must share the dimension")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if not self.perturbation.real:
            raise ValueError("perturbation must be a real field")

    @property
    def dim(self) -> int:
        return self.domain.dim

    def frequency(self, I, check: bool = True) -> np.ndarray:
        P = _as_points(I, self.dim)
        if check and not np.all(self.domain.contains(P)):
            raise ValueError("action point outside the system domain")
        return self.integrable.frequency(P)

    def energy(self, theta, I) -> np.ndarray:
        return self.integrable.value(I) + self.perturbation.eval(theta, I)

    def full_field(self) -> TrigPolyField:
        """``h + f`` as one field (``h`` sits in the zero mode)."""
        zero = TrigPolyField({(0,) * self.dim: self.integrable.h}, self.dim)
        return zero + self.perturbation


def frequency(system: HamiltonianSystem, I) -> np.ndarray:
    """``omega(I) = grad h(I)``; errors when ``I`` lies outside the domain."""
    out = system.frequency(I, check=True)
    return out[0] if np.ndim(I) == 1 else out


# ---------------------------------------------------------------------------


def theta_grid(dim: int, m: int) -> np.ndarray:
    """Uniform tensor grid on the torus, shape ``(m**dim, dim)``."""
    ax = TWO_PI * np.arange(m) / m
    mesh = np.meshgrid(*([ax] * dim), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def _pair_grid(thetas: np.ndarray, actions: np.ndarray):
    th = np.repeat(thetas, actions.shape[0], axis=0)
    ac = np.tile(actions, (thetas.shape[0], 1))
    return th, ac


def _lipschitz_parts(fld: TrigPolyField, actions: np.ndarray) -> tuple[float, float]:
    """Probe estimates of sup|grad_theta F| and sup|grad_I F| bounds."""
    lth = 0.0
    lI = 0.0
    for k, c in fld.modes.items():
        kn = float(np.linalg.norm(k))
        if kn > 0:
            lth += kn * float(np.max(np.abs(c.value(actions))))
        lI += float(np.max(np.linalg.norm(c.grad(actions), axis=-1)))
    return lth, lI


@dataclass
class SupEstimate:
    """Probe maximum plus a Lipschitz correction over the probe cell size."""

    probe_max: float
    correction: float
    bound: float
    probe_grid: dict


SUP_THETA_RES = {1: 256, 2: 64, 3: 16}
SUP_ACTION_RES = {1: 201, 2: 21, 3: 9}


def certified_sup(fld: TrigPolyField, domain: ActionDomain, *, theta_res: int | None = None, action_res: int | None = None, window=None, margin: float = 0.05) -> SupEstimate:
    """Upper estimate of ``sup |F|`` on ``T^n x domain``.

    ``bound = max((1 + margin) * probe_max, probe_max + L_theta*h_theta + L_I*h_I)``
    where ``h`` are half cell diagonals and ``L`` are derivative bounds from
    the mode coefficients.  When both ``L`` vanish the field is constant and
    ``bound = probe_max``.
    """
    n = fld.dim
    theta_res = SUP_THETA_RES.get(n, 8) if theta_res is None else theta_res
    action_res = SUP_ACTION_RES.get(n, 5) if action_res is None else action_res
    grid = build_grid(domain, action_res, "midpoint", window=window)
    actions = grid.nodes
    thetas = theta_grid(n, theta_res)
    probe_max = 0.0
    step = max(1, 2**18 // thetas.shape[0])
    for s in range(0, actions.shape[0], step):
        th, ac = _pair_grid(thetas, actions[s : s + step])
        probe_max = max(probe_max, float(np.max(np.abs(fld.eval(th, ac)))))
    lth, lI = _lipschitz_parts(fld, actions)
    h_theta = 0.5 * math.sqrt(n) * TWO_PI / theta_res
    # grid cells reach half a spacing past the outermost nodes
    h_I = grid.half_diagonal
    correction = lth * h_theta + lI * h_I
    # a field with vanishing derivative bounds is constant and the probe max is exact
    bound = probe_max if correction == 0 else max((1.0 + margin) * probe_max, probe_max + correction)
    return SupEstimate(
        probe_max=probe_max,
        correction=correction,
        bound=bound,
        probe_grid={"theta_res": theta_res, "action": grid.describe(), "margin": margin},
    )


class Observable:
    """Real observable ``G`` with a certified sup-norm estimate."""

    def __init__(self, fld: TrigPolyField, domain: ActionDomain, *, theta_res: int | None = None, action_res: int | None = None, name: str = "G"):
        if not fld.real:
            raise ValueError("observable must be a real field")
        self.field = fld
        self.domain = domain
        self.name = name
        self._sup_args = {"theta_res": theta_res, "action_res": action_res}
        self._sup = None

    @property
    def dim(self) -> int:
        return self.field.dim

    @property
    def sup(self) -> SupEstimate:
        if self._sup is None:
            self._sup = certified_sup(self.field, self.domain, **self._sup_args)
        return self._sup

    @property
    def sup_norm(self) -> float:
        return self.sup.bound

    def __call__(self, theta, I) -> np.ndarray:
        return self.field.eval(theta, I)


class EnsembleDensity:
    """Probability density ``f_0(theta, I)`` normalized on ``T^n x domain``.

    Normalization uses ``int f dtheta dI = (2 pi)^n int f_{0,0}(I) dI``; the
    action integral is taken with Gauss-Legendre on the support box.
    """

    def __init__(
        self,
        fld: TrigPolyField,
        domain: ActionDomain,
        *,
        allow_boundary_mass: bool = False,
        quad_res: int = 96,
        probe_theta_res: int | None = None,
        probe_action_res: int | None = None,
        name: str = "f0",
    ):
        if not fld.real:
            raise ValueError("density must be a real field")
        self.domain = domain
        self.name = name
        self.allow_boundary_mass = allow_boundary_mass
        n = fld.dim
        self.support = self._support_window(fld, domain)
        rule_grid = build_grid(domain, quad_res, "gauss-legendre", window=self.support)
        z0 = np.real(fld.zero_mode().value(rule_grid.nodes))
        raw_mass = TWO_PI**n * rule_grid.integrate(z0)
        if not raw_mass > 0:
            raise ValueError("density has nonpositive total mass")
        self.raw_mass = raw_mass
        self.field = fld.scale(1.0 / raw_mass)
        self.quad_grid = rule_grid
        if probe_theta_res is None:
            probe_theta_res = {1: 64, 2: 16}.get(n, 8)
        if probe_action_res is None:
            probe_action_res = {1: 201, 2: 41}.get(n, 15)
        self._probe = (probe_theta_res, probe_action_res)
        self._check_positive_and_support()
        self._sup = None

    @staticmethod
    def _support_window(fld, domain):
        box = fld.support_box()
        lo, hi = domain.bbox()
        if box is None:
            return None
        wlo, whi = np.maximum(lo, box[0]), np.minimum(hi, box[1])
        if np.any(wlo >= whi):
            raise ValueError("density support does not meet the domain")
        return (wlo, whi)

    @property
    def dim(self) -> int:
        return self.field.dim

    def __call__(self, theta, I) -> np.ndarray:
        return self.field.eval(theta, I)

    def marginal(self, I) -> np.ndarray:
        """Action marginal ``rho_0(I) = (2 pi)^n f_{0,0}(I)``."""
        return TWO_PI**self.dim * np.real(self.field.zero_mode().value(I))

    def _check_positive_and_support(self):
        n = self.dim
        tres, ares = self._probe
        grid = build_grid(self.domain, ares, "midpoint", window=self.support)
        th, ac = _pair_grid(theta_grid(n, tres), grid.nodes)
        vals = self.field.eval(th, ac)
        if np.min(vals) < -1e-12:
            raise ValueError(f"density is negative at probe points (min {np.min(vals):.3e})")
        # boundary layer of the action domain
        layer = 0.02 * self.domain.diameter
        pts = _boundary_probes(self.domain, 64 if n <= 2 else 12)
        th, ac = _pair_grid(theta_grid(n, tres), pts)
        bvals = np.abs(self.field.eval(th, ac))
        inward = _boundary_probes(self.domain, 64 if n <= 2 else 12, inset=layer)
        th2, ac2 = _pair_grid(theta_grid(n, tres), inward)
        bmax = max(float(np.max(bvals)), float(np.max(np.abs(self.field.eval(th2, ac2)))))
        self.boundary_max = bmax
        if bmax >= 1e-10 and not self.allow_boundary_mass:
            raise ValueError(
                f"density does not vanish near the domain boundary (max {bmax:.3e}); "
                "compactly supported densities are required unless allow_boundary_mass is set"
            )

    @property
    def sup(self) -> SupEstimate:
        if self._sup is None:
            self._sup = certified_sup(self.field, self.domain, theta_res=self._probe[0], action_res=self._probe[1], window=self.support)
        return self._sup


def _boundary_probes(domain: ActionDomain, m: int, inset: float = 0.0) -> np.ndarray:
    n = domain.dim
    if domain.kind == "ball":
        c = np.asarray(domain.center)
        r = domain.radius - inset
        if n == 1:
            dirs = np.array([[-1.0], [1.0]])
        elif n == 2:
            a = TWO_PI * np.arange(m) / m
            dirs = np.stack([np.cos(a), np.sin(a)], axis=-1)
        else:
            rng = np.random.Generator(np.random.PCG64(12345))
            d = rng.normal(size=(m * m, n))
            dirs = d / np.linalg.norm(d, axis=1, keepdims=True)
        return c + r * dirs
    lo, hi = domain.bbox()
    lo = lo + inset
    hi = hi - inset
    pts = []
    axes = [np.linspace(lo[j], hi[j], m) for j in range(n)]
    for j in range(n):
        for side in (lo[j], hi[j]):
            others = [axes[i] for i in range(n) if i != j]
            if others:
                mesh = np.stack(np.meshgrid(*others, indexing="ij"), axis=-1).reshape(-1, n - 1)
            else:
                mesh = np.zeros((1, 0))
            face = np.insert(mesh, j, side, axis=1)
            pts.append(face)
    return np.concatenate(pts, axis=0)


# ---------------------------------------------------------------------------
# built-in catalog


def _v(j):
    return ex.var(j)


def _twist2(epsilon):
    n = 2
    h = CoeffFn((_v(0) ** 2 + _v(1) ** 2) * 0.5, n)
    f = TrigPolyField.from_real_terms([("cos", (1, 0), epsilon), ("cos", (1, -1), epsilon)], n)
    domain = ActionDomain.ball((0.0, 0.0), 2.0)
    system = HamiltonianSystem(IntegrablePart(h, n), f, epsilon, domain, "twist2")
    prof = ex.bump((1.386, 0.574), 0.18)
    dens = TrigPolyField.from_real_terms(
        [("const", None, prof), ("cos", (1, 0), prof * 0.5), ("sin", (1, 1), prof * 0.3)], n
    )
    obs = TrigPolyField.from_real_terms([("cos", (1, 0), 1.0), ("sin", (1, 1), 0.5)], n)
    return system, dens, obs


def _pendulum1(epsilon):
    n = 1
    h = CoeffFn(_v(0) ** 2 * 0.5, n)
    f = TrigPolyField.from_real_terms([("cos", (1,), epsilon)], n)
    domain = ActionDomain.box((-2.0,), (2.0,))
    system = HamiltonianSystem(IntegrablePart(h, n), f, epsilon, domain, "pendulum1")
    prof = ex.bump((1.0,), 0.4)
    dens = TrigPolyField.from_real_terms([("const", None, prof), ("cos", (1,), prof * 0.5)], n)
    obs = TrigPolyField.from_real_terms([("cos", (1,), 1.0)], n)
    return system, dens, obs


def _steep3(epsilon):
    n = 3
    I1, I2, I3 = _v(0), _v(1), _v(2)
    h = CoeffFn((I1**2 + I2**2 + I3**2) * 0.5 + (I1 * I2 + I2 * I3) * 0.3 + I1**3 * (0.1 / 3.0), n)
    f = TrigPolyField.from_real_terms(
        [("cos", (1, 0, 0), epsilon), ("cos", (0, 1, -1), epsilon), ("cos", (1, 1, 1), 0.5 * epsilon)], n
    )
    domain = ActionDomain.ball((0.0, 0.0, 0.0), 1.5)
    system = HamiltonianSystem(IntegrablePart(h, n), f, epsilon, domain, "steep3")
    prof = ex.bump((0.6, 0.4, 0.3), 0.3)
    dens = TrigPolyField.from_real_terms([("const", None, prof), ("cos", (1, 0, 0), prof * 0.4)], n)
    obs = TrigPolyField.from_real_terms([("cos", (1, 0, 0), 1.0), ("cos", (0, 1, -1), 1.0)], n)
    return system, dens, obs


BUILTINS = {"twist2": _twist2, "pendulum1": _pendulum1, "steep3": _steep3}


def builtin_system(name: str, epsilon: float) -> HamiltonianSystem:
    """One of the catalog systems ``twist2``, ``pendulum1``, ``steep3``."""
    if name not in BUILTINS:
        raise KeyError(f"unknown builtin system {name!r}; available: {sorted(BUILTINS)}")
    return BUILTINS[name](float(epsilon))[0]


@dataclass
class Case:
    system: HamiltonianSystem
    density: EnsembleDensity
    observable: Observable
    meta: dict = field(default_factory=dict)


def builtin_case(name: str, epsilon: float) -> Case:
    """Catalog system together with its default density and observable."""
    if name not in BUILTINS:
        raise KeyError(f"unknown builtin system {name!r}; available: {sorted(BUILTINS)}")
    system, dens, obs = BUILTINS[name](float(epsilon))
    return Case(system, EnsembleDensity(dens, system.domain), Observable(obs, system.domain), {"builtin": name})


def sample_phase_points(domain: ActionDomain, count: int, rng: np.random.Generator, margin: float = 0.0):
    """Uniform random probes on ``T^n x domain`` (rejection from the bounding box)."""
    n = domain.dim
    lo, hi = domain.bbox()
    out = []
    total = 0
    while total < count:
        cand = lo + (hi - lo) * rng.random((max(2 * count, 16), n))
        cand = cand[domain.contains(cand, margin)]
        out.append(cand)
        total += cand.shape[0]
    I = np.concatenate(out)[:count]
    th = wrap_angles(TWO_PI * rng.random((count, n)))
    return th, I
