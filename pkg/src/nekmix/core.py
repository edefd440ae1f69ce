"""Phase-space primitives: torus arithmetic, action domains, quadrature grids, RNG."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi
MAX_WAVEVECTORS = 10_000_000

__all__ = [
    "TWO_PI",
    "PhasePoint",
    "ActionDomain",
    "ActionGrid",
    "SeededRng",
    "wrap_angles",
    "build_grid",
    "restrict_grid",
    "distance_to_resonance",
    "enumerate_wavevectors",
    "count_wavevectors",
    "torus_distance",
    "stable_sum",
    "stable_dot",
]


def wrap_angles(raw) -> np.ndarray:
    """Reduce angles to ``[0, 2*pi)`` componentwise.

    ``np.mod`` may round tiny negative inputs up to exactly ``2*pi``; those are
    folded back to 0 so the result always lies in the half-open interval.
    """
    a = np.mod(np.asarray(raw, dtype=float), TWO_PI)
    return np.where(a >= TWO_PI, 0.0, a)


def stable_sum(values) -> float | complex:
    """Order-independent (correctly rounded) sum, real or complex."""
    v = np.asarray(values).ravel()
    if np.iscomplexobj(v):
        return complex(math.fsum(v.real), math.fsum(v.imag))
    return math.fsum(v.astype(float, copy=False))


def stable_dot(weights, values) -> float | complex:
    """``sum(weights * values)`` with exactly rounded accumulation."""
    return stable_sum(np.asarray(weights) * np.asarray(values))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhasePoint:
    """A point ``(theta, I)`` of ``T^n x R^n``; angles are stored wrapped."""

    theta: np.ndarray
    action: np.ndarray

    def __post_init__(self):
        th = wrap_angles(np.atleast_1d(np.asarray(self.theta, dtype=float)))
        ac = np.atleast_1d(np.asarray(self.action, dtype=float)).copy()
        if th.ndim != 1 or ac.ndim != 1 or th.shape != ac.shape or th.size < 1:
            raise ValueError(f"theta and action must be equal-length vectors, got {th.shape} and {ac.shape}")
        th.setflags(write=False)
        ac.setflags(write=False)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "action", ac)

    @property
    def dim(self) -> int:
        return self.theta.size

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.theta, self.action])


def torus_distance(theta_a, action_a, theta_b, action_b) -> np.ndarray:
    """Euclidean distance with each angle difference taken modulo ``2*pi``.

    Inputs broadcast; the last axis is the coordinate axis.
    """
    dth = np.mod(np.asarray(theta_a) - np.asarray(theta_b) + np.pi, TWO_PI) - np.pi
    dI = np.asarray(action_a) - np.asarray(action_b)
    return np.sqrt(np.sum(dth**2, axis=-1) + np.sum(dI**2, axis=-1))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionDomain:
    """Ball ``B(center, radius)`` or axis-aligned box ``[lower, upper]``."""

    kind: str
    center: tuple = ()
    radius: float = 0.0
    lower: tuple = ()
    upper: tuple = ()

    def __post_init__(self):
        if self.kind == "ball":
            if not self.radius > 0:
                raise ValueError(f"ball radius must be positive, got {self.radius}")
            if len(self.center) < 1:
                raise ValueError("ball center must have at least one coordinate")
        elif self.kind == "box":
            lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
            if lo.size < 1 or lo.shape != hi.shape:
                raise ValueError("box bounds must be equal-length vectors")
            if not np.all(lo < hi):
                raise ValueError(f"box needs lower < upper componentwise, got {self.lower} / {self.upper}")
        else:
            raise ValueError(f"unknown domain kind {self.kind!r}")

    @classmethod
    def ball(cls, center, radius: float) -> "ActionDomain":
        return cls("ball", center=tuple(float(c) for c in np.atleast_1d(center)), radius=float(radius))

    @classmethod
    def box(cls, lower, upper) -> "ActionDomain":
        return cls(
            "box",
            lower=tuple(float(c) for c in np.atleast_1d(lower)),
            upper=tuple(float(c) for c in np.atleast_1d(upper)),
        )

    @property
    def dim(self) -> int:
        return len(self.center) if self.kind == "ball" else len(self.lower)

    @property
    def volume(self) -> float:
        if self.kind == "ball":
            n = self.dim
            return math.pi ** (n / 2) / math.gamma(n / 2 + 1) * self.radius**n
        return float(np.prod(np.subtract(self.upper, self.lower)))

    @property
    def diameter(self) -> float:
        if self.kind == "ball":
            return 2.0 * self.radius
        return float(np.linalg.norm(np.subtract(self.upper, self.lower)))

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "ball":
            c = np.asarray(self.center)
            return c - self.radius, c + self.radius
        return np.asarray(self.lower, float), np.asarray(self.upper, float)

    def boundary_distance(self, points) -> np.ndarray:
        """Signed distance to the boundary, positive inside."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "ball":
            return self.radius - np.linalg.norm(p - np.asarray(self.center), axis=1)
        lo, hi = self.bbox()
        return np.min(np.minimum(p - lo, hi - p), axis=1)

    def contains(self, points, margin: float = 0.0) -> np.ndarray:
        return self.boundary_distance(points) >= margin

    def to_dict(self) -> dict:
        if self.kind == "ball":
            return {"kind": "ball", "center": list(self.center), "radius": self.radius}
        return {"kind": "box", "lower": list(self.lower), "upper": list(self.upper)}


@dataclass(frozen=True)
class ActionGrid:
    """Tensor-product quadrature restricted to a domain.

    ``nodes``/``weights`` hold only nodes inside the parent (and inside the
    optional ``window`` box).  The full tensor layout is kept in ``axes`` and
    ``mask`` so that nodal values can be differenced along grid lines.
    """

    parent: ActionDomain
    rule: str
    resolution: tuple
    axes: tuple
    axis_weights: tuple
    mask: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    window: tuple | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.parent.dim

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    @property
    def spacing(self) -> np.ndarray:
        """Largest gap between consecutive nodes along each axis."""
        return np.array([np.max(np.diff(a)) if a.size > 1 else 0.0 for a in self.axes])

    @property
    def half_diagonal(self) -> float:
        """Distance from any point of a grid cell to its nearest node, upper bound."""
        return 0.5 * float(np.linalg.norm(self.spacing))

    def tensor_nodes(self) -> np.ndarray:
        """All tensor nodes (inside or not), shape ``shape + (n,)``."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def integrate(self, values) -> float | complex:
        return stable_dot(self.weights, values)

    def to_tensor(self, values, fill=0.0) -> np.ndarray:
        values = np.asarray(values)
        out = np.full(self.shape + values.shape[1:], fill, dtype=values.dtype)
        out[self.mask] = values
        return out

    def gradient_tensor(self, tensor_values) -> np.ndarray:
        """Central-difference gradient of values given on *all* tensor nodes,
        returned at the inside nodes, shape ``(size, n)``."""
        tv = np.asarray(tensor_values)
        if tv.shape != self.shape:
            raise ValueError(f"expected tensor of shape {self.shape}, got {tv.shape}")
        if self.dim == 1:
            grads = [np.gradient(tv, self.axes[0], edge_order=2)]
        else:
            grads = np.gradient(tv, *self.axes, edge_order=2)
        return np.stack([g[self.mask] for g in grads], axis=-1)

    def describe(self) -> dict:
        return {
            "domain": self.parent.to_dict(),
            "rule": self.rule,
            "resolution": list(self.resolution),
            "window": None if self.window is None else [list(map(float, w)) for w in self.window],
            "nodes": int(self.size),
        }


def _axis_rule(lo: float, hi: float, m: int, rule: str) -> tuple[np.ndarray, np.ndarray]:
    if rule == "midpoint":
        h = (hi - lo) / m
        return lo + h * (np.arange(m) + 0.5), np.full(m, h)
    if rule == "gauss-legendre":
        x, w = np.polynomial.legendre.leggauss(m)
        return 0.5 * (hi - lo) * x + 0.5 * (hi + lo), 0.5 * (hi - lo) * w
    raise ValueError(f"unknown quadrature rule {rule!r}")


def build_grid(domain: ActionDomain, resolution, rule: str = "midpoint", window=None) -> ActionGrid:
    """Tensor quadrature on ``domain`` (optionally clipped to a ``window`` box).

    Balls use box embedding with an indicator.  For an unclipped ball the
    weights are rescaled so that they sum to the exact ball volume; the
    rescaling factor is recorded in ``meta``.
    """
    if not isinstance(domain, ActionDomain):
        raise TypeError("domain must be an ActionDomain")
    n = domain.dim
    res = np.broadcast_to(np.atleast_1d(np.asarray(resolution, dtype=int)), (n,))
    if np.any(res < 2):
        raise ValueError(f"resolution must be >= 2 per axis, got {tuple(res)}")
    lo, hi = domain.bbox()
    if window is not None:
        wlo = np.maximum(lo, np.asarray(window[0], float))
        whi = np.minimum(hi, np.asarray(window[1], float))
        if np.any(wlo >= whi):
            raise ValueError("grid window does not intersect the domain")
        lo, hi = wlo, whi
        window = (tuple(lo), tuple(hi))
    axes, aw = zip(*(_axis_rule(lo[j], hi[j], int(res[j]), rule) for j in range(n)))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    wmesh = np.ones(mesh.shape[:-1])
    for j in range(n):
        shape = [1] * n
        shape[j] = -1
        wmesh = wmesh * aw[j].reshape(shape)
    mask = domain.contains(mesh.reshape(-1, n)).reshape(mesh.shape[:-1])
    nodes = mesh[mask]
    weights = wmesh[mask]
    meta = {"rescale": 1.0}
    if domain.kind == "ball":
        corners_inside = window is not None and _box_inside_ball(lo, hi, domain)
        if window is None:
            raw = math.fsum(weights)
            if raw <= 0:
                raise ValueError("grid too coarse: no nodes inside the ball")
            scale = domain.volume / raw
            weights = weights * scale
            meta["rescale"] = scale
        elif not corners_inside:
            meta["rescale"] = None
    nodes.setflags(write=False)
    weights.setflags(write=False)
    mask.setflags(write=False)
    return ActionGrid(
        parent=domain,
        rule=rule,
        resolution=tuple(int(r) for r in res),
        axes=tuple(axes),
        axis_weights=tuple(aw),
        mask=mask,
        nodes=nodes,
        weights=weights,
        window=window,
        meta=meta,
    )


def restrict_grid(grid: ActionGrid, keep, label: str = "restricted") -> ActionGrid:
    """Sub-grid keeping the inside nodes flagged by ``keep`` (tensor layout unchanged)."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (grid.size,):
        raise ValueError("keep must flag every grid node")
    mask = grid.mask.copy()
    mask[grid.mask] = keep
    nodes = grid.nodes[keep]
    weights = grid.weights[keep]
    for a in (mask, nodes, weights):
        a.setflags(write=False)
    meta = dict(grid.meta)
    meta["restriction"] = label
    return ActionGrid(grid.parent, grid.rule, grid.resolution, grid.axes, grid.axis_weights, mask, nodes, weights, grid.window, meta)


def _box_inside_ball(lo, hi, domain: ActionDomain) -> bool:
    c = np.asarray(domain.center)
    far = np.maximum(np.abs(lo - c), np.abs(hi - c))
    return bool(np.linalg.norm(far) <= domain.radius)


# ---------------------------------------------------------------------------


def distance_to_resonance(omega, k) -> float:
    """Euclidean distance from ``omega`` to the hyperplane ``k . omega = 0``."""
    k = np.asarray(k)
    if not np.issubdtype(k.dtype, np.integer) and not np.all(np.asarray(k) == np.round(k)):
        raise ValueError("k must be an integer vector")
    kf = np.asarray(k, dtype=float)
    norm = np.linalg.norm(kf)
    if norm == 0:
        raise ValueError("k = 0 defines no resonance hyperplane")
    return float(abs(np.dot(kf, np.asarray(omega, dtype=float))) / norm)


def count_wavevectors(n: int, K: int) -> int:
    """Number of nonzero integer vectors with ``||k||_1 <= K`` (both signs)."""
    total = sum(2**j * math.comb(n, j) * math.comb(K, j) for j in range(0, min(n, K) + 1))
    return total - 1


def _l1_ball(n: int, K: int) -> np.ndarray:
    if n == 1:
        return np.arange(-K, K + 1, dtype=np.int64)[:, None]
    sub = _l1_ball(n - 1, K)
    rem = K - np.abs(sub).sum(axis=1)
    parts = []
    for c in range(-K, K + 1):
        sel = sub[rem >= abs(c)]
        parts.append(np.column_stack([sel, np.full(sel.shape[0], c, dtype=np.int64)]))
    return np.concatenate(parts, axis=0)


def enumerate_wavevectors(n: int, K: int, half: bool = True) -> np.ndarray:
    """Integer vectors with ``0 < ||k||_1 <= K``, sorted by order then lexicographically.

    With ``half=True`` only the representative whose first nonzero component
    is positive is kept from each ``+-k`` pair.
    """
    if K < 1:
        return np.zeros((0, n), dtype=np.int64)
    count = count_wavevectors(n, K)
    if count > MAX_WAVEVECTORS:
        raise ValueError(f"{count} wavevectors for n={n}, K={K} exceed the enumeration guard {MAX_WAVEVECTORS}")
    ks = _l1_ball(n, K)
    ks = ks[np.any(ks != 0, axis=1)]
    if half:
        first = ks[np.arange(ks.shape[0]), np.argmax(ks != 0, axis=1)]
        ks = ks[first > 0]
    order = np.lexsort(tuple(-ks[:, j] for j in reversed(range(n))) + (np.abs(ks).sum(axis=1),))
    return ks[order]


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeededRng:
    """Deterministic random stream identified by ``(seed, stream)``."""

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")
        if int(self.stream) < 0:
            raise ValueError("stream id must be nonnegative")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(self.seed), int(self.stream)])))

    def child(self, stream: int) -> "SeededRng":
        return SeededRng(self.seed, int(self.stream) * 1_000_003 + int(stream) + 1)
