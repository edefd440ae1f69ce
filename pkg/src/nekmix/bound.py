"""Five-term deviation bound, exponential time window and verdicts."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .estimator import DeviationSeries
from .mixing import MixingReport

__all__ = [
    "CoordinateError",
    "WindowSpec",
    "BoundReport",
    "exp_window",
    "window_from_K",
    "assemble",
    "verdict_table",
    "fingerprint",
    "VERDICTS",
]

VERDICTS = ("holds", "holds-within-3sigma", "violated", "unresolved")
PLOT_COLUMNS = ["t", "empirical", "stderr", "term_res", "term_mix", "term_tail", "term_nf", "term_eq", "total"]


class CoordinateError(ValueError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    """Admissible times ``|t| <= t_max`` with ``t_max = exp(sigma X)``.

    ``X`` is ``eps^-a`` (power form) or ``K`` (order form); ``t_max`` is
    clamped to ``ceiling``.
    """

    a: float | None
    c: float
    sigma: float
    t_max: float
    exponent: float
    ceiling: float
    form: str

    def contains(self, t) -> np.ndarray:
        return np.abs(np.asarray(t, dtype=float)) <= self.t_max

    def envelope(self, eps: float, C: float = 1.0) -> float:
        """``C eps exp(-(c - 2 sigma) X)``: size of the normal-form term across the window."""
        return C * eps * math.exp(-(self.c - 2.0 * self.sigma) * self.exponent)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _check_window(c: float, sigma: float):
    if not c > 0:
        raise ValueError("c must be positive")
    if not 0 < sigma < c / 2:
        raise ValueError(f"need 0 < sigma < c/2, got sigma={sigma}, c={c}")


def exp_window(eps: float, a: float, c: float, sigma: float, ceiling: float = 1e12) -> WindowSpec:
    """Window ``|t| <= exp(sigma eps^-a)``."""
    _check_window(c, sigma)
    if not a > 0:
        raise ValueError("a must be positive")
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = eps ** (-a)
    arg = sigma * x
    t_max = ceiling if arg >= math.log(ceiling) else math.exp(arg)
    return WindowSpec(a, c, sigma, t_max, x, ceiling, "eps^-a")


def window_from_K(K: int, c: float, sigma: float, ceiling: float = 1e12) -> WindowSpec:
    """Window ``|t| <= exp(sigma K)``."""
    _check_window(c, sigma)
    arg = sigma * K
    t_max = ceiling if arg >= math.log(ceiling) else math.exp(arg)
    return WindowSpec(None, c, sigma, t_max, float(K), ceiling, "K")


def fingerprint(inputs: dict) -> str:
    """sha256 of the canonical JSON of ``inputs``."""
    blob = json.dumps(inputs, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not serializable: {type(x)}")


@dataclass
class BoundReport:
    times: np.ndarray
    empirical: np.ndarray
    stderr: np.ndarray
    term_res: float
    term_mix: np.ndarray
    term_tail: float
    term_nf: np.ndarray
    term_eq: float
    total: np.ndarray
    verdicts: list
    discretization: np.ndarray | None
    window: WindowSpec | None
    in_window: np.ndarray
    inputs: dict
    details: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.inputs)

    @property
    def violated(self) -> bool:
        return "violated" in self.verdicts

    def rows(self) -> list:
        out = []
        for i, t in enumerate(self.times):
            out.append(
                {
                    "t": float(t),
                    "empirical": float(self.empirical[i]),
                    "stderr": float(self.stderr[i]),
                    "term_res": self.term_res,
                    "term_mix": float(self.term_mix[i]),
                    "term_tail": self.term_tail,
                    "term_nf": float(self.term_nf[i]),
                    "term_eq": self.term_eq,
                    "total": float(self.total[i]),
                    "discretization": None if self.discretization is None else float(self.discretization[i]),
                    "verdict": self.verdicts[i],
                    "in_window": bool(self.in_window[i]),
                }
            )
        return out

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "inputs": self.inputs,
            "window": None if self.window is None else self.window.to_dict(),
            "details": self.details,
            "rows": self.rows(),
            "violated": self.violated,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable)

    def plot_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PLOT_COLUMNS)
        for r in self.rows():
            w.writerow([f"{r[c]:.17g}" for c in PLOT_COLUMNS])
        return buf.getvalue()


def _verdict(emp: float, se: float, total: float, disc: float | None) -> str:
    if emp <= total:
        return "holds"
    if emp - 3.0 * se <= total:
        return "holds-within-3sigma"
    if disc is None:
        return "unresolved"
    return "violated" if disc <= se else "unresolved"


def assemble(
    series: DeviationSeries,
    *,
    G_sup: float,
    P_res: float,
    mixing: MixingReport | None,
    tail: float,
    epsilon: float,
    r_inf: float = 0.0,
    Gtilde_C1: float = 0.0,
    C_err: float = 0.0,
    E_eq: float = 0.0,
    window: WindowSpec | None = None,
    discretization=None,
    C_G_override: float | None = None,
    assumption: dict | None = None,
    inputs: dict | None = None,
    details: dict | None = None,
) -> BoundReport:
    """Per-time comparison of the empirical deviation with the five-term bound.

    Every time gets a verdict; ``in_window`` flags the times inside the
    exponential window where the normal-form term stays exponentially small.

    With ``epsilon > 0`` the mixing constant and tail must come from
    normal-form coordinates; anything else raises :class:`CoordinateError`.
    ``assumption`` (keys ``C_nf``, ``c_nf``, ``K``) replaces the measured
    remainder by ``C_nf eps exp(-c_nf K)``.
    """
    if epsilon > 0 and mixing is not None and mixing.coordinates != "normal-form":
        raise CoordinateError(f"mixing constant computed in {mixing.coordinates!r} coordinates; eps > 0 needs normal-form coordinates")
    for name, v in (("G_sup", G_sup), ("P_res", P_res), ("tail", tail), ("r_inf", r_inf), ("Gtilde_C1", Gtilde_C1), ("C_err", C_err), ("E_eq", E_eq)):
        if not v >= 0:
            raise ValueError(f"{name} must be nonnegative, got {v}")
    times = np.asarray(series.times, dtype=float)
    if np.any(times == 0):
        raise ValueError("the bound needs t != 0")
    C_G = mixing.C_direct if mixing is not None else 0.0
    if C_G_override is not None:
        C_G = float(C_G_override)
    r_used = r_inf
    if assumption is not None:
        r_used = assumption["C_nf"] * epsilon * math.exp(-assumption["c_nf"] * assumption["K"])
    term_res = 2.0 * G_sup * P_res
    term_mix = C_G / np.abs(times)
    term_nf = C_err * Gtilde_C1 * (1.0 + np.abs(times) + times**2) * r_used
    total = term_res + term_mix + tail + term_nf + E_eq
    inside = np.ones(times.size, dtype=bool) if window is None else window.contains(times)
    disc = None if discretization is None else np.asarray(discretization, dtype=float)
    verdicts = [
        _verdict(float(series.deviation[i]), float(series.stderr[i]), float(total[i]), None if disc is None else float(disc[i]))
        for i in range(times.size)
    ]
    inputs = dict(inputs or {})
    inputs.update(
        {
            "epsilon": epsilon,
            "C_G": C_G,
            "C_G_source": "override" if C_G_override is not None else "direct",
            "r_inf": r_used,
            "r_source": "assumption" if assumption is not None else "measured",
            "C_err": C_err,
            "estimator": series.estimator,
            "seed": series.seed,
            "samples": series.samples,
        }
    )
    det = dict(details or {})
    if mixing is not None:
        det.setdefault("C_G_lemma", mixing.C_lemma)
        det.setdefault("coordinates", mixing.coordinates)
    det.setdefault("G_sup", G_sup)
    det.setdefault("P_res", P_res)
    det.setdefault("Gtilde_C1", Gtilde_C1)
    det.setdefault("equilibrium", series.equilibrium)
    return BoundReport(times, np.asarray(series.deviation), np.asarray(series.stderr), term_res, term_mix, tail, term_nf, E_eq, total, verdicts, disc, window, inside, inputs, det)


def verdict_table(report: BoundReport) -> str:
    """CSV with one row per time: empirical, stderr, the five terms, total and verdict."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_COLUMNS + ["in_window", "verdict"])
    for r in report.rows():
        w.writerow([f"{r[c]:.17g}" for c in PLOT_COLUMNS] + [int(r["in_window"]), r["verdict"]])
    return buf.getvalue()
