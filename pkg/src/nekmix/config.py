"""Experiment configuration: TOML file, pydantic schema, line-anchored errors.

Coefficient functions are written in the expression grammar of
:mod:`nekmix.expr` (``I1..In``, ``+ - * / ^``, ``exp sin cos log sqrt``,
``bump([c1, c2], w)``, ``gauss([c1, c2], w)``).  Fields are lists of terms::

    terms = [
        { kind = "cos", k = [1, 0], coeff = "1" },
        { kind = "sin", k = [1, 1], coeff = "0.5" },
    ]
"""

from __future__ import annotations

import math
import re
import sys
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import expr as ex
from .core import ActionDomain
from .model import BUILTINS, Case, CoeffFn, EnsembleDensity, HamiltonianSystem, IntegrablePart, Observable, TrigPolyField

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config", "build_case", "time_grid"]


class ConfigError(ValueError):
    """Configuration problem with an optional ``line`` (1-based) in the source file."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = f"{path or '<config>'}" + (f":{line}" if line else "")
        super().__init__(f"{where}: {message}")


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Term(_Model):
    kind: Literal["cos", "sin", "const"]
    k: list[int] | None = None
    coeff: str | float = 1.0


class DomainCfg(_Model):
    kind: Literal["ball", "box"]
    center: list[float] | None = None
    radius: float | None = None
    lower: list[float] | None = None
    upper: list[float] | None = None

    @model_validator(mode="after")
    def _shape(self):
        if self.kind == "ball" and (self.center is None or self.radius is None):
            raise ValueError("ball domain needs center and radius")
        if self.kind == "box" and (self.lower is None or self.upper is None):
            raise ValueError("box domain needs lower and upper")
        return self


class SystemCfg(_Model):
    builtin: str | None = None
    dim: int | None = Field(default=None, ge=1, le=6)
    h: str | None = None
    perturbation: list[Term] | None = None
    domain: DomainCfg | None = None
    name: str | None = None

    @model_validator(mode="after")
    def _either(self):
        if self.builtin is not None:
            if self.builtin not in BUILTINS:
                raise ValueError(f"unknown builtin {self.builtin!r}; available: {sorted(BUILTINS)}")
            if any(v is not None for v in (self.h, self.perturbation, self.domain)):
                raise ValueError("give either builtin or an inline system, not both")
        elif None in (self.dim, self.h, self.perturbation, self.domain):
            raise ValueError("inline system needs dim, h, perturbation and domain")
        return self


class FieldCfg(_Model):
    terms: list[Term]
    allow_boundary_mass: bool = False


class ScheduleCfg(_Model):
    kind: Literal["explicit", "zz", "power"] = "explicit"
    K: int | None = Field(default=None, ge=1)
    alpha: float | None = Field(default=None, gt=0)
    beta: float | None = None
    s0: float | None = None
    a: float | None = None
    prefactor: float = 1.0
    distance: Literal["euclidean", "raw"] = "euclidean"

    @model_validator(mode="after")
    def _complete(self):
        need = {"explicit": ("K", "alpha"), "zz": ("beta", "s0"), "power": ("a", "alpha")}[self.kind]
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"{self.kind} schedule needs {', '.join(missing)}")
        return self


class TimesCfg(_Model):
    values: list[float] | None = None
    start: float | None = None
    stop: float | None = None
    count: int | None = Field(default=None, ge=2)
    spacing: Literal["log", "linear"] = "log"

    @model_validator(mode="after")
    def _either(self):
        if self.values is None and None in (self.start, self.stop, self.count):
            raise ValueError("times need values or start, stop and count")
        vals = self.values if self.values is not None else [self.start, self.stop]
        if any(not v > 0 for v in vals):
            raise ValueError("times must be positive")
        return self


class EstimatorCfg(_Model):
    kind: Literal["monte-carlo", "quadrature"] = "monte-carlo"
    samples: int = Field(default=10_000, ge=2)
    seed: int = Field(default=0, ge=0, lt=2**64)
    dt: float | None = Field(default=None, gt=0)
    scheme: Literal["strang", "midpoint"] = "strang"
    richardson_samples: int = Field(default=2000, ge=2)
    quadrature_resolution: list[int] | int | None = None


class GridsCfg(_Model):
    mass_resolution: int | None = Field(default=None, ge=2)
    mixing_resolution: int = Field(default=256, ge=4)
    nf_resolution: int = Field(default=64, ge=4)
    theta_fft: int = Field(default=12, ge=4)
    cutoff_width: float | None = Field(default=None, gt=0)

    @field_validator("theta_fft")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("theta_fft must be even")
        return v


class NormalFormCfg(_Model):
    steps: int = Field(default=1, ge=1, le=3)
    dt_nf: float = Field(default=0.1, gt=0, le=1)
    probes: int = Field(default=200, ge=1)
    C_err: float | None = Field(default=None, ge=0)


class WindowCfg(_Model):
    form: Literal["K", "eps^-a"] = "K"
    a: float | None = Field(default=None, gt=0)
    c: float = Field(default=1.0, gt=0)
    sigma: float = Field(default=0.1, gt=0)
    ceiling: float = Field(default=1e12, gt=1)


class ModeCfg(_Model):
    assumption: bool = False
    C_nf: float | None = Field(default=None, ge=0)
    c_nf: float | None = Field(default=None, gt=0)
    fault_C_G: float | None = Field(default=None, ge=0)
    dt_check: bool = False

    @model_validator(mode="after")
    def _assumption(self):
        if self.assumption and (self.C_nf is None or self.c_nf is None):
            raise ValueError("assumption mode needs C_nf and c_nf")
        return self


class OutputCfg(_Model):
    dir: str = "runs"


class ExperimentConfig(_Model):
    name: str = "experiment"
    epsilon: list[float] = Field(min_length=1)
    system: SystemCfg
    density: FieldCfg | None = None
    observable: FieldCfg | None = None
    schedule: ScheduleCfg
    times: TimesCfg
    estimator: EstimatorCfg = EstimatorCfg()
    grids: GridsCfg = GridsCfg()
    normal_form: NormalFormCfg = NormalFormCfg()
    window: WindowCfg = WindowCfg()
    mode: ModeCfg = ModeCfg()
    output: OutputCfg = OutputCfg()
    _source: str = PrivateAttr(default="")

    @property
    def source(self) -> str:
        return self._source

    @field_validator("epsilon", mode="before")
    @classmethod
    def _listify(cls, v):
        return [v] if isinstance(v, (int, float)) else v

    @field_validator("epsilon")
    @classmethod
    def _nonneg(cls, v):
        if any(not (e >= 0 and math.isfinite(e)) for e in v):
            raise ValueError("epsilon values must be finite and nonnegative")
        return v

    @model_validator(mode="after")
    def _fields(self):
        if self.system.builtin is None and (self.density is None or self.observable is None):
            raise ValueError("inline systems need density and observable tables")
        return self


# ---------------------------------------------------------------------------
# line anchoring


_HEADER = re.compile(r"^\s*\[\[?\s*([A-Za-z0-9_.\-\"]+)\s*\]\]?")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


def _locate(text: str, loc: tuple) -> int | None:
    """Best-effort 1-based line of the key path ``loc`` in TOML source."""
    path = [p for p in loc if isinstance(p, str)]
    if not path:
        return None
    table: list = []
    best = None
    for i, line in enumerate(text.splitlines(), start=1):
        m = _HEADER.match(line)
        if m:
            table = m.group(1).replace('"', "").split(".")
            if table == path[: len(table)] and best is None and len(table) == len(path):
                best = i
            continue
        m = _KEY.match(line)
        if m:
            full = table + [m.group(1)]
            if full == path[: len(full)]:
                if len(full) == len(path):
                    return i
                best = best or i
    if best is None and len(path) > 1:
        return _locate(text, tuple(path[:-1]))
    return best


def parse_config(text: str, path: str | None = None) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        m = re.search(r"line (\d+)", str(err))
        raise ConfigError(f"TOML syntax error: {err}", int(m.group(1)) if m else None, path) from None
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as err:
        first = err.errors()[0]
        loc = tuple(first["loc"])
        dotted = ".".join(str(p) for p in loc) or "<root>"
        raise ConfigError(f"{dotted}: {first['msg']}", _locate(text, loc), path) from None
    # expressions are checked now so errors point at the file
    for loc, source in _expressions(cfg):
        dim = _dim(cfg)
        try:
            ex.parse(source, dim) if isinstance(source, str) else None
        except ex.ExprParseError as err:
            raise ConfigError(f"{'.'.join(str(p) for p in loc)}: {err}", _locate(text, loc), path) from None
    cfg._source = text
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}", None, str(p)) from None
    return parse_config(text, str(p))


def _dim(cfg: ExperimentConfig) -> int:
    if cfg.system.builtin is not None:
        return BUILTINS[cfg.system.builtin](0.0)[0].dim
    return int(cfg.system.dim)


def _expressions(cfg: ExperimentConfig):
    s = cfg.system
    if s.h is not None:
        yield ("system", "h"), s.h
    for name, terms in (("system", s.perturbation), ("density", cfg.density and cfg.density.terms), ("observable", cfg.observable and cfg.observable.terms)):
        for i, t in enumerate(terms or []):
            loc = (name, "perturbation" if name == "system" else "terms", i, "coeff")
            yield loc, t.coeff


# ---------------------------------------------------------------------------


def _field(terms: list[Term], dim: int, scale: float = 1.0) -> TrigPolyField:
    out = []
    for t in terms:
        if t.kind != "const" and (t.k is None or len(t.k) != dim):
            raise ConfigError(f"term wavevector {t.k} must have {dim} components")
        c = ex.parse(t.coeff, dim) if isinstance(t.coeff, str) else ex.const(float(t.coeff))
        out.append((t.kind, tuple(t.k) if t.k is not None else None, CoeffFn(ex.mul(ex.const(scale), c), dim)))
    return TrigPolyField.from_real_terms(out, dim)


def _domain(d: DomainCfg) -> ActionDomain:
    if d.kind == "ball":
        return ActionDomain.ball(d.center, d.radius)
    return ActionDomain.box(d.lower, d.upper)


def build_case(cfg: ExperimentConfig, epsilon: float) -> Case:
    """System, density and observable at one ``epsilon``."""
    s = cfg.system
    if s.builtin is not None:
        system, dens, obs = BUILTINS[s.builtin](float(epsilon))
        name = s.builtin
    else:
        n = int(s.dim)
        domain = _domain(s.domain)
        if domain.dim != n:
            raise ConfigError(f"domain dimension {domain.dim} differs from dim = {n}")
        h = CoeffFn(ex.parse(s.h, n), n)
        f = _field(s.perturbation, n, float(epsilon))
        name = s.name or "inline"
        system = HamiltonianSystem(IntegrablePart(h, n), f, float(epsilon), domain, name)
        dens = obs = None
    n = system.dim
    allow = False
    if cfg.density is not None:
        dens = _field(cfg.density.terms, n)
        allow = cfg.density.allow_boundary_mass
    if cfg.observable is not None:
        obs = _field(cfg.observable.terms, n)
    try:
        density = EnsembleDensity(dens, system.domain, allow_boundary_mass=allow)
    except ValueError as err:
        raise ConfigError(f"density: {err}") from None
    return Case(system, density, Observable(obs, system.domain), {"system": name})


def time_grid(cfg: ExperimentConfig) -> np.ndarray:
    t = cfg.times
    if t.values is not None:
        vals = np.array(sorted(set(float(v) for v in t.values)))
    elif t.spacing == "log":
        vals = np.geomspace(t.start, t.stop, t.count)
    else:
        vals = np.linspace(t.start, t.stop, t.count)
    return vals
