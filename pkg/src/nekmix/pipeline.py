"""Stage orchestration for the command-line runs.

Every stage returns plain payloads (file name -> text) so runs are easy to
persist and compare byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import platform
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bound import BoundReport, assemble, exp_window, verdict_table, window_from_K
from .config import ConfigError, ExperimentConfig, build_case, time_grid
from .core import SeededRng, build_grid
from .estimator import EstimatorConfig, deviation_series, discretization_error, sample_density
from .flow import FlowSpec
from .mixing import MixingReport, mixing_constant, mixing_constant_from_table
from .model import Case
from .normalform import (
    NormalFormPackage,
    build_normal_form,
    calibrate_c_err,
    conjugate_terms,
    eq_change_error,
    gtilde_c1,
    nf_tail,
    normal_form_coordinates,
    normal_form_cutoff,
)
from .resonance import PartitionSpec, SmoothCutoff, default_mass_grid, effective_resonant_mass, partition_map, power_schedule, resonant_mass, zz_schedule
from .spectral import tail

log = logging.getLogger("nekmix")

__all__ = ["Run", "StageOutput", "partition_spec", "run_resonance", "run_mixing", "run_normalform", "run_verify", "write_run", "run_sweep"]

EXIT_OK, EXIT_ERROR, EXIT_VIOLATED = 0, 1, 2


@dataclass
class StageOutput:
    files: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK
    report: BoundReport | None = None

    def merge(self, other: "StageOutput") -> "StageOutput":
        self.files.update(other.files)
        self.summary.update(other.summary)
        self.exit_code = max(self.exit_code, other.exit_code)
        return self


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_plain) + "\n"


def _plain(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"not serializable: {type(x)}")


def partition_spec(cfg: ExperimentConfig, eps: float) -> PartitionSpec:
    s = cfg.schedule
    if s.kind == "explicit":
        return PartitionSpec(int(s.K), float(s.alpha), distance=s.distance)
    if s.kind == "zz":
        spec = zz_schedule(eps, s.beta, s.s0)
    else:
        spec = power_schedule(eps, s.a, s.prefactor, alpha=s.alpha)
    if s.distance != spec.distance:
        spec = PartitionSpec(spec.K, spec.alpha, s.distance, spec.schedule, spec.r, spec.params)
    return spec


@dataclass
class Run:
    """One configuration at one ``epsilon`` with lazily built stages."""

    cfg: ExperimentConfig
    eps: float
    seed: int
    dt_check: bool = False
    _case: Case | None = None
    _spec: PartitionSpec | None = None
    _pkg: NormalFormPackage | None = None
    _coords: object = None
    _cutoff: SmoothCutoff | None = None
    _d_empty: bool | None = None

    @property
    def case(self) -> Case:
        if self._case is None:
            self._case = build_case(self.cfg, self.eps)
        return self._case

    @property
    def spec(self) -> PartitionSpec:
        if self._spec is None:
            self._spec = partition_spec(self.cfg, self.eps)
        return self._spec

    @property
    def integrable(self):
        return self.case.system.integrable

    def mass_grid(self):
        return default_mass_grid(self.case.density, self.cfg.grids.mass_resolution)

    def cutoff_width(self) -> float:
        if self.cfg.grids.cutoff_width is not None:
            return self.cfg.grids.cutoff_width
        dom = self.case.system.domain
        nodes = build_grid(dom, 15 if dom.dim <= 2 else 7).nodes
        L = float(np.max(np.linalg.norm(self.integrable.frequency_jacobian(nodes), ord=2, axis=(-2, -1))))
        return 0.05 * dom.diameter * L

    @property
    def d_empty(self) -> bool:
        """True when the nonresonant region misses the density support."""
        if self._d_empty is None:
            bare = SmoothCutoff(self.spec, self.integrable, 0.0, self.cutoff_width())
            grid = self.mass_grid()
            self._d_empty = bool(grid.size == 0 or not np.any(bare.value(grid.nodes) > 0))
        return self._d_empty

    @property
    def package(self) -> NormalFormPackage:
        if self._pkg is None:
            nf = self.cfg.normal_form
            log.info("building normal form (steps=%d, dt_nf=%g)", nf.steps, nf.dt_nf)
            self._pkg = build_normal_form(self.case.system, self.spec, steps=nf.steps, dt_nf=nf.dt_nf, probe_count=nf.probes, seed=self.seed)
        return self._pkg

    @property
    def cutoff(self) -> SmoothCutoff:
        if self._cutoff is None:
            if self.eps > 0 and not self.d_empty:
                self._cutoff = normal_form_cutoff(self.package, self.spec, self.integrable, self.cutoff_width())
            else:
                self._cutoff = SmoothCutoff(self.spec, self.integrable, 0.0, self.cutoff_width())
        return self._cutoff

    @property
    def coords(self):
        if self._coords is None:
            g = self.cfg.grids
            if g.theta_fft < 2 * self.spec.K + 2:
                raise ConfigError(f"grids.theta_fft = {g.theta_fft} cannot resolve modes up to K = {self.spec.K}; use at least {2 * self.spec.K + 2}")
            log.info("sampling normal-form coordinates (%d^n actions, %d^n angles)", g.nf_resolution, g.theta_fft)
            self._coords = normal_form_coordinates(self.case.observable, self.case.density, self.package, self.cutoff, g.nf_resolution, g.theta_fft)
        return self._coords


# ---------------------------------------------------------------------------
# stages


def run_resonance(run: Run, map_resolution: int | None = None) -> StageOutput:
    case, spec = run.case, run.spec
    grid = run.mass_grid()
    p_res = resonant_mass(case.density, spec, run.integrable, grid, conservative=True)
    p_sharp = resonant_mass(case.density, spec, run.integrable, grid, conservative=False)
    n = case.system.dim
    if map_resolution is None:
        map_resolution = {1: 401, 2: 101}.get(n, 21)
    pm = partition_map(build_grid(case.system.domain, map_resolution), spec, run.integrable)
    summary = {
        "epsilon": run.eps,
        "partition": spec.to_dict(),
        "P_res": p_res,
        "P_res_sharp": p_sharp,
        "mass_grid": grid.describe(),
        "map_grid_resolution": map_resolution,
        "map_band": pm.band,
        "resonant_fraction_of_map": float(np.mean(pm.resonant)) if pm.resonant.size else 0.0,
    }
    return StageOutput({"partition_map.csv": pm.to_csv(), "resonance.json": _dumps(summary)}, {"P_res": p_res})


def _mixing_original(run: Run) -> tuple[MixingReport, float, int]:
    case = run.case
    K = run.cfg.schedule.K if run.cfg.schedule.K is not None else case.observable.field.band_limit
    res = run.cfg.grids.mixing_resolution if case.system.dim <= 2 else min(run.cfg.grids.mixing_resolution, 48)
    grid = build_grid(case.system.domain, res, "midpoint", window=case.density.support)
    rep = mixing_constant(case.observable, case.density, int(K), grid, run.integrable)
    return rep, tail(case.observable, case.density, int(K), grid), int(K)


def _mixing_normal_form(run: Run) -> tuple[MixingReport, float]:
    coords = run.coords
    rep = mixing_constant_from_table(coords.table, run.spec.K, coords.grid, run.package.h_eps, region=coords.describe())
    return rep, nf_tail(coords, run.spec.K)


def _empty_report(run: Run) -> MixingReport:
    return MixingReport([], 0.0, 0.0, run.spec.K, {"nonresonant_region": "empty on the density support"}, "normal-form", ["no nonresonant mass: every term on D vanishes"])


def mixing_stage(run: Run) -> tuple[MixingReport, float]:
    if run.eps == 0:
        rep, tl, _ = _mixing_original(run)
        return rep, tl
    if run.d_empty:
        return _empty_report(run), 0.0
    return _mixing_normal_form(run)


def run_mixing(run: Run) -> StageOutput:
    rep, tl = mixing_stage(run)
    doc = rep.to_dict()
    doc["tail"] = tl
    doc["epsilon"] = run.eps
    return StageOutput({"mixing_report.json": _dumps(doc)}, {"C_G": rep.C_direct, "C_G_lemma": rep.C_lemma, "tail": tl})


def run_normalform(run: Run) -> StageOutput:
    if run.eps > 0 and run.d_empty:
        doc = {"epsilon": run.eps, "skipped": "nonresonant region misses the density support", "partition": run.spec.to_dict()}
        return StageOutput({"normal_form.json": _dumps(doc)}, {"r_inf": 0.0})
    pkg = run.package
    doc = pkg.summary()
    doc["epsilon"] = run.eps
    doc["partition"] = run.spec.to_dict()
    return StageOutput({"normal_form.json": _dumps(doc)}, {"r_inf": pkg.r_inf})


def _window(run: Run):
    if run.eps == 0:
        return None
    w = run.cfg.window
    if w.form == "K":
        return window_from_K(run.spec.K, w.c, w.sigma, w.ceiling)
    if w.a is None:
        raise ConfigError("window form eps^-a needs window.a")
    return exp_window(run.eps, w.a, w.c, w.sigma, w.ceiling)


def run_verify(run: Run) -> StageOutput:
    cfg, case = run.cfg, run.case
    G, f0 = case.observable, case.density
    times = time_grid(cfg)
    est = cfg.estimator
    out = StageOutput()
    if run.eps > 0 or cfg.schedule.kind == "explicit":
        out.merge(run_resonance(run))
    # flow
    if run.eps == 0:
        flow = FlowSpec.exact(run.integrable)
    else:
        flow = FlowSpec.for_system(case.system, est.dt, est.scheme)
    nf_active = run.eps > 0 and not run.d_empty
    samples = None
    measured = {}
    if est.kind == "monte-carlo":
        samples = sample_density(f0, est.samples, SeededRng(run.seed, 0))
    hook = None
    if nf_active:
        pkg = run.package
        w = run.cutoff.value(samples.action) if samples is not None else None

        def hook(t, th, ac):
            _, B = conjugate_terms(G, samples.theta, samples.action, w, pkg, t)
            measured[float(t)] = abs(math.fsum(w * (G(th, ac) - B)) / w.size)

    if est.kind == "quadrature" and nf_active:
        raise ConfigError("the quadrature estimator needs eps = 0 (exact integrable flow)")
    qgrid = None
    if est.kind == "quadrature" and est.quadrature_resolution is not None:
        qgrid = build_grid(case.system.domain, est.quadrature_resolution, "gauss-legendre", window=f0.support)
    log.info("deviation series: %s, N=%d, %d times", est.kind, est.samples, times.size)
    series = deviation_series(G, flow, f0, times, EstimatorConfig(est.kind, est.samples, run.seed, 0, qgrid), samples, on_step=hook)
    out.files["deviation.csv"] = series.to_csv()
    # terms
    rep, tl = mixing_stage(run)
    out.merge(run_mixing(run))
    if run.eps > 0:
        cut = run.cutoff
        p_res = effective_resonant_mass(f0, cut, run.mass_grid())
    else:
        p_res = 0.0
    r_inf = g1 = c_err = e_eq = 0.0
    calib = None
    if nf_active:
        pkg = run.package
        out.merge(run_normalform(run))
        g1 = gtilde_c1(G, pkg)
        assumption = _assumption(cfg, run)
        r_used = pkg.r_inf if assumption is None else assumption["C_nf"] * run.eps * math.exp(-assumption["c_nf"] * assumption["K"])
        mt = np.array([measured[float(t)] for t in times])
        calib = calibrate_c_err(times, mt, g1, r_used, cfg.normal_form.C_err)
        c_err = calib.C_err
        if not calib.holdout_ok and cfg.normal_form.C_err is None:
            # held-out times exceed the training ratio: widen to all times
            c_err = float(np.max(np.concatenate([calib.train_ratios, calib.holdout_ratios])))
        r_inf = pkg.r_inf
        e_eq = eq_change_error(G, f0, pkg, run.cutoff, run.coords)
    elif run.eps > 0:
        out.merge(run_normalform(run))
    assumption = _assumption(cfg, run) if nf_active else None
    window = _window(run)
    inputs = {
        "name": cfg.name,
        "epsilon": run.eps,
        "partition": run.spec.to_dict() if (run.eps > 0 or cfg.schedule.kind == "explicit") else None,
        "seed": run.seed,
        "samples": est.samples,
        "dt": flow.dt,
        "grids": cfg.grids.model_dump(),
        "normal_form": cfg.normal_form.model_dump(),
        "C_err_source": None if calib is None else calib.source,
    }
    details = {
        "C_err_calibration": None if calib is None else calib.to_dict(),
        "measured_nf_error": [measured.get(float(t)) for t in times] if nf_active else None,
        "P_res_effective": p_res,
        "cutoff": run.cutoff.describe() if run.eps > 0 else None,
        "nonresonant_region_empty": bool(run.d_empty) if run.eps > 0 else None,
    }
    disc = None
    if run.dt_check or cfg.mode.dt_check:
        disc = _richardson(flow, G, samples, times, est)
    kwargs = dict(
        G_sup=G.sup_norm,
        P_res=p_res,
        mixing=rep,
        tail=tl,
        epsilon=run.eps,
        r_inf=r_inf,
        Gtilde_C1=g1,
        C_err=c_err,
        E_eq=e_eq,
        window=window,
        C_G_override=cfg.mode.fault_C_G,
        assumption=assumption,
        inputs=inputs,
        details=details,
    )
    report = assemble(series, discretization=disc, **kwargs)
    if disc is None and "unresolved" in report.verdicts:
        log.info("candidate violation: running the dt/2 Richardson check")
        disc = _richardson(flow, G, samples, times, est)
        report = assemble(series, discretization=disc, **kwargs)
    out.files["bound_report.json"] = report.to_json() + "\n"
    out.files["verdict.csv"] = verdict_table(report)
    out.files["plot_data.csv"] = report.plot_csv()
    out.summary.update({"verdicts": report.verdicts, "fingerprint": report.fingerprint, "violated": report.violated})
    out.exit_code = EXIT_VIOLATED if report.violated else EXIT_OK
    out.report = report
    return out


def _assumption(cfg: ExperimentConfig, run: Run):
    m = cfg.mode
    if not m.assumption:
        return None
    return {"C_nf": m.C_nf, "c_nf": m.c_nf, "K": run.spec.K}


def _richardson(flow, G, samples, times, est):
    if flow.kind == "exact" or samples is None:
        return np.zeros(len(times))
    return discretization_error(G, flow, samples, times, est.richardson_samples)


# ---------------------------------------------------------------------------
# persistence


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _versions() -> dict:
    import numba

    return {"nekmix": __version__, "python": platform.python_version(), "numpy": np.__version__, "numba": numba.__version__}


def new_run_dir(out: Path, name: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    path = out / f"{name}-{stamp}"
    k = 1
    while path.exists():
        path = out / f"{name}-{stamp}-{k}"
        k += 1
    path.mkdir(parents=True)
    return path


def write_run(path: Path, files: dict, cfg: ExperimentConfig, extra: dict | None = None) -> Path:
    """Write payload files, a config copy and a manifest with sha256 digests."""
    path.mkdir(parents=True, exist_ok=True)
    files = dict(files)
    files["config.toml"] = cfg.source
    digests = {}
    for name in sorted(files):
        data = files[name].encode("utf-8")
        target = path / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
        digests[name] = _sha256(data)
    manifest = {
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "command": " ".join(Path(a).name if i == 0 else a for i, a in enumerate(sys.argv)),
        "versions": _versions(),
        "files": digests,
    }
    manifest.update(extra or {})
    (path / "manifest.json").write_text(_dumps(manifest), encoding="utf-8")
    return path


def run_sweep(cfg: ExperimentConfig, seed: int, dt_check: bool = False) -> tuple[dict, int]:
    """Verify every ``epsilon``; returns ``{subdir/file: text}`` and the worst exit code."""
    files = {}
    rows = []
    code = EXIT_OK
    for eps in cfg.epsilon:
        run = Run(cfg, float(eps), seed, dt_check)
        res = run_verify(run)
        sub = f"eps-{eps:.6g}"
        for name, text in res.files.items():
            files[f"{sub}/{name}"] = text
        code = max(code, res.exit_code)
        rep = res.report
        counts = {v: rep.verdicts.count(v) for v in ("holds", "holds-within-3sigma", "violated", "unresolved")}
        rows.append([f"{eps:.17g}", run.spec.K, f"{run.spec.alpha:.17g}", f"{rep.term_res:.17g}", f"{rep.inputs['C_G']:.17g}", *counts.values(), res.exit_code, rep.fingerprint])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epsilon", "K", "alpha", "term_res", "C_G", "holds", "holds_within_3sigma", "violated", "unresolved", "exit_code", "fingerprint"])
    w.writerows(rows)
    files["summary.csv"] = buf.getvalue()
    return files, code
