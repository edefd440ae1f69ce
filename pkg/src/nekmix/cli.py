"""``nekmix`` command line: batch runs driven by a TOML config.

Exit codes: 0 success, 1 error (bad config or failed computation),
2 bound violated.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .bound import fingerprint
from .config import ConfigError, ExperimentConfig, load_config
from .pipeline import EXIT_ERROR, EXIT_OK, EXIT_VIOLATED, Run, StageOutput, new_run_dir, run_mixing, run_normalform, run_resonance, run_sweep, run_verify, write_run

log = logging.getLogger("nekmix")


def _common(f):
    f = click.option("--dt-check", is_flag=True, help="Always run the dt/2 Richardson validation.")(f)
    f = click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker threads for compiled kernels.")(f)
    f = click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Override the estimator seed.")(f)
    f = click.option("--out", "out", type=click.Path(file_okay=False, path_type=Path), default=None, help="Parent directory for run directories.")(f)
    f = click.option("--config", "config", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Experiment TOML file.")(f)
    return f


def _set_threads(n):
    if n is None:
        return
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _single(cfg: ExperimentConfig) -> float:
    if len(cfg.epsilon) != 1:
        raise ConfigError(f"config lists {len(cfg.epsilon)} epsilon values; use the sweep command")
    return float(cfg.epsilon[0])


def _execute(stage: str, config: Path, out, seed, threads, dt_check) -> int:
    try:
        cfg = load_config(config)
        _set_threads(threads)
        seed = cfg.estimator.seed if seed is None else seed
        base = Path(out) if out is not None else Path(cfg.output.dir)
        if stage == "sweep":
            files, code = run_sweep(cfg, seed, dt_check)
            summary = {}
        else:
            run = Run(cfg, _single(cfg), seed, dt_check)
            res: StageOutput = {"mixing": run_mixing, "resonance": run_resonance, "normalform": run_normalform, "verify": run_verify}[stage](run)
            files, code, summary = res.files, res.exit_code, res.summary
            if stage == "verify":
                click.echo(res.files["verdict.csv"], nl=False)
        fp = summary.get("fingerprint") or fingerprint({"config": cfg.source, "seed": seed, "stage": stage})
        path = write_run(new_run_dir(base, f"{cfg.name}-{stage}"), files, cfg, {"stage": stage, "seed": seed, "exit_code": code, "fingerprint": fp})
    except ConfigError as err:
        click.echo(f"config error: {err}", err=True)
        return EXIT_ERROR
    except Exception as err:  # noqa: BLE001 - any failure maps to exit 1
        log.debug("failure", exc_info=True)
        click.echo(f"error: {type(err).__name__}: {err}", err=True)
        return EXIT_ERROR
    for key in ("P_res", "C_G", "C_G_lemma", "tail", "r_inf"):
        if key in summary:
            click.echo(f"{key} = {summary[key]:.6g}")
    if code == EXIT_VIOLATED:
        click.echo("verdict: bound VIOLATED", err=True)
    click.echo(f"run directory: {path}")
    return code


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Ensemble deviation bounds for nearly integrable Hamiltonian flows."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)


def _command(stage: str, doc: str):
    @_common
    def command(config, out, seed, threads, dt_check):
        sys.exit(_execute(stage, config, out, seed, threads, dt_check))

    command.__doc__ = doc
    return cli.command(name=stage)(command)


_command("mixing", "Mixing constant C_G and tail (no normal form at eps = 0).")
_command("resonance", "Resonant mass P_res and the partition map.")
_command("normalform", "Normal-form package summary.")
_command("verify", "Full pipeline: bound report and verdicts (exit 2 on violation).")
_command("sweep", "Run verify for every epsilon in the config.")


def main(argv=None) -> None:
    cli.main(args=argv, prog_name="nekmix")


if __name__ == "__main__":
    main()
