import csv
import json

import pytest
from click.testing import CliRunner

from nekmix.cli import cli

SMALL = """
name = "small"
epsilon = {eps}

[system]
builtin = "twist2"

[schedule]
K = 2
alpha = 0.15

[times]
values = [1, 10]

[estimator]
samples = 300
seed = 5
dt = 0.05
richardson_samples = 50

[grids]
mixing_resolution = 48
nf_resolution = 16
theta_fft = 6

[normal_form]
probes = 30
"""

VERIFY_FILES = {"deviation.csv", "bound_report.json", "verdict.csv", "plot_data.csv", "config.toml", "manifest.json"}


def _write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


def _invoke(*args):
    return CliRunner().invoke(cli, list(args))


def _run_dir(out):
    (d,) = [p for p in out.iterdir() if p.is_dir()]
    return d


class TestQuickstart:
    def test_artifacts(self, quickstart_runs):
        names = {p.name for p in quickstart_runs[0].iterdir()}
        assert VERIFY_FILES <= names

    def test_manifest_digests(self, quickstart_runs):
        import hashlib

        d = quickstart_runs[0]
        manifest = json.loads((d / "manifest.json").read_text())
        assert manifest["exit_code"] == 0
        for name, digest in manifest["files"].items():
            assert hashlib.sha256((d / name).read_bytes()).hexdigest() == digest

    def test_verdicts_present(self, quickstart_runs):
        rows = list(csv.DictReader((quickstart_runs[0] / "verdict.csv").open()))
        assert [float(r["t"]) for r in rows] == [1, 2, 5, 10, 20, 50, 100]
        assert all(r["verdict"] in {"holds", "holds-within-3sigma"} for r in rows)

    def test_rerun_identical(self, quickstart_runs):
        a, b = quickstart_runs
        for name in VERIFY_FILES - {"manifest.json"}:
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestErrors:
    def test_malformed_config(self, tmp_path):
        res = _invoke("verify", "--config", _write(tmp_path, "epsilon = [\n"), "--out", str(tmp_path / "o"))
        assert res.exit_code == 1
        assert "config error" in res.output
        assert "c.toml:" in res.output

    def test_multiple_eps_needs_sweep(self, tmp_path):
        res = _invoke("mixing", "--config", _write(tmp_path, SMALL.format(eps="[1e-2, 1e-3]")), "--out", str(tmp_path / "o"))
        assert res.exit_code == 1
        assert "sweep" in res.output

    def test_missing_config(self, tmp_path):
        res = _invoke("verify", "--config", str(tmp_path / "nope.toml"))
        assert res.exit_code == 1

    def test_help_lists_commands(self):
        res = _invoke("--help")
        for name in ("mixing", "resonance", "normalform", "verify", "sweep"):
            assert name in res.output


def test_resonance_command(tmp_path):
    text = SMALL.format(eps="1e-3").replace("K = 2\nalpha = 0.15", "K = 3\nalpha = 0.05")
    out = tmp_path / "o"
    res = _invoke("resonance", "--config", _write(tmp_path, text), "--out", str(out))
    assert res.exit_code == 0, res.output
    assert "P_res = " in res.output
    d = _run_dir(out)
    header = (d / "partition_map.csv").read_text().splitlines()[0]
    assert header.startswith("I1,I2,resonant")
    assert 0 < json.loads((d / "resonance.json").read_text())["P_res"] < 1


def test_mixing_at_zero_eps(tmp_path):
    out = tmp_path / "o"
    res = _invoke("mixing", "--config", _write(tmp_path, SMALL.format(eps="0.0")), "--out", str(out))
    assert res.exit_code == 0, res.output
    assert "C_G = " in res.output
    d = _run_dir(out)
    rep = json.loads((d / "mixing_report.json").read_text())
    assert rep["coordinates"] == "original"
    assert not (d / "normal_form.json").exists()


def test_normalform_command(tmp_path):
    out = tmp_path / "o"
    res = _invoke("normalform", "--config", _write(tmp_path, SMALL.format(eps="1e-3")), "--out", str(out))
    assert res.exit_code == 0, res.output
    doc = json.loads((_run_dir(out) / "normal_form.json").read_text())
    assert doc["r_inf"] > 0


def test_sweep(tmp_path):
    out = tmp_path / "o"
    res = _invoke("sweep", "--config", _write(tmp_path, SMALL.format(eps="[1e-2, 1e-3]")), "--out", str(out))
    assert res.exit_code in (0, 2), res.output
    d = _run_dir(out)
    subs = sorted(p.name for p in d.iterdir() if p.is_dir())
    assert subs == ["eps-0.001", "eps-0.01"]
    for s in subs:
        assert (d / s / "verdict.csv").exists()
    rows = list(csv.DictReader((d / "summary.csv").open()))
    assert [float(r["epsilon"]) for r in rows] == [1e-2, 1e-3]


@pytest.mark.parametrize("seed", ["5", "6"])
def test_seed_override_recorded(tmp_path, seed):
    out = tmp_path / "o"
    res = _invoke("mixing", "--config", _write(tmp_path, SMALL.format(eps="0.0")), "--out", str(out), "--seed", seed)
    assert res.exit_code == 0, res.output
    assert json.loads((_run_dir(out) / "manifest.json").read_text())["seed"] == int(seed)
