import numpy as np
import pytest

from nekmix.model import builtin_case

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = dict(item.user_properties).get("detail", "")
        _CRITERIA[number] = (title, rep.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcome, detail = _CRITERIA[number]
        flag = "PASS" if outcome == "passed" else "FAIL"
        line = f"[{flag}] C{number} {title}"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))


@pytest.fixture(scope="session")
def twist2_eps():
    return builtin_case("twist2", 1e-3)


@pytest.fixture(scope="session")
def twist2_zero():
    return builtin_case("twist2", 0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def quickstart_runs(tmp_path_factory):
    """Two quickstart verify runs into the same output directory."""
    from importlib import resources

    from click.testing import CliRunner

    from nekmix.cli import cli

    out = tmp_path_factory.mktemp("quickstart")
    config = str(resources.files("nekmix") / "configs" / "quickstart.toml")
    dirs = []
    for _ in range(2):
        before = set(out.iterdir())
        result = CliRunner().invoke(cli, ["verify", "--config", config, "--out", str(out)])
        assert result.exit_code == 0, result.output
        (new,) = set(out.iterdir()) - before
        dirs.append(new)
    return dirs
