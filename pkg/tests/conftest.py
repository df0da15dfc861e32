import os

import numpy as np
import pytest

from hcseg import cli


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The default 100/25/20 phantom dataset, generated once per session."""
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(root)]) == 0
    return str(root)


TRAINED_VARIANTS = {
    "baseline": ("baseline", 1),
    "SHCx2": ("static", 2),
    "DHCx2": ("dynamic", 2),
}


@pytest.fixture(scope="session")
def trained_runs(default_dataset, tmp_path_factory):
    """30-epoch training runs (depth 3, base 8) for baseline, SHCx2 and DHCx2.

    Returns ``{name: (run_dir, seconds)}``.
    """
    import time

    out = {}
    root = tmp_path_factory.mktemp("runs")
    for name, (mode, n) in TRAINED_VARIANTS.items():
        run = os.path.join(str(root), name)
        t0 = time.perf_counter()
        code = cli.main(["train", "--data", default_dataset, "--out", run, "--mode", mode,
                         "--n", str(n), "--epochs", "30", "--depth", "3", "--base-channels", "8",
                         "--seed", "0"])
        assert code == 0
        out[name] = (run, time.perf_counter() - t0)
    return out


ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line; the lines are echoed in the terminal summary."""
    def record(number, title, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
