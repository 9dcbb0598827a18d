import numpy as np
import pytest

from qbmm.simulate import SimScenario, replicate_seed, scenario_curves, simulate_region


def write_tsv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(str(v) for v in r) + "\n")
    return path


def toy_region(seed=0, n_samples=10, n_sites=20, phi=2.0, sigma0_sq=1.0, rates=(0.0, 1.0)):
    sc = SimScenario(scenario_curves(1), n_samples=n_samples, n_sites=n_sites,
                     phi=phi, sigma0_sq=sigma0_sq, rates=rates)
    return simulate_region(sc, seed=replicate_seed(seed, 0))


@pytest.fixture
def region():
    return toy_region()[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA = {}


def record_criterion(number, passed, detail):
    """Store one acceptance outcome; printed in the terminal summary."""
    CRITERIA[number] = (bool(passed), detail)
    print(f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        ok, detail = CRITERIA[k]
        terminalreporter.write_line(f"CRITERION {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
