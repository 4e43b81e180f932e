import numpy as np
import pytest

from snode_dmd import nets, sim


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_clean():
    return sim.gen_synthetic(sim.SynthConfig(noise_sigma=0.0), seed=0)


@pytest.fixture(scope="session")
def synth_noisy():
    return sim.gen_synthetic(seed=0)


@pytest.fixture
def tiny_net():
    return nets.NetConfig(rank=2, L=2, mode_hidden=(8, 8), enc_hidden=(6, 6), drift_hidden=(5, 5),
                          zero_drift_output=False)


ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str):
    ACCEPTANCE[criterion] = (passed, detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")
