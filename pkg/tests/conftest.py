import numpy as np
import pytest

from sage_lt.data import PretrainConfig, SyntheticTaskSpec, build_foundation, generate

TINY_TASK = SyntheticTaskSpec(classes=4, n1=60, beta=10, grid=4, patch=2, noise=0.5,
                              test_per_class=20, pretrain_per_class=30, seed=3)
TINY_PRETRAIN = PretrainConfig(depth=1, width=8, heads=2, epochs=2, batch_size=32)


@pytest.fixture(scope="session")
def tiny_bundle():
    return build_foundation(TINY_TASK, TINY_PRETRAIN)


@pytest.fixture(scope="session")
def tiny_data():
    return generate(TINY_TASK)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, echoed in the terminal summary so they survive output capture
_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
