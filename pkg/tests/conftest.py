import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from shrimpxnet.data import generate_synthetic, split  # noqa: E402
from shrimpxnet.model import BlockSpec, ModelSpec  # noqa: E402
from shrimpxnet.trainer import TrainConfig, train, with_values  # noqa: E402

SMOKE_SPEC = ModelSpec(input_size=(64, 64))
SMOKE_CONFIG = TrainConfig(epochs=15, batch_size=32)
TINY_SPEC = ModelSpec(blocks=(BlockSpec(4), BlockSpec(8)), head_hidden_width=8, num_classes=4, input_size=(16, 16))


@pytest.fixture(scope="session")
def smoke_data():
    """Synthetic 4-class set, 200 images per class at 64x64, split 70/15/15."""
    samples, names = generate_synthetic(200, 4, 64, seed=0)
    return split(samples, 0, names)


@pytest.fixture(scope="session")
def smoke_run(smoke_data):
    t0 = time.perf_counter()
    result = train(SMOKE_CONFIG, SMOKE_SPEC, smoke_data)
    return result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def smoke_adv_run(smoke_data):
    return train(with_values(SMOKE_CONFIG, fgsm_epsilon=0.1), SMOKE_SPEC, smoke_data)


@pytest.fixture(scope="session")
def tiny_data():
    samples, names = generate_synthetic(12, 4, 16, seed=1)
    return split(samples, 0, names)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance summary -----------------------------------------------------

_acceptance = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        measured = dict(report.user_properties).get("measured", "")
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome, measured))
    elif report.when == "setup" and report.failed and "test_acceptance.py" in report.nodeid:
        _acceptance.append((report.nodeid.split("::")[-1], "error", ""))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, measured in _acceptance:
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{mark}] {name}" + (f": {measured}" if measured else ""))
