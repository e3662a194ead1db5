import sys
import warnings

import numpy as np
import pytest

from aical.anomaly import fit_normalization
from aical.sim import SimConfig, emit_protocol_suite


@pytest.fixture(scope="session")
def small_cfg():
    return SimConfig(seed=3, n_sequences=6, n_aug_sequences=5, n_ood_sequences=2, frames_per_sequence=300)


@pytest.fixture(scope="session")
def small_bundle(small_cfg):
    return emit_protocol_suite(small_cfg, keep_truth=True)


@pytest.fixture(scope="session")
def small_stats(small_bundle):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fit_normalization(small_bundle.splits["in_cal"] + small_bundle.splits["in_train"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for num in sorted(verdicts):
            terminalreporter.write_line(verdicts[num])
