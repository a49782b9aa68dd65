import numpy as np
import pytest

from dualmix.synthdata import DatasetConfig, build_splits


@pytest.fixture(scope="session")
def small_config():
    return DatasetConfig(n_source=24, n_target=4, n_unlabeled=8, n_val=6, seed=11)


@pytest.fixture(scope="session")
def small_bundle(small_config):
    return build_splits(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path):
    from dualmix.config import RunConfig
    return RunConfig(seed=3, n_source=12, n_target=3, n_unlabeled=6, n_val=4, iters=6, base_lr=1e-3, rounds=2,
                     out_dir=str(tmp_path / "run"))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
