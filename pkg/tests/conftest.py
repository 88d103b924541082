import numpy as np
import pytest

from scusfl import semantic_codec as sc
from scusfl.config import CodecSettings, RunConfig
from scusfl.data import synth_split
from scusfl.experiments import prepare_codecs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mlp_data():
    # Two-class vectors, far apart: learnable in a couple of epochs.
    return synth_split(240, 120, 2, (48,), 10.0, seed=7)


@pytest.fixture(scope="session")
def img_data():
    return synth_split(192, 96, 10, (3, 32, 32), 20.0, seed=3)


@pytest.fixture
def mlp_cfg():
    return RunConfig(arch="mlp", num_clients=2, rounds=2, local_epochs=1, batch_size=32,
                     n_train=240, n_test=120, separation=10.0, seed=7,
                     codec=CodecSettings(pretrain_epochs=1, warmup_epochs=1))


@pytest.fixture(scope="session")
def mlp_codecs(mlp_data):
    cfg = RunConfig(arch="mlp", batch_size=32, seed=7, codec=CodecSettings(pretrain_epochs=1))
    return prepare_codecs(cfg, mlp_data[0], crs=sc.STANDARD_CRS)


# -- acceptance report ----------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title} ({detail})")
