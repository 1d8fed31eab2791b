import numpy as np
import pytest
import torch

from emvfm.backbones import build_backbone
from emvfm.synthetic import write_synthetic_dataset

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy():
    return build_backbone("toy-s14", seed=0)


@pytest.fixture
def fresh_toy():
    return build_backbone("toy-s14", seed=0)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    write_synthetic_dataset(root / "domain_a", n_train=12, n_test=4, seed=0, style="a")
    write_synthetic_dataset(root / "domain_b", n_train=12, n_test=4, seed=1, style="b")
    return root


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
