import numpy as np
import pytest
import torch

from itergan import datahub
from itergan.nets import NetConfig

# 32x32 inputs, depth 3: small enough for fast CPU tests
TINY = NetConfig(image_size=32, generator_depth=3, base_channels=4, discriminator_layers=2)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    man = datahub.build_synth_dataset(6, 32, seed=3, out=root)
    return man


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
