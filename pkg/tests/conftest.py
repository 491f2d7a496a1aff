import sys

import numpy as np
import pytest
import torch

from dra.featurenet import BackboneConfig, build_backbone
from dra.protocols import SynthSpec, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny64():
    """Small float64 tiny backbone for exact-arithmetic checks."""
    return build_backbone(BackboneConfig("tiny", channels=6), seed=0).double()


@pytest.fixture(scope="session")
def small_catalog():
    return synth_generate(SynthSpec(n_normal_train=24, n_normal_test=8, n_per_class=12, seed=3))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
