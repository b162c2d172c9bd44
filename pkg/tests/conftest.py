import numpy as np
import pytest
import torch

from uaagan import toydata
from uaagan.targets import AggregationSpec, TargetModel, ToyBackbone, ToyBackboneSpec


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_data():
    """Three classes of 32x32 texture images, interleaved by class."""
    x, y = toydata.generate(classes=3, per_class=12, seed=5, size=32)
    return torch.from_numpy(x), y


@pytest.fixture
def random_target():
    """An untrained but deterministic toy target on raw GeM features."""
    torch.manual_seed(11)
    bb = ToyBackbone(ToyBackboneSpec(num_classes=3))
    return TargetModel(bb, AggregationSpec("gem"), normalize=False)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
