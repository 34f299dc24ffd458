import sys
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cnnkit.nn import ModelSpec

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = dict(blocks=(1, 1, 1), widths=(4, 8, 8), stem_width=8, stem_stride=1, stem_pool=False,
            num_classes=3, train_resolution=8, eval_resolution=8)


@pytest.fixture
def tiny_spec():
    return ModelSpec(**TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
