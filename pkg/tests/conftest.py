import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _overfit_tiny(colorspace):
    from cnetpc.models import ModelConfig
    from cnetpc.trainer import TrainRun, synthetic_dataset, train

    cfg = ModelConfig(d=8, channels=4, o_res_blocks=1, c_res_blocks=1, k_first=3, colorspace=colorspace)
    data = synthetic_dataset(3, 8, seed=11)
    return train(data, cfg, TrainRun(seed=0, epochs=1, batch_size=3, steps_per_epoch=40, lr=3e-3, augment=False))


@pytest.fixture(scope="session")
def tiny_models():
    """Briefly trained d=8 bundles keyed by colour space."""
    return {cs: _overfit_tiny(cs) for cs in ("rgb", "ycocg")}


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)
