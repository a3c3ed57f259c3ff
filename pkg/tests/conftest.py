import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from phdrank.dataset import VideoRecord
from phdrank.synth import SynthConfig, generate_synthetic

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_video(bounds, gt, features=None, video_id="v", split="test", duration=None, dim=3, seed=0):
    bounds = np.asarray(bounds, dtype=np.float64).reshape(-1, 2)
    if features is None:
        rng = np.random.default_rng(seed)
        features = rng.standard_normal((len(bounds), dim))
    duration = float(bounds[-1, 1]) if duration is None else duration
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    return VideoRecord(video_id, duration, bounds, np.asarray(features, dtype=np.float64), gt, split)


def windows(n, length=5.0):
    return [(i * length, (i + 1) * length) for i in range(n)]


@pytest.fixture(scope="session")
def tiny_config():
    return SynthConfig(n_train_users=40, n_val_users=15, n_test_users=20, feature_dim=16, n_topics=4,
                       history_videos=(3, 8))


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config):
    return generate_synthetic(tiny_config, seed=3)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one acceptance line; the assertion itself stays in the test."""

    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[criterion] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
