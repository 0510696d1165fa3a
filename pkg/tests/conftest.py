import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from egocognav.episodes.data import WindowBatch
from egocognav.geometry import matrix_to_rot6d
from egocognav.model import ModelConfig


def _random_batch(n=2, t_past=4, t_future=3, grid=2, channels=4, seed=0):
    rng = np.random.default_rng(seed)

    def rotations(k):
        m = Rotation.random(n * k, random_state=int(rng.integers(1 << 31))).as_matrix()
        return matrix_to_rot6d(m).reshape(n, k, 6)

    return WindowBatch(
        features=rng.normal(size=(n, t_past, grid, grid, channels)),
        motion=rng.normal(size=(n, t_past, 3)),
        head=rotations(t_past),
        gaze=rng.uniform(size=(n, t_past, 2)),
        goal=rng.normal(size=(n, t_past, 3)),
        future_motion=rng.normal(size=(n, t_future, 3)),
        future_head=rotations(t_future),
        u_target=rng.uniform(size=n),
        env_masks=rng.integers(0, 32, (n, t_past)),
        behavior_masks=rng.integers(0, 64, (n, t_past)),
        episode_ids=[f"ep{i}" for i in range(n)],
        steps=np.arange(n) + t_past - 1,
    )


@pytest.fixture
def random_batch():
    """Factory for random WindowBatch objects with valid head rotations."""
    return _random_batch


@pytest.fixture
def tiny_config():
    def make(**overrides):
        base = dict(d_model=8, n_heads=2, n_fusion_layers=1, n_decoder_layers=1, t_past=4,
                    t_future=3, grid=2, channels=4, dtype="float64")
        return ModelConfig(**{**base, **overrides})
    return make


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
