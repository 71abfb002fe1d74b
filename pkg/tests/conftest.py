import numpy as np
import pytest

from dragscene.pipeline import PipelineConfig
from dragscene.scene import generate_synthetic_scene


@pytest.fixture(scope="session")
def small_scene():
    return generate_synthetic_scene("two-box", n_views=5, seed=1)


@pytest.fixture(scope="session")
def default_cfg():
    return PipelineConfig()


def random_pose(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rigid world-to-camera transform."""
    A = rng.standard_normal((3, 3))
    Q, _ = np.linalg.qr(A)
    if np.linalg.det(Q) < 0:
        Q[:, 0] *= -1
    pose = np.eye(4)
    pose[:3, :3] = Q
    pose[:3, 3] = rng.standard_normal(3)
    return pose
