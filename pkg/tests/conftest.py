import numpy as np
import pytest

from flythrough.geometry import CameraPose, RgbdImage
from flythrough.rng import stream


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation matrix via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng: np.random.Generator, t_scale: float = 1.0) -> CameraPose:
    return CameraPose(random_rotation(rng), rng.standard_normal(3) * t_scale)


def random_rgbd(rng: np.random.Generator, h: int = 16, w: int = 16,
                d_lo: float = 0.1, d_hi: float = 0.9) -> RgbdImage:
    pix = np.empty((h, w, 4), dtype=np.float32)
    pix[..., :3] = rng.random((h, w, 3), dtype=np.float32)
    pix[..., 3] = rng.uniform(d_lo, d_hi, (h, w)).astype(np.float32)
    return RgbdImage(pixels=pix)


@pytest.fixture
def rng():
    return stream(1234, "tests")
