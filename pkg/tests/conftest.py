import numpy as np
import pytest

from cxrkit.image import Image


def smooth_blob_image(size: int = 96, seed: int = 3) -> Image:
    """Smooth multi-bump raster that fades to near zero at the borders;
    suitable for registration tests where border fill must stay cheap."""
    rng = np.random.default_rng(seed)
    lin = (2.0 * np.arange(size) + 1.0) / size - 1.0
    gx, gy = np.meshgrid(lin, lin)
    img = np.zeros((size, size))
    for _ in range(5):
        cx, cy = rng.uniform(-0.45, 0.45, 2)
        s = rng.uniform(0.12, 0.3)
        amp = rng.uniform(0.2, 0.5)
        img += amp * np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * s * s))
    img *= np.exp(-(gx ** 4 + gy ** 4) * 2.0)
    return Image(np.clip(img / max(img.max(), 1.0), 0.0, 1.0))


@pytest.fixture
def smooth_phantom():
    return smooth_blob_image()
