import numpy as np
import pytest

from superct.simulate import NoiseModel, make_phantom, random_body_spec, simulate_sinogram
from superct.tomo import Geometry, fbp


@pytest.fixture(scope="session")
def small_problem():
    """32x32 noisy scan of a random body phantom at twice the default pixel size."""
    geom = Geometry(n_views=48, n_detectors=48, detector_pitch=11.04, image_size=(32, 32),
                    pixel_size=11.04)
    x = make_phantom(random_body_spec(7, (32, 32), 11.04))
    y, w = simulate_sinogram(x, geom, NoiseModel(seed=3))
    x0 = np.maximum(fbp(y, geom), 0.0)
    return geom, x, y, w, x0
