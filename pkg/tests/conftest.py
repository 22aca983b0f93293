import sys
import numpy as np
import pytest

from dynsplat.camera import Camera, look_at
from dynsplat.gaussians import GaussianCloud, num_sh_coeffs
from dynsplat.raster import Splats


def make_camera(width=32, height=32, f=30.0, eye=(0.0, -3.0, 0.0), target=(0.0, 0.0, 0.0)):
    return Camera(look_at(eye, target), f, f, width / 2.0, height / 2.0, width, height)


def random_cloud(rng, n, sh_degree=1, embed_dim=8, spread=0.4, scale=(0.05, 0.2)):
    K = num_sh_coeffs(sh_degree)
    q = rng.normal(size=(n, 4))
    return GaussianCloud(
        positions=rng.uniform(-spread, spread, (n, 3)),
        log_scales=np.log(rng.uniform(*scale, (n, 3))),
        rotations=q,
        opacity_logits=rng.normal(0.5, 1.0, n),
        sh_coeffs=rng.normal(0.0, 0.3, (n, K, 3)),
        embeddings=rng.normal(0.0, 0.5, (n, embed_dim)),
        sh_degree=sh_degree,
    )


def flat_splats(pixel, opacities, colors, depths):
    """Nearly flat splats centred on one pixel: alpha' there equals the opacity exactly."""
    n = len(opacities)
    u, v = pixel
    means = np.tile([u + 0.5, v + 0.5], (n, 1))
    conics = np.tile([1e-6, 0.0, 1e-6], (n, 1))
    return Splats.from_arrays(means, conics, opacities, colors, depth_z=depths,
                              depth_euclid=depths)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
