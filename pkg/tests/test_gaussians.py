import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynsplat.errors import DataError, InvalidRotationError
from dynsplat.gaussians import (SH_C0, GaussianCloud, activated_view, build_covariance,
                                eval_sh_color, load_cloud_ply, save_cloud_ply, sh_basis,
                                sh_colors, sh_colors_backward, six_to_cov)

from conftest import random_cloud


def test_covariance_unit_case():
    cov = six_to_cov(build_covariance([1, 1, 1], [1, 0, 0, 0]))
    assert np.array_equal(cov, np.eye(3))


def test_covariance_axis_aligned():
    cov = six_to_cov(build_covariance([2, 1, 1], [1, 0, 0, 0]))
    assert np.allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-15)


def test_covariance_rotated_about_z():
    # exact 90 degree rotation matrix, multiplied out by hand
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    oracle = R @ np.diag([4.0, 1.0, 1.0]) @ R.T
    h = math.sqrt(0.5)
    cov = six_to_cov(build_covariance([2, 1, 1], [h, 0, 0, h]))
    assert np.allclose(cov, oracle, atol=1e-12)
    assert np.allclose(oracle, np.diag([1.0, 4.0, 1.0]))


def test_zero_quaternion_rejected():
    with pytest.raises(InvalidRotationError, match="invalid rotation"):
        build_covariance([1, 1, 1], [0, 0, 0, 0])


quats = st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-3)
scales = st.lists(st.floats(0.01, 3.0), min_size=3, max_size=3)


@settings(max_examples=60, deadline=None)
@given(scales, quats)
def test_double_cover_invariance(s, q):
    a = build_covariance(s, q)
    b = build_covariance(s, -np.asarray(q))
    assert np.allclose(a, b, atol=1e-9, rtol=0)


@settings(max_examples=60, deadline=None)
@given(scales, quats)
def test_eigenvalues_are_squared_scales(s, q):
    cov = six_to_cov(build_covariance(s, q))
    assert np.allclose(cov, cov.T)
    ev = np.sort(np.linalg.eigvalsh(cov))
    assert np.allclose(ev, np.sort(np.square(s)), atol=1e-6)
    assert ev.min() >= -1e-9


def test_sh_dc_offset():
    sh = np.zeros((1, 3))
    assert np.allclose(eval_sh_color(sh, [0, 0, 1], 0), 0.5)


def test_sh_dc_inverse_constant():
    # Y00 = 1 / (2 sqrt(pi)) from the real SH table
    y00 = 1.0 / (2.0 * math.sqrt(math.pi))
    assert abs(y00 - 0.28209479) < 1e-8
    c = (1.0 - 0.5) / y00
    out = eval_sh_color(np.full((1, 3), c), [0.3, 0.4, math.sqrt(0.75)], 0)
    assert np.allclose(out, 1.0, atol=1e-12)


def test_sh_degree1_z_contrast():
    # brute force: Y_1^0 = sqrt(3 / (4 pi)) z
    y1 = math.sqrt(3.0 / (4.0 * math.pi))
    coeff = np.array([0.1, -0.2, 0.15])
    sh = np.zeros((4, 3))
    sh[2] = coeff
    up = eval_sh_color(sh, [0, 0, 1], 1)
    down = eval_sh_color(sh, [0, 0, -1], 1)
    assert np.allclose(np.abs(up - down), 2.0 * y1 * np.abs(coeff), atol=1e-12)


def test_sh_degree0_ignores_direction(rng):
    sh = rng.normal(size=(1, 3))
    dirs = rng.normal(size=(20, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cols = np.array([eval_sh_color(sh, d, 0) for d in dirs])
    assert np.all(cols == cols[0])


def test_sh_clamped_at_zero():
    sh = np.full((1, 3), -10.0)
    assert np.array_equal(eval_sh_color(sh, [1, 0, 0], 0), np.zeros(3))


def test_sh_basis_orthonormal():
    # Gauss-Legendre in cos(theta) x uniform phi integrates these polynomials exactly
    nodes, weights = np.polynomial.legendre.leggauss(12)
    phi = np.linspace(0, 2 * np.pi, 24, endpoint=False)
    ct, ph = np.meshgrid(nodes, phi, indexing="ij")
    w = np.repeat(weights[:, None], len(phi), axis=1) * (2 * np.pi / len(phi))
    st_ = np.sqrt(1 - ct ** 2)
    dirs = np.stack([st_ * np.cos(ph), st_ * np.sin(ph), ct], -1).reshape(-1, 3)
    Y = sh_basis(dirs, 3)
    gram = (Y * w.reshape(-1, 1)).T @ Y
    assert np.allclose(gram, np.eye(16), atol=1e-12)


def test_sh_backward_matches_finite_differences(rng):
    n, deg = 4, 3
    sh = rng.normal(0, 0.3, (n, 16, 3))
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    w = rng.normal(size=(n, 3))

    def f(sh_, dirs_):
        return float(np.sum(w * sh_colors(sh_, dirs_, deg)[0]))

    rgb, raw = sh_colors(sh, dirs, deg)
    d_sh, d_dir = sh_colors_backward(sh, dirs, deg, raw, w)
    h = 1e-6
    for idx in [(0, 5, 1), (2, 12, 0), (3, 0, 2)]:
        sp, sm = sh.copy(), sh.copy()
        sp[idx] += h
        sm[idx] -= h
        assert abs((f(sp, dirs) - f(sm, dirs)) / (2 * h) - d_sh[idx]) < 1e-6
    for i in range(n):
        for a in range(3):
            dp, dm = dirs.copy(), dirs.copy()
            dp[i, a] += h
            dm[i, a] -= h
            assert abs((f(sh, dp) - f(sh, dm)) / (2 * h) - d_dir[i, a]) < 1e-6


def test_activated_view_examples():
    cloud = GaussianCloud.create(np.zeros((1, 3)), embed_dim=2)
    cloud.opacity_logits[:] = 0.0
    cloud.log_scales[:] = 0.0
    cloud.rotations[:] = [2.0, 0, 0, 0]
    v = activated_view(cloud)
    assert v.opacity[0] == 0.5
    assert np.array_equal(v.scales[0], np.ones(3))
    assert np.array_equal(v.quats[0], [1.0, 0, 0, 0])


def test_activated_view_names_bad_index(rng):
    cloud = random_cloud(rng, 5)
    cloud.log_scales[3, 1] = np.inf
    with pytest.raises(DataError, match="index 3"):
        activated_view(cloud)


def test_activated_view_bitwise_reproducible(rng):
    cloud = random_cloud(rng, 30)
    a, b = activated_view(cloud), activated_view(cloud.copy())
    for name in ("scales", "quats", "opacity"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_activated_opacity_in_open_interval(rng):
    cloud = random_cloud(rng, 50)
    cloud.opacity_logits[:] = np.linspace(-30, 30, 50)
    op = activated_view(cloud).opacity
    assert np.all((op > 0) & (op < 1))


def test_quaternion_norms_after_normalisation(rng):
    q = activated_view(random_cloud(rng, 40)).quats
    assert np.allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-6)


def test_create_uses_dc_colour():
    cloud = GaussianCloud.create(np.zeros((2, 3)), [[1, 0, 0], [0.5, 0.5, 0.5]], sh_degree=2)
    assert cloud.sh_coeffs.shape == (2, 9, 3)
    assert np.allclose(cloud.sh_coeffs[0, 0], [0.5 / SH_C0, -0.5 / SH_C0, -0.5 / SH_C0])
    assert np.all(cloud.sh_coeffs[:, 1:] == 0)
    cloud.validate()


@pytest.mark.parametrize("degree", [0, 1, 3])
def test_ply_roundtrip(tmp_path, rng, degree):
    cloud = random_cloud(rng, 7, sh_degree=degree, embed_dim=5)
    path = tmp_path / "c.ply"
    save_cloud_ply(cloud, path)
    back = load_cloud_ply(path)
    assert back.sh_degree == degree
    for name, arr in cloud.arrays().items():
        assert np.allclose(getattr(back, name), arr.astype(np.float32), rtol=0, atol=0)
    header = path.read_bytes().split(b"end_header")[0].decode()
    for prop in ("x", "opacity", "scale_2", "rot_3", "f_dc_0", "embed_4"):
        assert f"property float {prop}\n" in header
    assert ("f_rest_0" in header) == (degree > 0)


def test_ply_rejects_ascii(tmp_path):
    p = tmp_path / "a.ply"
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(DataError, match="binary_little_endian"):
        load_cloud_ply(p)
