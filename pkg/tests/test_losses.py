import numpy as np
import pytest
from scipy.signal import convolve2d

from dynsplat.errors import StaleGraphError
from dynsplat.losses import (LossConfig, build_knn, dssim_active, dssim_loss, emb_reg_loss,
                             l1_loss, psnr, ssim)


def fd_image(f, x, h=1e-6):
    num = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        o = x[i]
        x[i] = o + h
        lp = f(x)
        x[i] = o - h
        lm = f(x)
        x[i] = o
        num[i] = (lp - lm) / (2 * h)
    return num


def ssim_oracle(x, y):
    """Direct SSIM with a 2D zero-padded Gaussian convolution per channel."""
    r = np.arange(11) - 5
    g = np.exp(-r * r / (2 * 1.5 ** 2))
    w = np.outer(g, g) / g.sum() ** 2
    C1, C2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for c in range(x.shape[2]):
        a, b = x[..., c], y[..., c]
        f = lambda z: convolve2d(z, w, mode="same", boundary="fill")  # noqa: E731
        ma, mb = f(a), f(b)
        va, vb, cov = f(a * a) - ma ** 2, f(b * b) - mb ** 2, f(a * b) - ma * mb
        vals.append((2 * ma * mb + C1) * (2 * cov + C2) / ((ma ** 2 + mb ** 2 + C1) * (va + vb + C2)))
    return float(np.mean(vals))


# -- L1

def test_l1_examples():
    a = np.zeros((4, 4, 3))
    assert l1_loss(a, a)[0] == 0.0
    assert l1_loss(a, np.ones_like(a))[0] == 1.0


def test_l1_gradient(rng):
    x, y = rng.random((4, 4, 3)), rng.random((4, 4, 3))
    _, g = l1_loss(x, y)
    np.testing.assert_allclose(g, fd_image(lambda z: l1_loss(z, y)[0], x), atol=1e-6)


def test_l1_size_mismatch():
    with pytest.raises(ValueError):
        l1_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


# -- SSIM

def test_dssim_identical_is_zero(rng):
    x = rng.random((16, 16, 3))
    assert dssim_loss(x, x)[0] == pytest.approx(0.0, abs=1e-12)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_dssim_constant_images():
    v, _ = dssim_loss(np.zeros((16, 16, 3)), np.ones((16, 16, 3)))
    assert v == pytest.approx(0.4999, abs=1e-4)
    assert v == pytest.approx(0.5 * (1 - ssim_oracle(np.zeros((16, 16, 3)), np.ones((16, 16, 3)))),
                              abs=1e-12)


def test_ssim_matches_convolution_oracle(rng):
    x, y = rng.random((13, 17, 3)), rng.random((13, 17, 3))
    assert ssim(x, y) == pytest.approx(ssim_oracle(x, y), abs=1e-12)


def test_dssim_gradient(rng):
    x, y = rng.random((12, 14, 3)), rng.random((12, 14, 3))
    _, g = dssim_loss(x, y)
    num = fd_image(lambda z: dssim_loss(z, y)[0], x)
    assert np.abs(g - num).max() / np.abs(num).max() < 1e-3


def test_dssim_small_image_rejected():
    with pytest.raises(ValueError):
        dssim_loss(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


def test_dssim_schedule():
    cfg = LossConfig()
    assert not dssim_active(9999, cfg)
    assert dssim_active(10003, cfg)
    assert not dssim_active(10007, cfg)
    for start in range(10000, 12000, 50):
        assert sum(dssim_active(i, cfg) for i in range(start, start + 50)) == 5


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(k_neighbors=0)
    with pytest.raises(ValueError):
        LossConfig(dssim_active_span=60)


def test_psnr_examples(rng):
    x = rng.random((8, 8, 3))
    assert psnr(x, x) == 100.0
    assert psnr(np.full((4, 4, 3), 0.1), np.zeros((4, 4, 3))) == pytest.approx(20.0, abs=1e-12)
    checker = (np.indices((8, 8)).sum(0) % 2).astype(float)[..., None].repeat(3, 2)
    assert psnr(np.full_like(checker, 0.5), checker) == pytest.approx(6.0206, abs=1e-4)


# -- neighbour graph

def test_knn_collinear_example():
    g = build_knn([[0, 0, 0], [1, 0, 0], [3, 0, 0]], 1, 1.0)
    assert g.neighbors[:, 0].tolist() == [1, 0, 1]
    assert g.weights[2, 0] == pytest.approx(np.exp(-4.0))


def test_knn_coincident_weight_one():
    g = build_knn(np.zeros((3, 3)), 2, 2000.0)
    assert (g.weights == 1.0).all()
    assert all(i not in row for i, row in enumerate(g.neighbors))


def test_knn_small_n_uses_all_others():
    g = build_knn(np.eye(3), 5, 1.0)
    assert g.k == 2
    with pytest.raises(ValueError):
        build_knn(np.zeros((1, 3)), 1, 1.0)


def test_knn_matches_scan(rng):
    p = rng.random((50, 3))
    g = build_knn(p, 5, 2000.0)
    for i in range(50):
        d = np.linalg.norm(p - p[i], axis=1)
        d[i] = np.inf
        assert set(np.argsort(d)[:5]) == set(g.neighbors[i])
        assert (g.weights[i] > 0).all() and (g.weights[i] <= 1).all()


def test_knn_tree_path_matches_scan(rng, monkeypatch):
    from dynsplat import losses
    p = rng.random((300, 3))
    ref = build_knn(p, 4, 10.0)
    monkeypatch.setattr(losses, "GRID_THRESHOLD", 10)
    tree = build_knn(p, 4, 10.0)
    assert np.array_equal(np.sort(ref.neighbors, 1), np.sort(tree.neighbors, 1))


# -- embedding regulariser

def emb_reg_oracle(e, pos, k, lam):
    n = len(e)
    total = 0.0
    for i in range(n):
        d = [(np.sum((pos[j] - pos[i]) ** 2), j) for j in range(n) if j != i]
        for d2, j in sorted(d)[:k]:
            total += np.exp(-lam * d2) * np.sqrt(np.sum((e[i] - e[j]) ** 2))
    return total / (k * n)


def test_emb_reg_examples():
    g = build_knn(np.zeros((2, 3)), 1, 2000.0)
    assert emb_reg_loss(np.ones((2, 4)), g)[0] == 0.0
    e = np.array([[0.0, 0.0], [1.0, 0.0]])
    v, grad = emb_reg_loss(e, g)
    assert v == pytest.approx(1.0)
    np.testing.assert_allclose(grad, [[-1.0, 0.0], [1.0, 0.0]])


def test_emb_reg_matches_double_loop(rng):
    for _ in range(5):
        pos, e = rng.random((10, 3)) * 0.1, rng.normal(size=(10, 6))
        v, _ = emb_reg_loss(e, build_knn(pos, 3, 200.0))
        assert v == pytest.approx(emb_reg_oracle(e, pos, 3, 200.0), abs=1e-7)


def test_emb_reg_gradient(rng):
    pos, e = rng.random((12, 3)) * 0.1, rng.normal(size=(12, 5))
    g = build_knn(pos, 4, 500.0)
    _, grad = emb_reg_loss(e, g)
    np.testing.assert_allclose(grad, fd_image(lambda z: emb_reg_loss(z, g)[0], e),
                               rtol=1e-5, atol=1e-9)


def test_emb_reg_rigid_invariance(rng):
    pos, e = rng.random((15, 3)) * 0.2, rng.normal(size=(15, 3))
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    a = emb_reg_loss(e, build_knn(pos, 3, 100.0))[0]
    b = emb_reg_loss(e, build_knn(pos @ q.T + 5.0, 3, 100.0))[0]
    assert a == pytest.approx(b, rel=1e-9)


def test_emb_reg_stale_graph():
    g = build_knn(np.random.default_rng(0).random((5, 3)), 2, 1.0)
    with pytest.raises(StaleGraphError):
        emb_reg_loss(np.zeros((6, 2)), g)
    g.stale = True
    with pytest.raises(StaleGraphError):
        emb_reg_loss(np.zeros((5, 2)), g)
