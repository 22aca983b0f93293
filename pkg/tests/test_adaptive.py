import numpy as np
import pytest

from conftest import make_camera, random_cloud
from dynsplat.adaptive import (DensifyConfig, SamplingConfig, densify_and_prune, error_map,
                               inject_anchors, sample_anchors, select_pixels, write_anchor_csv)
from dynsplat.deform import DeformationField
from dynsplat.gaussians import PER_GAUSSIAN_FIELDS, logit, sigmoid
from dynsplat.losses import build_knn
from dynsplat.optim import Adam
from dynsplat.pipeline import render_frame
from dynsplat.raster import project


def optimizer_for(cloud):
    opt = Adam({k: 1e-3 for k in PER_GAUSSIAN_FIELDS})
    opt.step({k: v.copy() for k, v in cloud.arrays().items()}, {k: np.ones_like(v) for k, v in cloud.arrays().items()})
    return opt


def assert_rows_match(cloud, opt):
    for k in PER_GAUSSIAN_FIELDS:
        assert opt.rows(k) == cloud.n


# -- error map and pixel selection

def test_error_map_examples():
    z = np.zeros((4, 5, 3))
    assert not error_map(z, z).any()
    assert (error_map(z, np.ones_like(z)) == 1).all()
    gt = z.copy()
    gt[2, 3] = 0.5
    e = error_map(z, gt)
    assert e[2, 3] == 0.5 and e.sum() == 0.5
    with pytest.raises(ValueError):
        error_map(z, np.zeros((4, 4, 3)))


def test_select_examples():
    cfg = SamplingConfig(top_fraction=0.1)
    depth = np.ones((4, 5))
    assert select_pixels(np.zeros((4, 5)), depth, cfg) == []
    err = np.zeros((4, 5))
    err[1, 3] = 0.8
    assert select_pixels(err, depth, cfg) == [((3, 1), 1.0)]
    depth[1, 3] = np.nan
    assert select_pixels(err, depth, cfg) == []


def test_select_order_and_limits():
    err = np.full((4, 4), 0.5)
    err[3, 0] = 0.9
    cfg = SamplingConfig(top_fraction=0.25, max_new_per_pass=3)
    picks = select_pixels(err, np.full((4, 4), 2.0), cfg)
    # highest first, then row-major among the tied 0.5s
    assert [p for p, _ in picks] == [(0, 3), (0, 0), (1, 0)]
    assert len(set(picks)) == len(picks)
    low = SamplingConfig(top_fraction=1.0, error_threshold=0.6)
    assert [p for p, _ in select_pixels(err, np.ones((4, 4)), low)] == [(0, 3)]


def test_sampling_config_validation():
    with pytest.raises(ValueError):
        SamplingConfig(top_fraction=0.0)
    with pytest.raises(ValueError):
        SamplingConfig(max_new_per_pass=0)
    cfg = SamplingConfig()
    assert cfg.due(3000) and cfg.due(4000) and not cfg.due(3500) and not cfg.due(16000)


# -- anchor injection

def test_injection_attributes_and_prefix(rng):
    cloud = random_cloud(rng, 5)
    cloud.positions[:] = [[0, 0, 0], [5, 5, 5], [6, 5, 5], [7, 5, 5], [8, 5, 5]]
    before = cloud.copy()
    opt = optimizer_for(cloud)
    knn = build_knn(cloud.positions, 2, 1.0)
    res = inject_anchors(cloud, None, [[1.0, 0, 0], [0, 2.0, 0]], [[1, 0, 0], [0.2, 0.4, 0.6]],
                         0.0, SamplingConfig(), opt, knn)
    assert res.count == 2 and cloud.n == 7
    for k, v in before.arrays().items():
        assert np.array_equal(getattr(cloud, k)[:5], v)
    np.testing.assert_allclose(cloud.log_scales[5], [0, 0, 0], atol=1e-15)
    np.testing.assert_allclose(cloud.log_scales[6], np.log(2.0) * np.ones(3))
    np.testing.assert_array_equal(cloud.rotations[5:], [[1, 0, 0, 0]] * 2)
    np.testing.assert_allclose(sigmoid(cloud.opacity_logits[5:]), 0.1, atol=1e-15)
    assert not cloud.sh_coeffs[5:, 1:].any()
    from dynsplat.gaussians import eval_sh_color
    col = eval_sh_color(cloud.sh_coeffs[6], np.array([0.0, 0.0, 1.0]), cloud.sh_degree)
    np.testing.assert_allclose(col, [0.2, 0.4, 0.6], atol=1e-12)
    assert knn.stale
    assert_rows_match(cloud, opt)
    assert not opt.state_arrays()["m/positions"][5:].any()


def test_single_gaussian_is_the_donor(rng):
    cloud = random_cloud(rng, 1)
    fld = DeformationField.create(10, cloud.embed_dim, temporal_dim=3, hidden=(8,), rng=rng)
    res = inject_anchors(cloud, fld, [[0.3, 0.1, 0.0]], [[0.5, 0.5, 0.5]], 0.5, SamplingConfig())
    assert res.donors.tolist() == [0]
    assert np.array_equal(cloud.embeddings[1], cloud.embeddings[0])


def test_donor_is_least_deformed(rng):
    cloud = random_cloud(rng, 3, embed_dim=2)
    cloud.embeddings[:] = [[1.0, 0.0], [0.0, 0.0], [3.0, 0.0]]
    fld = DeformationField.create(10, 2, temporal_dim=2, hidden=(4,), rng=rng)
    fld.weights[0][:] = 0.0
    fld.weights[0][2, :] = 1.0      # hidden = relu(e[0])
    fld.weights[-1][0, :] = 1.0     # every head grows with e[0]
    res = inject_anchors(cloud, fld, [[0, 0, 0]], [[0, 0, 0]], 0.2, SamplingConfig())
    assert res.donors.tolist() == [1]


def test_empty_cloud_rejected(rng):
    cloud = random_cloud(rng, 1)
    cloud.keep(np.zeros(1, dtype=bool))
    with pytest.raises(ValueError):
        inject_anchors(cloud, None, [[0, 0, 0]], [[0, 0, 0]], 0.0, SamplingConfig())


def test_anchor_reprojects_to_source_pixel(rng, tmp_path):
    cam = make_camera(32, 32)
    cloud = random_cloud(rng, 8, spread=0.2, scale=(0.15, 0.3))
    cloud.opacity_logits[:] = 3.0
    out = render_frame(cloud, None, cam, 0.0).out
    gt = np.zeros_like(out.color)
    cfg = SamplingConfig(top_fraction=0.02, error_threshold=0.01)
    res, picks = sample_anchors(cloud, None, out, gt, cam, 0.0, cfg)
    assert res.count == len(picks) > 0
    for ((u, v), d), p in zip(picks, res.positions):
        m = project(p, np.eye(3) * 1e-4, cam)["mean2d"]
        assert np.hypot(m[0] - (u + 0.5), m[1] - (v + 0.5)) < 0.5
    path = tmp_path / "anchors.csv"
    write_anchor_csv(path, 7, picks, res)
    rows = path.read_text().splitlines()
    assert rows[0] == "iter,u,v,depth,x,y,z,donor" and len(rows) == res.count + 1


# -- densification

def test_zero_gradients_only_prune(rng):
    cloud = random_cloud(rng, 4)
    cloud.opacity_logits[1] = logit(0.001)
    counts, keep = densify_and_prune(cloud, np.zeros(4), np.ones(4), DensifyConfig())
    assert counts == {"cloned": 0, "split": 0, "pruned": 1}
    assert cloud.n == 3 and keep.tolist() == [True, False, True, True]


def test_clone_small_gaussian(rng):
    cloud = random_cloud(rng, 3)
    cloud.opacity_logits[:] = 0.0
    cloud.log_scales[0] = np.log(0.001)
    opt = optimizer_for(cloud)
    knn = build_knn(cloud.positions, 1, 1.0)
    counts, _ = densify_and_prune(cloud, np.array([1.0, 0, 0]), np.ones(3), DensifyConfig(),
                                  opt, knn)
    assert counts["cloned"] == 1 and cloud.n == 4
    assert np.array_equal(cloud.embeddings[3], cloud.embeddings[0])
    assert knn.stale
    assert_rows_match(cloud, opt)


def test_split_large_gaussian(rng):
    cloud = random_cloud(rng, 2)
    cloud.opacity_logits[:] = 0.0
    cloud.log_scales[1] = np.log(0.2)
    s = cloud.log_scales[1].copy()
    opt = optimizer_for(cloud)
    counts, _ = densify_and_prune(cloud, np.array([0, 1.0]), np.ones(2), DensifyConfig(), opt,
                                  rng=np.random.default_rng(0))
    assert counts == {"cloned": 0, "split": 1, "pruned": 0}
    assert cloud.n == 3
    np.testing.assert_allclose(cloud.log_scales[1:], [s - np.log(1.6)] * 2)
    assert_rows_match(cloud, opt)


def test_max_gaussians_cap(rng):
    cloud = random_cloud(rng, 4)
    cloud.opacity_logits[:] = 0.0
    cloud.log_scales[:] = np.log(0.001)
    cfg = DensifyConfig(max_gaussians=5)
    counts, _ = densify_and_prune(cloud, np.array([1.0, 3.0, 2.0, 0.5]), np.ones(4), cfg)
    assert counts["cloned"] == 1 and cloud.n == 5
    assert np.array_equal(cloud.positions[4], cloud.positions[1])


def test_densify_config_validation():
    with pytest.raises(ValueError):
        DensifyConfig(start_iter=100, stop_iter=100)
    with pytest.raises(ValueError):
        DensifyConfig(prune_opacity=0.0)


def test_accumulator_size_checked(rng):
    with pytest.raises(ValueError):
        densify_and_prune(random_cloud(rng, 3), np.zeros(2), np.zeros(3), DensifyConfig())
