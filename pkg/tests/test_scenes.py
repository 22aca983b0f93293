import json

import numpy as np
import pytest

from conftest import make_camera
from dynsplat.errors import DataError
from dynsplat.scenes import (MANIFEST_FORMAT, Primitive, SyntheticSceneSpec, dim_shadow,
                             generate_synthetic, load_dataset, load_points, orbit_blobs,
                             rig_cameras, save_points, write_dataset, write_png)


def tiny_spec(**kw):
    prims = [Primitive(center=(0, 0, 0), scale=(0.2, 0.2, 0.2), rgb=(0.8, 0.3, 0.1), alpha=0.8)]
    base = dict(primitives=prims, n_cameras=2, test_cameras=(1,), n_frames=3, width=16,
                height_px=16)
    base.update(kw)
    return SyntheticSceneSpec(**base)


def write_manifest(tmp_path, frames, **extra):
    cam = make_camera(8, 8)
    (tmp_path / "img").mkdir(exist_ok=True)
    write_png(tmp_path / "img" / "a.png", np.zeros((8, 8, 3)))
    doc = {"format": MANIFEST_FORMAT,
           "intrinsics": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                          "width": 8, "height": 8},
           "frames": [{"image": "img/a.png", "camera_to_world": cam.camera_to_world.tolist(),
                       **f} for f in frames], **extra}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


def test_minimal_manifest(tmp_path):
    ds = load_dataset(write_manifest(tmp_path, [{"time": 0.0}, {"time": 1.0, "split": "test"}]))
    assert len(ds.frames) == 2 and {f.t for f in ds.frames} == {0.0, 1.0}
    assert ds.frames[0].rgb().shape == (8, 8, 3)


def test_time_out_of_range(tmp_path):
    with pytest.raises(DataError, match="time out of range"):
        load_dataset(write_manifest(tmp_path, [{"time": 1.5}]))


def test_missing_image_names_frame(tmp_path):
    path = write_manifest(tmp_path, [{"time": 0.0}, {"time": 0.5, "image": "img/nope.png"}])
    with pytest.raises(DataError, match="frame 1"):
        load_dataset(path)


def test_bad_rotation_names_frame(tmp_path):
    m = np.eye(4)
    m[0, 0] = 1.01
    path = write_manifest(tmp_path, [{"time": 0.0}, {"time": 0.2, "camera_to_world": m.tolist()}])
    with pytest.raises(DataError, match="frame 1"):
        load_dataset(path)


def test_no_train_frames(tmp_path):
    with pytest.raises(DataError, match="train"):
        load_dataset(write_manifest(tmp_path, [{"time": 0.0, "split": "test"}]))


def test_points_roundtrip(tmp_path):
    xyz = np.array([[0.5, -1.25, 2.0], [1.0, 0.0, 3.5]])
    rgb = np.array([[1.0, 0.0, 0.5], [0.2, 0.4, 0.6]])
    save_points(tmp_path / "p.ply", xyz, rgb)
    x2, c2 = load_points(tmp_path / "p.ply")
    np.testing.assert_array_equal(x2, xyz)
    np.testing.assert_allclose(c2, rgb, atol=0.5 / 255)


def test_synthetic_roundtrip(tmp_path):
    ds = generate_synthetic(tiny_spec())
    back = load_dataset(write_dataset(ds, tmp_path))
    assert len(back.frames) == len(ds.frames)
    for a, b in zip(ds.frames, back.frames):
        np.testing.assert_allclose(a.camera.camera_to_world, b.camera.camera_to_world, atol=1e-9)
        assert a.t == b.t and a.split == b.split
        assert np.array_equal(a.image, b.image)
    assert len(back.init_xyz) == len(ds.init_xyz)


def test_static_scene_constant_over_time():
    ds = generate_synthetic(tiny_spec())
    imgs = [f.image for f in ds.frames if f.camera_id == 0]
    assert all(np.array_equal(imgs[0], im) for im in imgs[1:])


def test_linear_trajectory_projects_linearly():
    # camera at the origin looking down +z: fronto-parallel motion along x
    from dynsplat.camera import Camera
    from dynsplat.scenes import scene_state
    from dynsplat.raster import project_gaussians
    spec = tiny_spec(primitives=[Primitive(center=(-0.3, 0.0, 3.0), scale=(0.1,) * 3,
                                           rgb=(1, 1, 1), velocity=(0.6, 0.0, 0.0))])
    cam = Camera(np.eye(4), 50.0, 50.0, 8.0, 8.0, 16, 16)
    us = []
    for t in (0.0, 0.25, 0.5, 1.0):
        pos, cov, a, sh = scene_state(spec, t)
        us.append(project_gaussians(pos, cov, a, sh, 0, cam)[0].means2d[0, 0])
    np.testing.assert_allclose(np.diff(us) / [0.25, 0.25, 0.5], 50.0 * 0.6 / 3.0, rtol=1e-12)


def test_full_decimation_empties_box():
    box = ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    spec = orbit_blobs(n_frames=2, decimate_fraction=1.0, mask_box=box)
    xyz = generate_synthetic(spec).init_xyz
    lo, hi = np.array(box)
    assert len(xyz) > 0
    assert not np.all((xyz >= lo) & (xyz <= hi), axis=1).any()


def test_partial_decimation_keeps_some():
    box = ((-0.4, -0.3, -0.25), (0.4, 0.3, 0.45))
    full = generate_synthetic(orbit_blobs(n_frames=2)).init_xyz
    part = generate_synthetic(orbit_blobs(n_frames=2, decimate_fraction=0.8, mask_box=box)).init_xyz
    inside = lambda x: np.all((x >= box[0]) & (x <= box[1]), axis=1).sum()  # noqa: E731
    assert 0 < inside(part) < inside(full)


def test_bitwise_reproducible():
    a = generate_synthetic(orbit_blobs(n_frames=3))
    b = generate_synthetic(orbit_blobs(n_frames=3))
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a.frames, b.frames))
    assert np.array_equal(a.init_xyz, b.init_xyz)


def test_rig_rotations_orthonormal():
    for cam in rig_cameras(orbit_blobs()) + rig_cameras(dim_shadow()):
        R = cam.camera_to_world[:3, :3]
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)


def test_canned_shapes():
    ob = generate_synthetic(orbit_blobs(n_frames=2))
    assert len(ob.extras["spec"].primitives) == 5
    assert len({f.camera_id for f in ob.train}) == 8 and len({f.camera_id for f in ob.test}) == 1
    assert ob.frames[0].image.shape == (64, 64, 3)
    assert orbit_blobs().n_frames == 60
    ds = generate_synthetic(dim_shadow(n_frames=2))
    assert max(f.image.max() for f in ds.frames) < 128  # low-luminance palette


def test_primitive_leaving_frusta_rejected():
    spec = tiny_spec(primitives=[Primitive(center=(0, 0, 0), scale=(0.1,) * 3, rgb=(1, 1, 1),
                                           velocity=(50.0, 0.0, 0.0))])
    with pytest.raises(DataError, match="primitive 0"):
        generate_synthetic(spec)


def test_spec_validation():
    with pytest.raises(DataError):
        tiny_spec(primitives=[Primitive(center=(0, 0, 0), scale=(0.1,) * 3, rgb=(1, 1, 1),
                                        alpha=1.0)]).validate()
    with pytest.raises(DataError):
        tiny_spec(decimate_fraction=1.5).validate()
