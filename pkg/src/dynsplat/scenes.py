"""Datasets: posed, timestamped images on disk, and a synthetic generator.

On-disk layout (``dynsplat-manifest v1``) is a JSON file next to the images::

    {
      "format": "dynsplat-manifest v1",
      "intrinsics": {"fx": .., "fy": .., "cx": .., "cy": .., "width": .., "height": ..},
      "init_points": "points.ply",
      "frames": [
        {"image": "images/c00_f000.png", "camera_to_world": [[...4 rows...]],
         "time": 0.0, "split": "train", "camera": 0},
        ...
      ]
    }

Intrinsics may also be given per frame, which overrides the shared block.
``camera_to_world`` is row-major, either 4x4 nested or 16 flat numbers.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .camera import Camera, look_at
from .errors import DataError
from .gaussians import build_covariance, read_ply, rgb_to_sh_dc, six_to_cov, write_ply
from .raster import project_gaussians, render_reference

MANIFEST_FORMAT = "dynsplat-manifest v1"
POSE_TOL = 1e-3
SPLITS = ("train", "test")


@dataclass
class Frame:
    camera: Camera
    t: float
    split: str = "train"
    camera_id: int = 0
    image: np.ndarray | None = None   # (H, W, 3) uint8
    path: str | None = None

    def rgb(self):
        """Image as float64 in [0, 1]."""
        if self.image is None:
            self.image = _read_png(self.path)
        return self.image.astype(np.float64) / 255.0


@dataclass
class SceneDataset:
    frames: list
    init_xyz: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    init_rgb: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    name: str = ""
    extras: dict = field(default_factory=dict)

    def split(self, which):
        return [f for f in self.frames if f.split == which]

    @property
    def train(self):
        return self.split("train")

    @property
    def test(self):
        return self.split("test")

    @property
    def n_times(self):
        return len({f.t for f in self.frames})

    def cameras(self):
        """Distinct cameras by id, in id order."""
        seen = {}
        for f in self.frames:
            seen.setdefault(f.camera_id, f.camera)
        return [seen[k] for k in sorted(seen)]

    def validate(self):
        if not any(f.split == "train" for f in self.frames):
            raise DataError("dataset has no train frames")
        for i, f in enumerate(self.frames):
            if not 0.0 <= f.t <= 1.0:
                raise DataError(f"frame {i}: time out of range ({f.t})")
            if f.image is not None and f.image.shape[:2] != (f.camera.height, f.camera.width):
                raise DataError(f"frame {i}: image is {f.image.shape[1]}x{f.image.shape[0]}, "
                                f"camera is {f.camera.width}x{f.camera.height}")
        return self


def _read_png(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except FileNotFoundError:
        raise DataError(f"missing image {path}") from None
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from None


def quantize(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img):
    """Float [0, 1] or uint8 image to 8-bit PNG."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = quantize(img)
    Image.fromarray(img).save(path)


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------

def _intrinsics(src, base, where):
    out = dict(base)
    out.update({k: src[k] for k in ("fx", "fy", "cx", "cy", "width", "height") if k in src})
    missing = [k for k in ("fx", "fy", "cx", "cy", "width", "height") if k not in out]
    if missing:
        raise DataError(f"{where}: missing intrinsics {missing}")
    return out


def load_dataset(manifest_path, load_images=True):
    """Read a ``dynsplat-manifest v1`` dataset."""
    manifest_path = os.fspath(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    try:
        with open(manifest_path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"manifest {manifest_path} not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {manifest_path} is not valid JSON: {exc}") from None
    if doc.get("format") != MANIFEST_FORMAT:
        raise DataError(f"manifest format {doc.get('format')!r}, expected {MANIFEST_FORMAT!r}")
    shared = doc.get("intrinsics", {})
    frames = []
    for i, fd in enumerate(doc.get("frames", [])):
        name = f"frame {i} ({fd.get('image', '?')})"
        try:
            t = float(fd["time"])
            c2w = np.asarray(fd["camera_to_world"], dtype=np.float64)
            img_rel = fd["image"]
        except KeyError as exc:
            raise DataError(f"{name}: missing field {exc}") from None
        if not 0.0 <= t <= 1.0:
            raise DataError(f"{name}: time out of range ({t})")
        if c2w.size != 16:
            raise DataError(f"{name}: camera_to_world must have 16 entries")
        split = fd.get("split", "train")
        if split not in SPLITS:
            raise DataError(f"{name}: unknown split {split!r}")
        intr = _intrinsics(fd, shared, name)
        cam = Camera(c2w.reshape(4, 4), float(intr["fx"]), float(intr["fy"]), float(intr["cx"]),
                     float(intr["cy"]), int(intr["width"]), int(intr["height"]))
        cam.validate(POSE_TOL, name)
        path = os.path.join(root, img_rel)
        if not os.path.exists(path):
            raise DataError(f"{name}: missing image {path}")
        frame = Frame(camera=cam, t=t, split=split, camera_id=int(fd.get("camera", i)), path=path)
        if load_images:
            frame.image = _read_png(path)
        frames.append(frame)
    ds = SceneDataset(frames=frames, name=doc.get("name", ""))
    if doc.get("init_points"):
        ds.init_xyz, ds.init_rgb = load_points(os.path.join(root, doc["init_points"]))
    return ds.validate()


def load_points(path):
    cols = read_ply(path)
    try:
        xyz = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    except KeyError as exc:
        raise DataError(f"{path}: missing PLY property {exc}") from None
    if all(k in cols for k in ("red", "green", "blue")):
        rgb = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1).astype(np.float64)
        if cols["red"].dtype == np.uint8:
            rgb /= 255.0
    else:
        rgb = np.full((len(xyz), 3), 0.5)
    return xyz, rgb


def save_points(path, xyz, rgb):
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    rgb8 = quantize(np.asarray(rgb, dtype=np.float64).reshape(-1, 3))
    write_ply(path, {"x": xyz[:, 0].astype(np.float32), "y": xyz[:, 1].astype(np.float32),
                     "z": xyz[:, 2].astype(np.float32), "red": rgb8[:, 0],
                     "green": rgb8[:, 1], "blue": rgb8[:, 2]})


def write_dataset(ds, out_dir):
    """Write images, init points and manifest; returns the manifest path."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    frames = []
    for i, f in enumerate(ds.frames):
        rel = f"images/c{f.camera_id:02d}_{i:05d}.png"
        img = f.image if f.image is not None else _read_png(f.path)
        write_png(os.path.join(out_dir, rel), img)
        c = f.camera
        frames.append({"image": rel, "camera_to_world": c.camera_to_world.tolist(),
                       "time": f.t, "split": f.split, "camera": f.camera_id,
                       "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                       "width": c.width, "height": c.height})
    doc = {"format": MANIFEST_FORMAT, "name": ds.name, "frames": frames}
    if len(ds.init_xyz):
        save_points(os.path.join(out_dir, "points.ply"), ds.init_xyz, ds.init_rgb)
        doc["init_points"] = "points.ply"
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return path


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class Primitive:
    """Analytic Gaussian; per-axis trajectory ``c + v t + a sin(2 pi f t + phase)``."""

    center: tuple
    scale: tuple
    rgb: tuple
    alpha: float = 0.9
    quat: tuple = (1.0, 0.0, 0.0, 0.0)
    velocity: tuple = (0.0, 0.0, 0.0)
    amplitude: tuple = (0.0, 0.0, 0.0)
    frequency: tuple = (1.0, 1.0, 1.0)
    phase: tuple = (0.0, 0.0, 0.0)
    # opacity modulation alpha * (1 - depth * (0.5 - 0.5 cos(2 pi f t))); 0 keeps it fixed
    alpha_dip: float = 0.0
    alpha_freq: float = 1.0

    def position(self, t):
        c, v, a = np.asarray(self.center), np.asarray(self.velocity), np.asarray(self.amplitude)
        f, p = np.asarray(self.frequency), np.asarray(self.phase)
        return c + v * t + a * np.sin(2.0 * np.pi * f * t + p)

    def opacity(self, t):
        dip = self.alpha_dip * (0.5 - 0.5 * np.cos(2.0 * np.pi * self.alpha_freq * t))
        return self.alpha * (1.0 - dip)


@dataclass
class SyntheticSceneSpec:
    primitives: list
    n_cameras: int = 9
    radius: float = 3.0
    elevation: float = 0.6
    arc_degrees: float = 100.0
    target: tuple = (0.0, 0.0, 0.0)
    test_cameras: tuple = (4,)
    n_frames: int = 60
    width: int = 64
    height_px: int = 64
    fov_degrees: float = 40.0
    points_per_primitive: int = 16
    point_jitter: float = 0.02
    decimate_fraction: float = 0.0
    mask_box: tuple | None = None     # ((xmin, ymin, zmin), (xmax, ymax, zmax))
    seed: int = 0
    name: str = "synthetic"

    def validate(self):
        if not self.primitives:
            raise DataError("synthetic spec needs at least one primitive")
        for i, p in enumerate(self.primitives):
            if not 0.0 < p.alpha < 1.0:
                raise DataError(f"primitive {i}: alpha must lie in (0, 1)")
            if not 0.0 <= p.alpha_dip < 1.0:
                raise DataError(f"primitive {i}: alpha_dip must lie in [0, 1)")
            if min(p.scale) <= 0:
                raise DataError(f"primitive {i}: scales must be positive")
        if self.n_cameras < 1 or self.n_frames < 1:
            raise DataError("need at least one camera and one frame")
        if not 0.0 <= self.decimate_fraction <= 1.0:
            raise DataError("decimate_fraction must lie in [0, 1]")
        return self


def rig_cameras(spec):
    """Cameras on a horizontal arc around ``target``, all looking at it."""
    f = 0.5 * spec.width / np.tan(0.5 * np.radians(spec.fov_degrees))
    target = np.asarray(spec.target, dtype=np.float64)
    n = spec.n_cameras
    span = np.radians(spec.arc_degrees)
    angles = [0.0] if n == 1 else np.linspace(-0.5 * span, 0.5 * span, n)
    cams = []
    for a in angles:
        eye = target + np.array([spec.radius * np.sin(a), -spec.radius * np.cos(a), spec.elevation])
        cams.append(Camera(look_at(eye, target), f, f, 0.5 * spec.width, 0.5 * spec.height_px,
                           spec.width, spec.height_px))
    return cams


def frame_times(n_frames):
    return [0.0] if n_frames == 1 else [i / (n_frames - 1) for i in range(n_frames)]


def scene_state(spec, t):
    """World-space Gaussians of the analytic scene at time ``t``."""
    pos = np.array([p.position(t) for p in spec.primitives])
    cov = np.array([six_to_cov(build_covariance(np.asarray(p.scale, dtype=np.float64),
                                                np.asarray(p.quat, dtype=np.float64)))
                    for p in spec.primitives])
    alpha = np.array([p.opacity(t) for p in spec.primitives])
    sh = rgb_to_sh_dc(np.array([p.rgb for p in spec.primitives], dtype=np.float64))[:, None, :]
    return pos, cov, alpha, sh


def render_gt(spec, cam, t):
    pos, cov, alpha, sh = scene_state(spec, t)
    splats, _ = project_gaussians(pos, cov, alpha, sh, 0, cam)
    return render_reference(splats, cam)


def _in_frustum(cam, pts):
    pc = cam.world_to_camera(pts)
    z = pc[:, 2]
    ok = z > 0.01
    zs = np.where(ok, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    return ok & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)


def generate_synthetic(spec):
    """Render every (camera, frame) of ``spec`` with the reference renderer.

    Images are quantised to 8 bits exactly as they would be stored on disk.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    cams = rig_cameras(spec)
    times = frame_times(spec.n_frames)
    for t in times:
        pos = np.array([p.position(t) for p in spec.primitives])
        seen = np.zeros(len(pos), dtype=bool)
        for cam in cams:
            seen |= _in_frustum(cam, pos)
        if not seen.all():
            bad = int(np.flatnonzero(~seen)[0])
            raise DataError(f"primitive {bad} leaves every camera frustum at t={t:.4f}")
    frames = []
    test = set(spec.test_cameras)
    for ci, cam in enumerate(cams):
        split = "test" if ci in test else "train"
        for t in times:
            frames.append(Frame(camera=cam, t=float(t), split=split, camera_id=ci,
                                image=quantize(render_gt(spec, cam, t))))
    # init points: samples of each primitive at t=0, jittered
    xyz, rgb = [], []
    for p in spec.primitives:
        c = p.position(0.0)
        m = spec.points_per_primitive
        local = rng.standard_normal((m, 3)) * np.asarray(p.scale)
        xyz.append(c + local + rng.standard_normal((m, 3)) * spec.point_jitter)
        rgb.append(np.tile(np.asarray(p.rgb, dtype=np.float64), (m, 1)))
    xyz = np.concatenate(xyz)
    rgb = np.concatenate(rgb)
    if spec.mask_box is not None and spec.decimate_fraction > 0:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in spec.mask_box)
        inside = np.all((xyz >= lo) & (xyz <= hi), axis=1)
        drop = inside & (rng.random(len(xyz)) < spec.decimate_fraction)
        if spec.decimate_fraction >= 1.0:
            drop = inside
        xyz, rgb = xyz[~drop], rgb[~drop]
    ds = SceneDataset(frames=frames, init_xyz=xyz, init_rgb=rgb, name=spec.name)
    ds.extras["spec"] = spec
    return ds.validate()


# ---------------------------------------------------------------------------
# canned scenes
# ---------------------------------------------------------------------------

def orbit_blobs(**overrides):
    """Five coloured blobs on independent smooth trajectories, 8+1 cameras."""
    prims = [
        Primitive(center=(0.0, 0.0, 0.0), scale=(0.18, 0.12, 0.10), rgb=(0.9, 0.2, 0.2),
                  alpha=0.9, quat=(0.92, 0.2, 0.3, 0.1), amplitude=(0.25, 0.0, 0.1),
                  phase=(0.0, 0.0, 1.0)),
        Primitive(center=(0.45, 0.2, 0.25), scale=(0.10, 0.10, 0.14), rgb=(0.2, 0.85, 0.3),
                  alpha=0.85, amplitude=(0.0, 0.15, 0.15), phase=(0.0, 0.5, 2.0)),
        Primitive(center=(-0.45, 0.1, -0.2), scale=(0.14, 0.08, 0.08), rgb=(0.25, 0.35, 0.95),
                  alpha=0.9, quat=(0.8, 0.0, 0.0, 0.6), velocity=(0.3, 0.0, 0.0)),
        Primitive(center=(0.1, -0.3, 0.35), scale=(0.08, 0.08, 0.08), rgb=(0.95, 0.85, 0.2),
                  alpha=0.8, amplitude=(0.2, 0.0, 0.0), frequency=(2.0, 1.0, 1.0)),
        Primitive(center=(-0.15, 0.3, -0.45), scale=(0.2, 0.1, 0.06), rgb=(0.8, 0.3, 0.85),
                  alpha=0.75, quat=(0.9, 0.3, 0.0, 0.3), amplitude=(0.0, 0.0, 0.12),
                  phase=(0.0, 0.0, 0.5)),
    ]
    kw = dict(primitives=prims, n_cameras=9, test_cameras=(4,), n_frames=60, width=64,
              height_px=64, radius=2.4, name="orbit-blobs")
    kw.update(overrides)
    return SyntheticSceneSpec(**kw)


def dim_shadow(**overrides):
    """Dark, low-contrast scene with a shadow blob that fades in and out."""
    prims = [
        Primitive(center=(0.0, 0.35, 0.0), scale=(0.6, 0.05, 0.5), rgb=(0.22, 0.2, 0.18),
                  alpha=0.95),
        Primitive(center=(-0.2, 0.1, 0.1), scale=(0.14, 0.1, 0.12), rgb=(0.3, 0.26, 0.2),
                  alpha=0.9, amplitude=(0.15, 0.0, 0.0)),
        Primitive(center=(0.25, 0.0, -0.1), scale=(0.22, 0.06, 0.18), rgb=(0.03, 0.03, 0.04),
                  alpha=0.85, alpha_dip=0.97, alpha_freq=1.0),
        Primitive(center=(0.15, 0.05, 0.3), scale=(0.08, 0.08, 0.08), rgb=(0.35, 0.3, 0.28),
                  alpha=0.85, amplitude=(0.0, 0.0, 0.1), phase=(0.0, 0.0, 1.5)),
    ]
    kw = dict(primitives=prims, n_cameras=7, test_cameras=(3,), n_frames=30, width=48,
              height_px=48, name="dim-shadow")
    kw.update(overrides)
    return SyntheticSceneSpec(**kw)


CANNED = {"orbit-blobs": orbit_blobs, "dim-shadow": dim_shadow}
