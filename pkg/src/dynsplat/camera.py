"""Pinhole camera in the OpenCV convention (+x right, +y down, +z forward)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class Camera:
    camera_to_world: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64).reshape(4, 4)
        self.width = int(self.width)
        self.height = int(self.height)

    def validate(self, tol=1e-6, name="camera"):
        R = self.camera_to_world[:3, :3]
        err = np.abs(R @ R.T - np.eye(3)).max()
        if not np.isfinite(err) or err > tol:
            raise DataError(f"{name}: rotation block not orthonormal (error {err:.3g})")
        if not (self.fx > 0 and self.fy > 0):
            raise DataError(f"{name}: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError(f"{name}: principal point outside the image")
        return self

    @property
    def center(self):
        return self.camera_to_world[:3, 3].copy()

    @property
    def rotation_c2w(self):
        return self.camera_to_world[:3, :3]

    @property
    def world_to_camera_rotation(self):
        return self.camera_to_world[:3, :3].T

    def world_to_camera(self, pts):
        """Camera-frame coordinates of world points ``(N, 3)``."""
        return (np.asarray(pts, dtype=np.float64) - self.center) @ self.rotation_c2w

    def pixel_ray(self, u, v):
        """Unit world-space ray through the centre of pixel ``(u, v)``."""
        d = np.array([(u + 0.5 - self.cx) / self.fx, (v + 0.5 - self.cy) / self.fy, 1.0])
        d = self.rotation_c2w @ d
        return d / np.linalg.norm(d)

    def to_dict(self):
        return {
            "camera_to_world": self.camera_to_world.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target``.

    ``up`` is the world direction that should appear towards the top of the
    image (camera -y).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, fwd, eye
    return m


def backproject(pixel, depth, cam):
    """World point at Euclidean distance ``depth`` along the ray through ``pixel``'s centre."""
    if not depth > 0:
        raise ValueError("depth must be positive")
    u, v = pixel
    return cam.center + depth * cam.pixel_ray(u, v)
