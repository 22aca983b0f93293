"""EWA projection of 3D Gaussians to screen-space splats, with its adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..gaussians import normalize_backward, sh_colors, sh_colors_backward, six_to_cov

NEAR_PLANE = 0.01
DILATION = 0.3
DET_EPS = 1e-12


@dataclass
class Splats:
    """Screen-space splats for one view; rows align with the input Gaussians.

    Culled rows keep their slot with ``valid == False`` so indices stay stable.
    """

    means2d: np.ndarray      # (N, 2) pixels
    cov2d: np.ndarray        # (N, 2, 2) after dilation
    conics: np.ndarray       # (N, 3) inverse cov2d as (a, b, c)
    depth_z: np.ndarray      # (N,)
    depth_euclid: np.ndarray  # (N,)
    colors: np.ndarray       # (N, 3)
    opacity: np.ndarray      # (N,) alpha after the opacity mode
    valid: np.ndarray        # (N,) bool
    n_degenerate: int = 0

    @property
    def n(self):
        return self.means2d.shape[0]

    @classmethod
    def from_arrays(cls, means2d, conics, opacity, colors, depth_z=None, depth_euclid=None):
        """Build splats directly in screen space (fixtures, benchmarks)."""
        means2d = np.asarray(means2d, dtype=np.float64).reshape(-1, 2)
        n = means2d.shape[0]
        conics = np.asarray(conics, dtype=np.float64).reshape(n, 3)
        a, b, c = conics[:, 0], conics[:, 1], conics[:, 2]
        det = a * c - b * b
        cov2d = np.stack([np.stack([c, -b], -1), np.stack([-b, a], -1)], -2) / det[:, None, None]
        depth_z = np.arange(n, dtype=np.float64) + 1.0 if depth_z is None else depth_z
        depth_euclid = depth_z if depth_euclid is None else depth_euclid
        return cls(means2d=means2d, cov2d=cov2d, conics=conics,
                   depth_z=np.asarray(depth_z, dtype=np.float64),
                   depth_euclid=np.asarray(depth_euclid, dtype=np.float64),
                   colors=np.asarray(colors, dtype=np.float64).reshape(n, 3),
                   opacity=np.asarray(opacity, dtype=np.float64).reshape(n),
                   valid=np.ones(n, dtype=bool))


@dataclass
class ProjectionCache:
    p_cam: np.ndarray
    J: np.ndarray
    T: np.ndarray
    cov3d: np.ndarray
    view_vec: np.ndarray
    sh: np.ndarray
    sh_degree: int
    raw_colors: np.ndarray


def project_gaussians(positions, cov3d, opacity, sh, sh_degree, cam):
    """Project ``N`` Gaussians (full 3x3 covariances) into ``cam``.

    Returns ``(splats, cache)``; the cache feeds :func:`project_backward`.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    W = cam.world_to_camera_rotation
    view_vec = positions - cam.center
    p_cam = view_vec @ W.T
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    valid = z > NEAR_PLANE
    zs = np.where(valid, z, 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / (zs * zs)
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / (zs * zs)
    T = J @ W
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    degenerate = valid & ~(det > DET_EPS)
    valid &= ~degenerate
    dets = np.where(valid, det, 1.0)
    conics = np.stack([cov2d[:, 1, 1] / dets, -cov2d[:, 0, 1] / dets, cov2d[:, 0, 0] / dets], -1)
    means2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], -1)
    depth_euclid = np.linalg.norm(view_vec, axis=1)
    dirs = view_vec / np.maximum(depth_euclid, 1e-12)[:, None]
    colors, raw = sh_colors(sh, dirs, sh_degree)
    splats = Splats(means2d=means2d, cov2d=cov2d, conics=conics, depth_z=z,
                    depth_euclid=depth_euclid, colors=colors,
                    opacity=np.asarray(opacity, dtype=np.float64), valid=valid,
                    n_degenerate=int(degenerate.sum()))
    cache = ProjectionCache(p_cam=p_cam, J=J, T=T, cov3d=cov3d, view_vec=view_vec,
                            sh=sh, sh_degree=sh_degree, raw_colors=raw)
    return splats, cache


def project_backward(splats, cache, cam, d_means2d, d_conics, d_colors):
    """Adjoint of :func:`project_gaussians`.

    Returns ``(d_positions, d_cov3d, d_sh)``. Rows of culled splats are zero.
    """
    v = splats.valid
    n = splats.n
    d_pos = np.zeros((n, 3))
    d_cov3d = np.zeros((n, 3, 3))
    d_sh = np.zeros_like(cache.sh)
    if not v.any():
        return d_pos, d_cov3d, d_sh
    W = cam.world_to_camera_rotation
    idx = np.flatnonzero(v)
    p = cache.p_cam[idx]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    fx, fy = cam.fx, cam.fy

    # conic = inv(cov2d); the kernel uses b twice, so the symmetric gradient halves it
    dc = d_conics[idx]
    G = np.empty((len(idx), 2, 2))
    G[:, 0, 0] = dc[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * dc[:, 1]
    G[:, 1, 1] = dc[:, 2]
    a, b, c = (splats.conics[idx, k] for k in range(3))
    Q = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    d_cov2d = -Q @ G @ Q

    T = cache.T[idx]
    cov3d = cache.cov3d[idx]
    d_cov3d[idx] = np.swapaxes(T, 1, 2) @ d_cov2d @ T
    dT = 2.0 * d_cov2d @ T @ cov3d
    dJ = dT @ W.T

    dpc = np.zeros((len(idx), 3))
    iz2 = 1.0 / (z * z)
    iz3 = iz2 / z
    dpc[:, 0] += dJ[:, 0, 2] * (-fx * iz2)
    dpc[:, 1] += dJ[:, 1, 2] * (-fy * iz2)
    dpc[:, 2] += (dJ[:, 0, 0] * (-fx * iz2) + dJ[:, 0, 2] * (2.0 * fx * x * iz3)
                  + dJ[:, 1, 1] * (-fy * iz2) + dJ[:, 1, 2] * (2.0 * fy * y * iz3))
    dm = d_means2d[idx]
    dpc[:, 0] += dm[:, 0] * fx / z
    dpc[:, 1] += dm[:, 1] * fy / z
    dpc[:, 2] += -dm[:, 0] * fx * x * iz2 - dm[:, 1] * fy * y * iz2
    d_pos[idx] = dpc @ W

    vv = cache.view_vec[idx]
    norms = splats.depth_euclid[idx][:, None]
    dirs = vv / norms
    d_sh_v, d_dir = sh_colors_backward(cache.sh[idx], dirs, cache.sh_degree,
                                       cache.raw_colors[idx], d_colors[idx])
    d_sh[idx] = d_sh_v
    d_pos[idx] += normalize_backward(vv, norms, d_dir)
    return d_pos, d_cov3d, d_sh


def project(mu, cov, cam):
    """Project a single Gaussian; ``cov`` may be 6 unique entries or a 3x3 matrix.

    Returns ``None`` when the Gaussian is culled (behind the near plane).
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape == (6,):
        cov = six_to_cov(cov)
    sh = np.zeros((1, 1, 3))
    splats, _ = project_gaussians(np.asarray(mu, dtype=np.float64)[None], cov[None],
                                  np.ones(1), sh, 0, cam)
    if not splats.valid[0]:
        return None
    return {
        "mean2d": splats.means2d[0],
        "cov2d": splats.cov2d[0],
        "depth_euclidean": float(splats.depth_euclid[0]),
        "depth_z": float(splats.depth_z[0]),
    }
