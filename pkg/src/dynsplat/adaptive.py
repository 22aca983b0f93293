"""Density control for the canonical field.

Two mechanisms live here. The usual gradient-triggered clone/split/prune
and anchor injection: pixels the current model gets badly wrong are lifted
to 3D at their median depth and seeded with cheaply initialised Gaussians.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import backproject
from .deform import DeformationDelta
from .gaussians import (PER_GAUSSIAN_FIELDS, logit, num_sh_coeffs, quat_to_rotmat, rgb_to_sh_dc,
                        sigmoid)

MIN_ANCHOR_DISTANCE = 1e-6


@dataclass
class SamplingConfig:
    error_threshold: float = 0.10
    top_fraction: float = 0.001
    max_new_per_pass: int = 5000
    anchor_opacity: float = 0.1
    neighbor_pool: int = 8
    interval: int = 1000
    start_iter: int = 3000
    stop_iter: int = 15000

    def __post_init__(self):
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError("top_fraction must lie in (0, 1]")
        if self.max_new_per_pass < 1:
            raise ValueError("max_new_per_pass must be >= 1")
        if not 0.0 < self.anchor_opacity < 1.0:
            raise ValueError("anchor_opacity must lie in (0, 1)")
        if self.neighbor_pool < 1:
            raise ValueError("neighbor_pool must be >= 1")

    def due(self, it):
        return (self.interval > 0 and self.start_iter <= it <= self.stop_iter
                and (it - self.start_iter) % self.interval == 0)


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    split_scale_threshold: float = 0.01
    prune_opacity: float = 0.005
    interval: int = 100
    start_iter: int = 500
    stop_iter: int = 15000
    max_gaussians: int = 200_000

    def __post_init__(self):
        if self.grad_threshold <= 0 or self.split_scale_threshold <= 0 or self.prune_opacity <= 0:
            raise ValueError("densification thresholds must be positive")
        if self.start_iter >= self.stop_iter:
            raise ValueError("densify start_iter must be < stop_iter")

    def due(self, it):
        return (self.interval > 0 and self.start_iter <= it < self.stop_iter
                and it % self.interval == 0)


def error_map(render, gt):
    render = np.asarray(render, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if render.shape != gt.shape:
        raise ValueError(f"image size mismatch: {render.shape} vs {gt.shape}")
    return np.abs(render - gt).mean(axis=2)


def select_pixels(err, median_depth, cfg):
    """High-error pixels with a surface estimate, as ``[((u, v), depth), ...]``.

    A pixel qualifies when its error reaches ``error_threshold``, it is in the
    top ``top_fraction`` of all pixels by error and its median depth is
    finite. Ordered by error (descending) then row-major, truncated to
    ``max_new_per_pass``.
    """
    err = np.asarray(err, dtype=np.float64)
    median_depth = np.asarray(median_depth, dtype=np.float64)
    if err.shape != median_depth.shape:
        raise ValueError("error and depth maps differ in size")
    flat = err.ravel()
    order = np.argsort(-flat, kind="stable")  # stable keeps row-major among ties
    n_top = max(1, int(np.ceil(cfg.top_fraction * flat.size)))
    order = order[:n_top]
    depth = median_depth.ravel()[order]
    ok = (flat[order] >= cfg.error_threshold) & (flat[order] > 0) & np.isfinite(depth) \
        & (depth > 0)
    order = order[ok][:cfg.max_new_per_pass]
    W = err.shape[1]
    return [((int(i % W), int(i // W)), float(median_depth.ravel()[i])) for i in order]


@dataclass
class InjectionResult:
    count: int
    donors: np.ndarray
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


def _delta_at(cloud, fld, t):
    if fld is None:
        return DeformationDelta.zeros(cloud.n, cloud.sh_degree)
    delta, _ = fld.forward(cloud.embeddings, t)
    return delta


def inject_anchors(cloud, fld, coords, pixel_colors, t, cfg, optimizer=None, knn=None):
    """Append one canonical Gaussian per world point in ``coords``.

    Scale comes from the distance to the nearest existing canonical Gaussian,
    rotation is the identity, opacity is ``cfg.anchor_opacity`` and the DC
    colour reproduces ``pixel_colors``. The embedding is copied from the least
    deformed of the ``neighbor_pool`` nearest Gaussians in deformed space at
    time ``t``.
    """
    if cloud.n == 0:
        raise ValueError("anchor injection needs a non-empty cloud")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    m = coords.shape[0]
    if m == 0:
        return InjectionResult(0, np.zeros(0, dtype=np.int64))
    colors = np.asarray(pixel_colors, dtype=np.float64).reshape(m, 3)

    d_canon = np.sqrt(((coords[:, None, :] - cloud.positions[None]) ** 2).sum(-1)).min(axis=1)
    log_s = np.log(np.maximum(d_canon, MIN_ANCHOR_DISTANCE))

    delta = _delta_at(cloud, fld, t)
    deformed = cloud.positions + delta.dmu
    mag = delta.magnitude()
    pool = min(cfg.neighbor_pool, cloud.n)
    d_def = ((coords[:, None, :] - deformed[None]) ** 2).sum(-1)
    donors = np.empty(m, dtype=np.int64)
    for i in range(m):
        near = np.lexsort((np.arange(cloud.n), d_def[i]))[:pool]
        donors[i] = near[np.lexsort((near, mag[near]))[0]]

    K = num_sh_coeffs(cloud.sh_degree)
    sh = np.zeros((m, K, 3))
    sh[:, 0, :] = rgb_to_sh_dc(colors)
    rot = np.zeros((m, 4))
    rot[:, 0] = 1.0
    cloud.append(
        positions=coords,
        log_scales=np.repeat(log_s[:, None], 3, axis=1),
        rotations=rot,
        opacity_logits=np.full(m, float(logit(cfg.anchor_opacity))),
        sh_coeffs=sh,
        embeddings=cloud.embeddings[donors].copy(),
    )
    if optimizer is not None:
        optimizer.append_rows(PER_GAUSSIAN_FIELDS, m)
    if knn is not None:
        knn.stale = True
    return InjectionResult(m, donors, coords.copy())


def sample_anchors(cloud, fld, out, gt, cam, t, cfg, optimizer=None, knn=None):
    """One sampling pass from a rendered view: error map -> pixels -> anchors."""
    picks = select_pixels(error_map(out.color, gt), out.median_depth, cfg)
    if not picks:
        return InjectionResult(0, np.zeros(0, dtype=np.int64)), picks
    coords = np.array([backproject(px, d, cam) for px, d in picks])
    colors = np.array([gt[v, u] for (u, v), _ in picks])
    return inject_anchors(cloud, fld, coords, colors, t, cfg, optimizer, knn), picks


def write_anchor_csv(path, it, picks, result):
    """Append injected anchors as ``iter,u,v,depth,x,y,z,donor`` rows."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["iter", "u", "v", "depth", "x", "y", "z", "donor"])
        for ((u, v), d), p, donor in zip(picks, result.positions, result.donors):
            w.writerow([it, u, v, repr(d), repr(p[0]), repr(p[1]), repr(p[2]), int(donor)])


def densify_and_prune(cloud, grad_accum, grad_count, cfg, optimizer=None, knn=None, rng=None):
    """Clone small / split large high-gradient Gaussians, then prune faint ones.

    ``grad_accum / grad_count`` is the mean screen-space positional gradient
    norm per Gaussian. Returns ``({"cloned", "split", "pruned"}, keep_mask)``
    where ``keep_mask`` maps the grown cloud back to the surviving rows.
    """
    n = cloud.n
    grad_accum = np.asarray(grad_accum, dtype=np.float64)
    grad_count = np.asarray(grad_count, dtype=np.float64)
    if grad_accum.shape[0] != n or grad_count.shape[0] != n:
        raise ValueError("gradient accumulators do not cover the cloud")
    rng = np.random.default_rng(0) if rng is None else rng
    mean_grad = np.where(grad_count > 0, grad_accum / np.maximum(grad_count, 1), 0.0)
    hot = mean_grad >= cfg.grad_threshold
    room = max(cfg.max_gaussians - n, 0)
    if hot.sum() > room:
        # keep the strongest candidates, deterministic ties by index
        order = np.lexsort((np.arange(n), -mean_grad))
        hot = np.zeros(n, dtype=bool)
        hot[order[:room]] = True
    big = np.exp(cloud.log_scales).max(axis=1) >= cfg.split_scale_threshold
    clone_idx = np.flatnonzero(hot & ~big)
    split_idx = np.flatnonzero(hot & big)

    arrays = cloud.arrays()
    new_rows = {k: [v[clone_idx]] for k, v in arrays.items()}
    if len(split_idx):
        scales = np.exp(cloud.log_scales[split_idx])
        R = quat_to_rotmat(cloud.rotations[split_idx]
                           / np.linalg.norm(cloud.rotations[split_idx], axis=1, keepdims=True))
        for _ in range(2):
            z = rng.standard_normal((len(split_idx), 3)) * scales
            for k, v in arrays.items():
                rows = v[split_idx].copy()
                if k == "positions":
                    rows = rows + np.einsum("nij,nj->ni", R, z)
                elif k == "log_scales":
                    rows = rows - np.log(1.6)
                new_rows[k].append(rows)
    added = len(clone_idx) + 2 * len(split_idx)
    if added:
        cloud.append(**{k: np.concatenate(v) for k, v in new_rows.items()})
        if optimizer is not None:
            optimizer.append_rows(PER_GAUSSIAN_FIELDS, added)

    faint = sigmoid(cloud.opacity_logits) < cfg.prune_opacity
    keep = ~faint
    keep[split_idx] = False
    if keep.sum() == 0:
        # never empty the field; keep the most opaque Gaussian
        keep[int(np.argmax(cloud.opacity_logits))] = True
    split_mask = np.zeros(cloud.n, dtype=bool)
    split_mask[split_idx] = True
    n_pruned = int((~keep & ~split_mask).sum())
    if not keep.all():
        cloud.keep(keep)
        if optimizer is not None:
            optimizer.keep_rows(PER_GAUSSIAN_FIELDS, keep)
    if knn is not None and (added or not keep.all()):
        knn.stale = True
    return {"cloned": int(len(clone_idx)), "split": int(len(split_idx)),
            "pruned": int(n_pruned)}, keep
