"""Tiled compositing driver: global depth sort, tile binning, kernel dispatch."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend as _backend

TILE_SIZE = 16
ALPHA_MIN = 1.0 / 255.0


@dataclass
class SplatGrads:
    means2d: np.ndarray
    conics: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray          # (H, W, 3)
    mean_depth: np.ndarray     # (H, W), unnormalised transmittance-weighted distance
    median_depth: np.ndarray   # (H, W), NaN where transmittance never crosses 0.5
    accum_alpha: np.ndarray    # (H, W)
    final_T: np.ndarray
    n_contrib: np.ndarray
    screen_grad_norm: np.ndarray | None = None
    screen_grad_ndc: np.ndarray | None = None
    ctx: dict = field(default_factory=dict, repr=False)


def splat_radius(cov2d, opacity):
    """Screen radius beyond which ``opacity * G`` provably drops below 1/255.

    Uses the largest eigenvalue of ``cov2d`` (the Mahalanobis distance is at
    least ``|d|^2 / lambda_max``). Splats that can never reach 1/255 get 0.
    """
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.log(np.maximum(opacity, 1e-300) / ALPHA_MIN)
    return np.where(k > 0.0, np.sqrt(2.0 * np.maximum(k, 0.0) * lam) * (1.0 + 1e-9) + 1e-6, 0.0)


def bin_splats(splats, width, height, tile_size=TILE_SIZE):
    """Global front-to-back order (depth_z, ties by index) binned into tiles.

    Returns ``(tile_offsets, tile_splats)``: entries of tile ``t`` are
    ``tile_splats[tile_offsets[t]:tile_offsets[t + 1]]``, depth ordered.
    """
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    n_tiles = ntx * nty
    idx = np.flatnonzero(splats.valid)
    idx = idx[np.lexsort((idx, splats.depth_z[idx]))]
    r = splat_radius(splats.cov2d[idx], splats.opacity[idx])
    mx, my = splats.means2d[idx, 0], splats.means2d[idx, 1]
    keep = (r > 0) & np.isfinite(mx) & np.isfinite(my)
    idx, r, mx, my = idx[keep], r[keep], mx[keep], my[keep]
    # pixel centres u + 0.5 inside [m - r, m + r]
    u0 = np.clip(np.ceil(mx - r - 0.5), 0, width - 1)
    u1 = np.clip(np.floor(mx + r - 0.5), -1, width - 1)
    v0 = np.clip(np.ceil(my - r - 0.5), 0, height - 1)
    v1 = np.clip(np.floor(my + r - 0.5), -1, height - 1)
    hit = (u1 >= u0) & (v1 >= v0) & (mx + r - 0.5 >= 0) & (my + r - 0.5 >= 0) \
        & (mx - r - 0.5 <= width - 1) & (my - r - 0.5 <= height - 1)
    idx = idx[hit]
    tx0 = (u0[hit] // tile_size).astype(np.int64)
    tx1 = (u1[hit] // tile_size).astype(np.int64)
    ty0 = (v0[hit] // tile_size).astype(np.int64)
    ty1 = (v1[hit] // tile_size).astype(np.int64)
    w = tx1 - tx0 + 1
    counts = w * (ty1 - ty0 + 1)
    total = int(counts.sum())
    rep = np.repeat(np.arange(len(idx)), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - starts
    tiles = (ty0[rep] + local // w[rep]) * ntx + tx0[rep] + local % w[rep]
    perm = np.argsort(tiles, kind="stable")
    tile_splats = idx[rep][perm].astype(np.int64)
    tile_offsets = np.searchsorted(tiles[perm], np.arange(n_tiles + 1)).astype(np.int64)
    return tile_offsets, tile_splats


def render(splats, cam, *, tile_size=TILE_SIZE, backend=None):
    """Composite ``splats`` front to back into colour, depth and alpha maps."""
    kern = _backend.get(backend)
    W, H = cam.width, cam.height
    offsets, ids = bin_splats(splats, W, H, tile_size)
    color, mean_d, med_d, final_T, n_contrib = kern.rasterize_forward(
        splats.means2d, splats.conics, splats.opacity, splats.colors, splats.depth_euclid,
        offsets, ids, W, H, tile_size, _backend.num_threads())
    return RenderOutput(
        color=color, mean_depth=mean_d, median_depth=med_d, accum_alpha=1.0 - final_T,
        final_T=final_T, n_contrib=n_contrib,
        ctx={"splats": splats, "offsets": offsets, "ids": ids, "tile_size": tile_size,
             "width": W, "height": H, "kernel": kern},
    )


def render_backward(out, d_color):
    """Splat-level gradients of a scalar loss given ``dL/dcolor``.

    Also stores per-splat screen-space positional gradient norms on
    ``out.screen_grad_norm`` (pixel units) and ``out.screen_grad_ndc``
    (normalised device units, the scale the usual densification threshold
    is quoted in).
    """
    if not out.ctx:
        raise RuntimeError("render_backward needs the forward state of a render() call")
    c = out.ctx
    splats = c["splats"]
    n = splats.n
    d_color = np.ascontiguousarray(d_color, dtype=np.float64)
    if d_color.shape != out.color.shape:
        raise ValueError(f"gradient image shape {d_color.shape} != render shape {out.color.shape}")
    ids = c["ids"]
    entries = c["kernel"].rasterize_backward(
        splats.means2d, splats.conics, splats.opacity, splats.colors, c["offsets"], ids,
        c["width"], c["height"], c["tile_size"], out.final_T, out.n_contrib, d_color,
        _backend.num_threads())
    summed = np.zeros((n, 9))
    for k in range(9):
        summed[:, k] = np.bincount(ids, weights=entries[:, k], minlength=n)
    grads = SplatGrads(means2d=summed[:, 0:2], conics=summed[:, 2:5],
                       opacity=summed[:, 5], colors=summed[:, 6:9])
    out.screen_grad_norm = np.linalg.norm(grads.means2d, axis=1)
    half = 0.5 * np.array([c["width"], c["height"]], dtype=np.float64)
    out.screen_grad_ndc = np.linalg.norm(grads.means2d * half, axis=1)
    return grads
