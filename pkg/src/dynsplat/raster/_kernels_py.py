"""Pure-numpy compositing kernels (fallback when the compiled core is unavailable).

Same contract as the Cython kernels in ``_kernels.pyx``. Each tile is
evaluated as a dense ``pixels x splats`` matrix; early termination is
reproduced by masking every entry whose preceding transmittance is already
below the floor, which is exactly what the sequential loop does.
"""

import numpy as np

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_FLOOR = 1e-4

NAME = "python"


def _tile_pixels(tile, ntx, width, height, tile_size):
    ty, tx = divmod(tile, ntx)
    x0, y0 = tx * tile_size, ty * tile_size
    xs = np.arange(x0, min(x0 + tile_size, width))
    ys = np.arange(y0, min(y0 + tile_size, height))
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return yy.ravel(), xx.ravel()


def _tile_state(ids, yy, xx, means2d, conics, opacity):
    dx = (xx + 0.5)[:, None] - means2d[ids, 0][None, :]
    dy = (yy + 0.5)[:, None] - means2d[ids, 1][None, :]
    a, b, c = conics[ids, 0], conics[ids, 1], conics[ids, 2]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    G = np.exp(power)
    raw = opacity[ids] * G
    alpha = np.minimum(ALPHA_MAX, raw)
    use = (power <= 0.0) & (alpha >= ALPHA_MIN)
    A = np.where(use, alpha, 0.0)
    T = np.cumprod(1.0 - A, axis=1)
    T_prev = np.empty_like(T)
    T_prev[:, 0] = 1.0
    T_prev[:, 1:] = T[:, :-1]
    incl = T_prev >= T_FLOOR
    return dx, dy, power, G, raw, alpha, use, A, T, T_prev, incl


def rasterize_forward(means2d, conics, opacity, colors, depths, tile_offsets, tile_splats,
                      width, height, tile_size, num_threads=1):
    ntx = (width + tile_size - 1) // tile_size
    color = np.zeros((height, width, 3))
    mean_depth = np.zeros((height, width))
    median_depth = np.full((height, width), np.nan)
    final_T = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int32)
    for tile in range(len(tile_offsets) - 1):
        s, e = tile_offsets[tile], tile_offsets[tile + 1]
        if s == e:
            continue
        ids = tile_splats[s:e]
        yy, xx = _tile_pixels(tile, ntx, width, height, tile_size)
        *_, A, T, T_prev, incl = _tile_state(ids, yy, xx, means2d, conics, opacity)
        Wt = np.where(incl, A * T_prev, 0.0)
        color[yy, xx] = Wt @ colors[ids]
        mean_depth[yy, xx] = Wt @ depths[ids]
        k = incl.sum(axis=1)
        n_contrib[yy, xx] = k
        final_T[yy, xx] = np.where(k > 0, T[np.arange(len(k)), np.maximum(k - 1, 0)], 1.0)
        cross = incl & (T_prev > 0.5) & (T <= 0.5)
        has = cross.any(axis=1)
        first = np.argmax(cross, axis=1)
        median_depth[yy[has], xx[has]] = depths[ids[first[has]]]
    return color, mean_depth, median_depth, final_T, n_contrib


def rasterize_backward(means2d, conics, opacity, colors, tile_offsets, tile_splats,
                       width, height, tile_size, final_T, n_contrib, d_color, num_threads=1):
    """Per-entry gradients, shape ``(len(tile_splats), 9)``.

    Columns: d mean x, d mean y, d conic a, b, c, d opacity, d colour rgb.
    """
    ntx = (width + tile_size - 1) // tile_size
    out = np.zeros((len(tile_splats), 9))
    for tile in range(len(tile_offsets) - 1):
        s, e = tile_offsets[tile], tile_offsets[tile + 1]
        if s == e:
            continue
        ids = tile_splats[s:e]
        yy, xx = _tile_pixels(tile, ntx, width, height, tile_size)
        g = d_color[yy, xx]
        if not g.any():
            continue
        dx, dy, power, G, raw, alpha, use, A, T, T_prev, incl = _tile_state(
            ids, yy, xx, means2d, conics, opacity)
        live = use & incl
        Wt = np.where(live, A * T_prev, 0.0)
        out[s:e, 6:9] = Wt.T @ g
        cg = g @ colors[ids].T
        contrib = Wt * cg
        behind = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        dA = np.where(live, T_prev * cg - behind / (1.0 - A), 0.0)
        grad_ok = live & (raw < ALPHA_MAX)
        out[s:e, 5] = np.sum(np.where(grad_ok, dA * G, 0.0), axis=0)
        dpow = np.where(grad_ok, dA * alpha, 0.0)
        a, b, c = conics[ids, 0], conics[ids, 1], conics[ids, 2]
        out[s:e, 0] = np.sum(dpow * (a * dx + b * dy), axis=0)
        out[s:e, 1] = np.sum(dpow * (b * dx + c * dy), axis=0)
        out[s:e, 2] = np.sum(dpow * (-0.5 * dx * dx), axis=0)
        out[s:e, 3] = np.sum(dpow * (-dx * dy), axis=0)
        out[s:e, 4] = np.sum(dpow * (-0.5 * dy * dy), axis=0)
    return out
