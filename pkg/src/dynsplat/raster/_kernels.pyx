# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled compositing kernels.

Same contract as ``_kernels_py``. Tiles own disjoint pixels and disjoint
rows of the per-entry gradient buffer, so the parallel loop over tiles is
race-free and its result does not depend on the thread count.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, NAN

cnp.import_array()

NAME = "cython"

cdef double ALPHA_MAX = 0.99
cdef double ALPHA_MIN = 1.0 / 255.0
cdef double T_FLOOR = 1e-4


cdef void _forward_tile(int tile, int ntx, int width, int height, int ts,
                        const double[:, ::1] means2d, const double[:, ::1] conics,
                        const double[::1] opacity, const double[:, ::1] colors,
                        const double[::1] depths, const long[::1] offsets,
                        const long[::1] splat_ids,
                        double[:, :, ::1] color, double[:, ::1] mean_depth,
                        double[:, ::1] median_depth, double[:, ::1] final_T,
                        int[:, ::1] n_contrib) noexcept nogil:
    cdef int ty = tile // ntx
    cdef int tx = tile - ty * ntx
    cdef long s = offsets[tile]
    cdef long e = offsets[tile + 1]
    cdef int u, v, k
    cdef long j, gid
    cdef double px, py, dx, dy, power, alpha, T, T_next, r, g, b, md, med
    if s == e:
        return
    for v in range(ty * ts, min(ty * ts + ts, height)):
        for u in range(tx * ts, min(tx * ts + ts, width)):
            px = u + 0.5
            py = v + 0.5
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            md = 0.0
            med = NAN
            k = 0
            for j in range(s, e):
                k = <int>(j - s + 1)
                gid = splat_ids[j]
                dx = px - means2d[gid, 0]
                dy = py - means2d[gid, 1]
                power = -0.5 * (conics[gid, 0] * dx * dx + conics[gid, 2] * dy * dy) \
                    - conics[gid, 1] * dx * dy
                if power > 0.0:
                    continue
                alpha = opacity[gid] * exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                T_next = T * (1.0 - alpha)
                r = r + colors[gid, 0] * alpha * T
                g = g + colors[gid, 1] * alpha * T
                b = b + colors[gid, 2] * alpha * T
                md = md + depths[gid] * alpha * T
                if T > 0.5 and T_next <= 0.5:
                    med = depths[gid]
                T = T_next
                if T < T_FLOOR:
                    break
            color[v, u, 0] = r
            color[v, u, 1] = g
            color[v, u, 2] = b
            mean_depth[v, u] = md
            median_depth[v, u] = med
            final_T[v, u] = T
            n_contrib[v, u] = k


cdef void _backward_tile(int tile, int ntx, int width, int height, int ts,
                         const double[:, ::1] means2d, const double[:, ::1] conics,
                         const double[::1] opacity, const double[:, ::1] colors,
                         const long[::1] offsets, const long[::1] splat_ids,
                         const double[:, ::1] final_T, const int[:, ::1] n_contrib,
                         const double[:, :, ::1] d_color, double[:, ::1] out) noexcept nogil:
    cdef int ty = tile // ntx
    cdef int tx = tile - ty * ntx
    cdef long s = offsets[tile]
    cdef long e = offsets[tile + 1]
    cdef int u, v
    cdef long j, gid
    cdef double px, py, dx, dy, power, G, raw, alpha, T, w, gr, gg, gb
    cdef double acc_r, acc_g, acc_b, last_alpha, last_r, last_g, last_b, dA, dpow
    cdef double ca, cb, cc
    if s == e:
        return
    for v in range(ty * ts, min(ty * ts + ts, height)):
        for u in range(tx * ts, min(tx * ts + ts, width)):
            gr = d_color[v, u, 0]
            gg = d_color[v, u, 1]
            gb = d_color[v, u, 2]
            if gr == 0.0 and gg == 0.0 and gb == 0.0:
                continue
            px = u + 0.5
            py = v + 0.5
            T = final_T[v, u]
            acc_r = 0.0
            acc_g = 0.0
            acc_b = 0.0
            last_alpha = 0.0
            last_r = 0.0
            last_g = 0.0
            last_b = 0.0
            j = s + n_contrib[v, u] - 1
            while j >= s:
                gid = splat_ids[j]
                ca = conics[gid, 0]
                cb = conics[gid, 1]
                cc = conics[gid, 2]
                dx = px - means2d[gid, 0]
                dy = py - means2d[gid, 1]
                power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                if power > 0.0:
                    j = j - 1
                    continue
                G = exp(power)
                raw = opacity[gid] * G
                alpha = raw
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    j = j - 1
                    continue
                T = T / (1.0 - alpha)
                w = alpha * T
                out[j, 6] += w * gr
                out[j, 7] += w * gg
                out[j, 8] += w * gb
                acc_r = last_alpha * last_r + (1.0 - last_alpha) * acc_r
                acc_g = last_alpha * last_g + (1.0 - last_alpha) * acc_g
                acc_b = last_alpha * last_b + (1.0 - last_alpha) * acc_b
                last_r = colors[gid, 0]
                last_g = colors[gid, 1]
                last_b = colors[gid, 2]
                last_alpha = alpha
                dA = T * ((last_r - acc_r) * gr + (last_g - acc_g) * gg + (last_b - acc_b) * gb)
                if raw < ALPHA_MAX:
                    out[j, 5] += dA * G
                    dpow = dA * alpha
                    out[j, 0] += dpow * (ca * dx + cb * dy)
                    out[j, 1] += dpow * (cb * dx + cc * dy)
                    out[j, 2] += dpow * (-0.5 * dx * dx)
                    out[j, 3] += dpow * (-dx * dy)
                    out[j, 4] += dpow * (-0.5 * dy * dy)
                j = j - 1


def rasterize_forward(means2d, conics, opacity, colors, depths, tile_offsets, tile_splats,
                      int width, int height, int tile_size, int num_threads=1):
    cdef double[:, ::1] m = np.ascontiguousarray(means2d, dtype=np.float64)
    cdef double[:, ::1] q = np.ascontiguousarray(conics, dtype=np.float64)
    cdef double[::1] o = np.ascontiguousarray(opacity, dtype=np.float64)
    cdef double[:, ::1] c = np.ascontiguousarray(colors, dtype=np.float64)
    cdef double[::1] d = np.ascontiguousarray(depths, dtype=np.float64)
    cdef long[::1] offs = np.ascontiguousarray(tile_offsets, dtype=np.int64)
    cdef long[::1] ids = np.ascontiguousarray(tile_splats, dtype=np.int64)
    color_a = np.zeros((height, width, 3))
    mean_a = np.zeros((height, width))
    med_a = np.full((height, width), np.nan)
    T_a = np.ones((height, width))
    n_a = np.zeros((height, width), dtype=np.int32)
    cdef double[:, :, ::1] color = color_a
    cdef double[:, ::1] mean_depth = mean_a
    cdef double[:, ::1] median_depth = med_a
    cdef double[:, ::1] final_T = T_a
    cdef int[:, ::1] n_contrib = n_a
    cdef int ntx = (width + tile_size - 1) // tile_size
    cdef int n_tiles = <int>(offs.shape[0] - 1)
    cdef int tile
    for tile in prange(n_tiles, nogil=True, num_threads=max(1, num_threads), schedule="dynamic"):
        _forward_tile(tile, ntx, width, height, tile_size, m, q, o, c, d, offs, ids,
                      color, mean_depth, median_depth, final_T, n_contrib)
    return color_a, mean_a, med_a, T_a, n_a


def rasterize_backward(means2d, conics, opacity, colors, tile_offsets, tile_splats,
                       int width, int height, int tile_size, final_T, n_contrib, d_color,
                       int num_threads=1):
    cdef double[:, ::1] m = np.ascontiguousarray(means2d, dtype=np.float64)
    cdef double[:, ::1] q = np.ascontiguousarray(conics, dtype=np.float64)
    cdef double[::1] o = np.ascontiguousarray(opacity, dtype=np.float64)
    cdef double[:, ::1] c = np.ascontiguousarray(colors, dtype=np.float64)
    cdef long[::1] offs = np.ascontiguousarray(tile_offsets, dtype=np.int64)
    cdef long[::1] ids = np.ascontiguousarray(tile_splats, dtype=np.int64)
    cdef double[:, ::1] fT = np.ascontiguousarray(final_T, dtype=np.float64)
    cdef int[:, ::1] nc = np.ascontiguousarray(n_contrib, dtype=np.int32)
    cdef double[:, :, ::1] dc = np.ascontiguousarray(d_color, dtype=np.float64)
    out_a = np.zeros((ids.shape[0], 9))
    cdef double[:, ::1] out = out_a
    cdef int ntx = (width + tile_size - 1) // tile_size
    cdef int n_tiles = <int>(offs.shape[0] - 1)
    cdef int tile
    for tile in prange(n_tiles, nogil=True, num_threads=max(1, num_threads), schedule="dynamic"):
        _backward_tile(tile, ntx, width, height, tile_size, m, q, o, c, offs, ids,
                       fT, nc, dc, out)
    return out_a
