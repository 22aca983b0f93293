"""Naive reference compositor: one global sort, every splat against every pixel.

No tiling, no bounding boxes and no early termination. It shares only the
per-splat alpha conventions (0.99 clamp, 1/255 skip) with the tiled path and
serves as the oracle for it, and as the ground-truth renderer for synthetic
scenes.
"""

import numpy as np

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0


def render_reference(splats, cam):
    """Colour image ``(H, W, 3)`` for ``splats`` seen by ``cam``."""
    H, W = cam.height, cam.width
    image = np.zeros((H, W, 3))
    idx = np.flatnonzero(splats.valid)
    if idx.size == 0:
        return image
    order = idx[np.lexsort((idx, splats.depth_z[idx]))]
    ys, xs = np.mgrid[0:H, 0:W]
    px = xs + 0.5
    py = ys + 0.5
    T = np.ones((H, W))
    for i in order:
        a, b, c = splats.conics[i]
        dx = px - splats.means2d[i, 0]
        dy = py - splats.means2d[i, 1]
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        alpha = np.minimum(ALPHA_MAX, splats.opacity[i] * np.exp(power))
        alpha = np.where((power <= 0.0) & (alpha >= ALPHA_MIN), alpha, 0.0)
        image += (alpha * T)[..., None] * splats.colors[i]
        T = T * (1.0 - alpha)
    return image
