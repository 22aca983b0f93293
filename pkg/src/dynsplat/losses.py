"""Training objective: L1, intermittent D-SSIM and the embedding smoothness term.

Every loss returns ``(value, gradient)``; gradients are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import StaleGraphError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossConfig:
    lambda_emb: float = 0.01
    lambda_w: float = 2000.0
    k_neighbors: int = 5
    dssim_start_iter: int = 10000
    dssim_period: int = 50
    dssim_active_span: int = 5

    def __post_init__(self):
        if self.lambda_emb < 0 or self.lambda_w < 0:
            raise ValueError("loss weights must be non-negative")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if not 0 <= self.dssim_active_span <= self.dssim_period:
            raise ValueError("dssim_active_span must lie in [0, dssim_period]")


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image size mismatch: {a.shape} vs {b.shape}")
    return a, b


def l1_loss(render, gt):
    render, gt = _check_pair(render, gt)
    return float(np.mean(np.abs(render - gt))), np.sign(render - gt) / render.size


def _gaussian_window():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


_WINDOW = _gaussian_window()


def _blur(img):
    # zero-padded "same" filtering; symmetric kernel so this is its own adjoint
    out = correlate1d(img, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode="constant", cval=0.0)


def _ssim_terms(x, y):
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape[:2]}")
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    a1 = 2.0 * mx * my + SSIM_C1
    a2 = 2.0 * (exy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    return mx, my, a1, a2, b1, b2


def ssim(x, y):
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    x, y = _check_pair(x, y)
    *_, a1, a2, b1, b2 = _ssim_terms(x, y)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def dssim_loss(render, gt):
    """``(1 - SSIM) / 2`` and its gradient w.r.t. ``render``."""
    x, y = _check_pair(render, gt)
    mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = a1 * a2 / (b1 * b2)
    g = -0.5 / x.size
    d_mx = g * s * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2)
    d_exx = g * (-s / b2)
    d_exy = g * (2.0 * s / a2)
    grad = _blur(d_mx) + 2.0 * x * _blur(d_exx) + y * _blur(d_exy)
    return 0.5 * (1.0 - float(np.mean(s))), grad


def dssim_active(it, cfg):
    if it < cfg.dssim_start_iter:
        return False
    return (it - cfg.dssim_start_iter) % cfg.dssim_period < cfg.dssim_active_span


def psnr(render, gt, cap=100.0):
    render, gt = _check_pair(render, gt)
    mse = float(np.mean((render - gt) ** 2))
    if mse <= 10.0 ** (-cap / 10.0):
        return cap
    return 10.0 * np.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# neighbour graph + embedding regulariser
# ---------------------------------------------------------------------------

GRID_THRESHOLD = 50_000


@dataclass
class KnnGraph:
    neighbors: np.ndarray  # (N, k) int
    weights: np.ndarray    # (N, k)
    built_at_iter: int = 0
    stale: bool = False

    @property
    def n(self):
        return self.neighbors.shape[0]

    @property
    def k(self):
        return self.neighbors.shape[1]


def _knn_bruteforce(positions, k, chunk=2048):
    n = positions.shape[0]
    sq = np.einsum("ij,ij->i", positions, positions)
    idx = np.empty((n, k), dtype=np.int64)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        d2 = sq[s:e, None] + sq[None, :] - 2.0 * positions[s:e] @ positions.T
        d2[np.arange(e - s), np.arange(s, e)] = np.inf
        part = np.argpartition(d2, k - 1, axis=1)[:, :k] if k < n - 1 else \
            np.argsort(d2, axis=1)[:, :k]
        # exact ordering of the selected set, ties by index
        sub = np.take_along_axis(d2, part, axis=1)
        order = np.lexsort((part, sub), axis=1)
        idx[s:e] = np.take_along_axis(part, order, axis=1)
    return idx


def build_knn(positions, k, lambda_w, built_at_iter=0):
    """Exact ``k`` nearest neighbours (no self loops) with Gaussian falloff weights.

    With ``N <= k`` every other point is a neighbour.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if n < 2:
        raise ValueError("need at least two points for a neighbour graph")
    k = min(k, n - 1)
    if n > GRID_THRESHOLD:
        from scipy.spatial import cKDTree
        _, idx = cKDTree(positions).query(positions, k=k + 1)
        # drop self; coincident points may shuffle self out of column 0
        rows = []
        for i, r in enumerate(idx):
            r = r[r != i][:k]
            rows.append(r)
        idx = np.asarray(rows, dtype=np.int64)
    else:
        idx = _knn_bruteforce(positions, k)
    d2 = np.sum((positions[idx] - positions[:, None, :]) ** 2, axis=-1)
    return KnnGraph(neighbors=idx, weights=np.exp(-lambda_w * d2), built_at_iter=built_at_iter)


def emb_reg_loss(embeddings, graph):
    """Weighted mean L2 (not squared) embedding difference over the neighbour graph."""
    e = np.asarray(embeddings, dtype=np.float64)
    if graph.stale or graph.n != e.shape[0]:
        raise StaleGraphError(
            f"neighbour graph built for {graph.n} Gaussians, cloud has {e.shape[0]}; rebuild it")
    n, k = graph.neighbors.shape
    diff = e[:, None, :] - e[graph.neighbors]
    dist = np.linalg.norm(diff, axis=-1)
    scale = 1.0 / (k * n)
    value = scale * float(np.sum(graph.weights * dist))
    safe = np.where(dist > 0.0, dist, 1.0)
    coef = np.where(dist > 0.0, graph.weights / safe, 0.0) * scale
    g_pair = coef[..., None] * diff
    grad = g_pair.sum(axis=1)
    flat_nb = graph.neighbors.ravel()
    flat_g = g_pair.reshape(-1, e.shape[1])
    for d in range(e.shape[1]):
        grad[:, d] -= np.bincount(flat_nb, weights=flat_g[:, d], minlength=n)
    return value, grad
