"""Temporal embeddings, fusion, the deformation MLP and opacity attenuation.

A Gaussian's state at time ``t`` is its canonical state plus the delta the
MLP predicts from ``concat(fused temporal embedding, per-Gaussian embedding)``.
With ``fusion_mode == "dual"`` the coarse and fine embeddings are pushed
through the network separately and the two deltas summed (two passes); every
other mode costs one pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError
from .gaussians import QUAT_EPS, normalize_backward, num_sh_coeffs, sigmoid

FUSION_MODES = ("coarse", "fine", "add", "concat", "product", "dual")
OPACITY_MODES = ("standard", "aggressive", "bypass")


# ---------------------------------------------------------------------------
# temporal embeddings
# ---------------------------------------------------------------------------

@dataclass
class TemporalEmbeddingTable:
    fine: np.ndarray    # (L_f, D_t)
    coarse: np.ndarray  # (L_c, D_t)
    clamp_warnings: int = 0

    def __post_init__(self):
        self.fine = np.ascontiguousarray(self.fine, dtype=np.float64)
        self.coarse = np.ascontiguousarray(self.coarse, dtype=np.float64)
        if self.fine.shape[0] < 2 or self.coarse.shape[0] > self.fine.shape[0]:
            raise ValueError("need L_f >= 2 and L_c <= L_f")
        if self.fine.shape[1] != self.coarse.shape[1]:
            raise ValueError("fine and coarse tables must share their width")

    @property
    def dim(self):
        return self.fine.shape[1]

    @classmethod
    def create(cls, n_frames, dim=32, *, fine_factor=5, coarse_factor=5, rng=None, std=1.0):
        rng = np.random.default_rng(0) if rng is None else rng
        L_f = max(2, n_frames // fine_factor)
        L_c = max(2, L_f // coarse_factor)
        return cls(fine=rng.normal(0.0, std, (L_f, dim)), coarse=rng.normal(0.0, std, (L_c, dim)))


def _interp_weights(n_rows, t):
    pos = t * (n_rows - 1)
    i0 = min(int(np.floor(pos)), n_rows - 1)
    i1 = min(i0 + 1, n_rows - 1)
    return i0, i1, pos - i0


def sample_temporal(table, t):
    """Linearly interpolated ``(t_c, t_f)`` at normalised time ``t``.

    Times outside ``[0, 1]`` are clamped and counted on ``table.clamp_warnings``.
    """
    t = float(t)
    if not 0.0 <= t <= 1.0:
        table.clamp_warnings += 1
        t = min(max(t, 0.0), 1.0)
    out = []
    for rows in (table.coarse, table.fine):
        i0, i1, w = _interp_weights(rows.shape[0], t)
        out.append((1.0 - w) * rows[i0] + w * rows[i1])
    return out[0], out[1]


def sample_temporal_backward(table, t, d_tc, d_tf):
    t = min(max(float(t), 0.0), 1.0)
    grads = []
    for rows, d in ((table.coarse, d_tc), (table.fine, d_tf)):
        g = np.zeros_like(rows)
        if d is not None:
            i0, i1, w = _interp_weights(rows.shape[0], t)
            g[i0] += (1.0 - w) * d
            g[i1] += w * d
        grads.append(g)
    return grads[0], grads[1]


def fuse(t_c, t_f, mode):
    """Combine coarse and fine embeddings; ``dual`` returns the pair unfused."""
    t_c = np.asarray(t_c, dtype=np.float64)
    t_f = np.asarray(t_f, dtype=np.float64)
    if t_c.shape != t_f.shape:
        raise ValueError(f"embedding dimension mismatch: {t_c.shape} vs {t_f.shape}")
    if mode == "product":
        return t_c * t_f
    if mode == "add":
        return t_c + t_f
    if mode == "concat":
        return np.concatenate([t_c, t_f], axis=-1)
    if mode == "coarse":
        return t_c.copy()
    if mode == "fine":
        return t_f.copy()
    if mode == "dual":
        return t_c.copy(), t_f.copy()
    raise ValueError(f"unknown fusion mode {mode!r}")


def fuse_backward(t_c, t_f, mode, d_fused):
    if mode == "product":
        return d_fused * t_f, d_fused * t_c
    if mode == "add":
        return d_fused.copy(), d_fused.copy()
    if mode == "concat":
        D = t_c.shape[-1]
        return d_fused[..., :D].copy(), d_fused[..., D:].copy()
    if mode == "coarse":
        return d_fused.copy(), np.zeros_like(t_f)
    if mode == "fine":
        return np.zeros_like(t_c), d_fused.copy()
    raise ValueError(f"fuse_backward does not apply to mode {mode!r}")


# ---------------------------------------------------------------------------
# deltas
# ---------------------------------------------------------------------------

@dataclass
class DeformationDelta:
    dmu: np.ndarray     # (N, 3)
    ds: np.ndarray      # (N, 3) log-scale units
    dq: np.ndarray      # (N, 4)
    dalpha: np.ndarray  # (N,) logit units
    dsh: np.ndarray     # (N, K, 3)

    @classmethod
    def zeros(cls, n, sh_degree):
        K = num_sh_coeffs(sh_degree)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros((n, K, 3)))

    def __add__(self, other):
        return DeformationDelta(self.dmu + other.dmu, self.ds + other.ds, self.dq + other.dq,
                                self.dalpha + other.dalpha, self.dsh + other.dsh)

    def magnitude(self):
        """Per-Gaussian total deformation, unit weights across attribute classes."""
        n = self.dmu.shape[0]
        return (np.linalg.norm(self.dmu, axis=1) + np.linalg.norm(self.ds, axis=1)
                + np.linalg.norm(self.dq, axis=1) + np.abs(self.dalpha)
                + np.linalg.norm(self.dsh.reshape(n, int(np.prod(self.dsh.shape[1:]))), axis=1))

    def take(self, idx):
        return DeformationDelta(self.dmu[idx], self.ds[idx], self.dq[idx], self.dalpha[idx],
                                self.dsh[idx])


def _head_slices(sh_degree):
    K = num_sh_coeffs(sh_degree)
    return {"dmu": slice(0, 3), "ds": slice(3, 6), "dq": slice(6, 10), "dalpha": slice(10, 11),
            "dsh": slice(11, 11 + 3 * K)}


def head_width(sh_degree):
    return 11 + 3 * num_sh_coeffs(sh_degree)


def _split_heads(out, sh_degree, dc_only):
    s = _head_slices(sh_degree)
    n = out.shape[0]
    dsh = out[:, s["dsh"]].reshape(n, num_sh_coeffs(sh_degree), 3).copy()
    if dc_only:
        dsh[:, 1:] = 0.0
    return DeformationDelta(out[:, s["dmu"]].copy(), out[:, s["ds"]].copy(),
                            out[:, s["dq"]].copy(), out[:, 10].copy(), dsh)


def _join_heads(d, sh_degree, dc_only):
    n = d.dmu.shape[0]
    dsh = d.dsh.copy()
    if dc_only:
        dsh[:, 1:] = 0.0
    return np.concatenate([d.dmu, d.ds, d.dq, d.dalpha.reshape(n, 1), dsh.reshape(n, int(np.prod(dsh.shape[1:])))], axis=1)


# ---------------------------------------------------------------------------
# the field
# ---------------------------------------------------------------------------

@dataclass
class DeformationField:
    tables: TemporalEmbeddingTable
    weights: list          # [W_0, ..., W_L] with W_i of shape (in, out)
    biases: list
    embed_dim: int
    sh_degree: int = 1
    fusion_mode: str = "product"
    opacity_k: float = 10.0
    dc_only: bool = False
    mlp_passes: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if len(self.weights) < 2:
            raise ValueError("the MLP needs at least one hidden layer")
        expect = self.input_width
        if self.weights[0].shape[0] != expect:
            raise ValueError(f"MLP input width {self.weights[0].shape[0]} != {expect}")
        if self.weights[-1].shape[1] != head_width(self.sh_degree):
            raise ValueError("MLP head width does not match the SH degree")

    @property
    def input_width(self):
        D_t = self.tables.dim
        return self.embed_dim + (2 * D_t if self.fusion_mode == "concat" else D_t)

    @property
    def hidden(self):
        return [w.shape[1] for w in self.weights[:-1]]

    @classmethod
    def create(cls, n_frames, embed_dim=32, *, temporal_dim=32, hidden=(128, 128, 128, 128),
               sh_degree=1, fusion_mode="product", opacity_k=10.0, dc_only=False,
               fine_factor=5, coarse_factor=5, table_std=1.0, rng=None):
        """He-initialised hidden layers and an all-zero head (identity deformation)."""
        rng = np.random.default_rng(0) if rng is None else rng
        tables = TemporalEmbeddingTable.create(n_frames, temporal_dim, fine_factor=fine_factor,
                                               coarse_factor=coarse_factor, rng=rng, std=table_std)
        in_w = embed_dim + (2 * temporal_dim if fusion_mode == "concat" else temporal_dim)
        widths = [in_w, *hidden]
        weights, biases = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / a), (a, b)))
            biases.append(np.zeros(b))
        weights.append(np.zeros((widths[-1], head_width(sh_degree))))
        biases.append(np.zeros(head_width(sh_degree)))
        return cls(tables=tables, weights=weights, biases=biases, embed_dim=embed_dim,
                   sh_degree=sh_degree, fusion_mode=fusion_mode, opacity_k=opacity_k,
                   dc_only=dc_only)

    # -- parameters as a flat mapping, for the optimiser and checkpoints
    def params(self):
        p = {"table_fine": self.tables.fine, "table_coarse": self.tables.coarse}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            p[f"mlp_w{i}"] = w
            p[f"mlp_b{i}"] = b
        return p

    def copy(self):
        return DeformationField(
            tables=TemporalEmbeddingTable(self.tables.fine.copy(), self.tables.coarse.copy()),
            weights=[w.copy() for w in self.weights], biases=[b.copy() for b in self.biases],
            embed_dim=self.embed_dim, sh_degree=self.sh_degree, fusion_mode=self.fusion_mode,
            opacity_k=self.opacity_k, dc_only=self.dc_only)

    # -- network
    def _mlp(self, t_vec, emb):
        """One network evaluation for every row of ``emb`` at temporal input ``t_vec``."""
        self.mlp_passes += 1
        D = t_vec.shape[0]
        W0 = self.weights[0]
        pre = emb @ W0[D:] + (t_vec @ W0[:D] + self.biases[0])
        h = np.maximum(pre, 0.0)
        if not np.isfinite(h).all():
            raise NumericError("non-finite activation in MLP layer 0")
        acts = [h]
        for i in range(1, len(self.weights)):
            pre = h @ self.weights[i] + self.biases[i]
            if i < len(self.weights) - 1:
                h = np.maximum(pre, 0.0)
                acts.append(h)
            else:
                h = pre
            if not np.isfinite(h).all():
                raise NumericError(f"non-finite activation in MLP layer {i}")
        return h, acts

    def _mlp_backward(self, t_vec, emb, acts, d_out, grads):
        D = t_vec.shape[0]
        d = d_out
        for i in range(len(self.weights) - 1, 0, -1):
            grads[f"mlp_w{i}"] += acts[i - 1].T @ d
            grads[f"mlp_b{i}"] += d.sum(axis=0)
            d = (d @ self.weights[i].T) * (acts[i - 1] > 0.0)
        W0 = self.weights[0]
        grads["mlp_w0"][D:] += emb.T @ d
        d_col = d.sum(axis=0)
        grads["mlp_w0"][:D] += np.outer(t_vec, d_col)
        grads["mlp_b0"] += d_col
        d_emb = d @ W0[D:].T
        d_t = W0[:D] @ d_col
        return d_emb, d_t

    def forward(self, emb, t):
        """Deltas for every Gaussian at time ``t`` plus a cache for :meth:`backward`."""
        emb = np.asarray(emb, dtype=np.float64)
        t_c, t_f = sample_temporal(self.tables, t)
        if self.fusion_mode == "dual":
            out_c, acts_c = self._mlp(t_c, emb)
            out_f, acts_f = self._mlp(t_f, emb)
            delta = _split_heads(out_c + out_f, self.sh_degree, self.dc_only)
            cache = {"t": t, "t_c": t_c, "t_f": t_f, "emb": emb, "acts": (acts_c, acts_f)}
        else:
            fused = fuse(t_c, t_f, self.fusion_mode)
            out, acts = self._mlp(fused, emb)
            delta = _split_heads(out, self.sh_degree, self.dc_only)
            cache = {"t": t, "t_c": t_c, "t_f": t_f, "fused": fused, "emb": emb, "acts": acts}
        return delta, cache

    def backward(self, cache, d_delta):
        """Gradients w.r.t. field parameters (dict) and the per-Gaussian embeddings."""
        grads = {k: np.zeros_like(v) for k, v in self.params().items()}
        d_out = _join_heads(d_delta, self.sh_degree, self.dc_only)
        emb = cache["emb"]
        if self.fusion_mode == "dual":
            acts_c, acts_f = cache["acts"]
            d_emb_c, d_tc = self._mlp_backward(cache["t_c"], emb, acts_c, d_out, grads)
            d_emb_f, d_tf = self._mlp_backward(cache["t_f"], emb, acts_f, d_out, grads)
            d_emb = d_emb_c + d_emb_f
        else:
            d_emb, d_fused = self._mlp_backward(cache["fused"], emb, cache["acts"], d_out, grads)
            d_tc, d_tf = fuse_backward(cache["t_c"], cache["t_f"], self.fusion_mode, d_fused)
        g_c, g_f = sample_temporal_backward(self.tables, cache["t"], d_tc, d_tf)
        grads["table_coarse"] += g_c
        grads["table_fine"] += g_f
        return grads, d_emb


def deform(field, e, t):
    """Single-pass deformation (any mode but ``dual``)."""
    if field.fusion_mode == "dual":
        raise ValueError("deform() needs a single-pass fusion mode; use deform_dual()")
    return field.forward(np.atleast_2d(e), t)[0]


def deform_dual(field, e, t):
    """Late-fusion deformation: one pass per temporal scale, deltas summed."""
    if field.fusion_mode != "dual":
        raise ValueError("deform_dual() needs fusion_mode='dual'")
    return field.forward(np.atleast_2d(e), t)[0]


# ---------------------------------------------------------------------------
# applying deltas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpacityMode:
    kind: str = "aggressive"
    k: float = 10.0

    def __post_init__(self):
        if self.kind not in OPACITY_MODES:
            raise ValueError(f"unknown opacity mode {self.kind!r}")

    @property
    def effective(self):
        # k = 0 disables the attenuation rather than halving every opacity
        if self.kind == "aggressive" and self.k == 0:
            return "standard"
        return self.kind


def aggressive_opacity(alpha, dalpha, k):
    """``sigmoid(logit(alpha) + dalpha) * sigmoid(k * dalpha)`` for scalars or arrays."""
    alpha = np.asarray(alpha, dtype=np.float64)
    base = np.log(alpha) - np.log1p(-alpha)
    return sigmoid(base + dalpha) * sigmoid(k * np.asarray(dalpha, dtype=np.float64))


@dataclass
class DeformedGaussians:
    positions: np.ndarray
    log_scales: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    sh_degree: int
    cache: dict = field(default_factory=dict, repr=False)


def apply_delta(view, delta, opacity_mode=OpacityMode(), degenerate_counter=None):
    """Canonical activated attributes plus ``delta`` -> attributes at time t."""
    mode = opacity_mode.effective
    pos = view.positions + delta.dmu
    log_s = view.log_scales + delta.ds
    q_pre = view.quats + delta.dq
    norms = np.linalg.norm(q_pre, axis=1, keepdims=True)
    fallback = norms[:, 0] <= QUAT_EPS
    if fallback.any():
        q_pre = np.where(fallback[:, None], view.quats, q_pre)
        norms = np.where(fallback[:, None], 1.0, norms)
        if degenerate_counter is not None:
            degenerate_counter["degenerate_rotation"] = (
                degenerate_counter.get("degenerate_rotation", 0) + int(fallback.sum()))
    quats = q_pre / norms
    z = view.opacity_logits + delta.dalpha
    base = sigmoid(z)
    if mode == "standard":
        opacity = base
        gate = None
    elif mode == "aggressive":
        gate = sigmoid(opacity_mode.k * delta.dalpha)
        opacity = base * gate
    else:
        opacity = view.opacity.copy()
        gate = None
    return DeformedGaussians(
        positions=pos, log_scales=log_s, scales=np.exp(log_s), quats=quats, opacity=opacity,
        sh=view.sh + delta.dsh, sh_degree=view.sh_degree,
        cache={"q_pre": q_pre, "norms": norms, "fallback": fallback, "base": base,
               "gate": gate, "mode": mode, "k": opacity_mode.k})


def apply_delta_backward(view, deformed, d_positions, d_scales, d_quats, d_opacity, d_sh):
    """Returns ``(d_canonical, d_delta)``; ``d_canonical`` is keyed like the cloud's arrays."""
    c = deformed.cache
    d_log_s = d_scales * deformed.scales
    d_qpre = normalize_backward(c["q_pre"], c["norms"], d_quats)
    fb = c["fallback"]
    d_dq = np.where(fb[:, None], 0.0, d_qpre)
    d_qunit = d_qpre
    d_qraw = normalize_backward(view.quats * view.quat_norms, view.quat_norms, d_qunit)
    base, gate, mode = c["base"], c["gate"], c["mode"]
    if mode == "standard":
        d_z = d_opacity * base * (1.0 - base)
        d_logit, d_dalpha = d_z, d_z
    elif mode == "aggressive":
        k = c["k"]
        d_z = d_opacity * gate * base * (1.0 - base)
        d_logit = d_z
        d_dalpha = d_z + d_opacity * base * k * gate * (1.0 - gate)
    else:
        a = view.opacity
        d_logit = d_opacity * a * (1.0 - a)
        d_dalpha = np.zeros_like(d_opacity)
    d_canon = {
        "positions": d_positions, "log_scales": d_log_s, "rotations": d_qraw,
        "opacity_logits": d_logit, "sh_coeffs": d_sh,
    }
    d_delta = DeformationDelta(d_positions.copy(), d_log_s.copy(), d_dq, d_dalpha, d_sh.copy())
    return d_canon, d_delta


# ---------------------------------------------------------------------------
# checkpoint sidecar
# ---------------------------------------------------------------------------

SIDECAR_MAGIC = b"DSDF"
SIDECAR_VERSION = 1


def save_field(fld, path):
    """Binary little-endian sidecar: header then f32 tables and layer blobs."""
    hidden = fld.hidden
    head = struct.pack(
        "<4sIIIIII", SIDECAR_MAGIC, SIDECAR_VERSION, fld.embed_dim, fld.tables.dim,
        fld.tables.fine.shape[0], fld.tables.coarse.shape[0], len(hidden))
    head += struct.pack(f"<{len(hidden)}I", *hidden)
    head += struct.pack("<IIIf", fld.sh_degree, FUSION_MODES.index(fld.fusion_mode),
                        int(fld.dc_only), float(fld.opacity_k))
    blobs = [fld.tables.fine, fld.tables.coarse]
    for w, b in zip(fld.weights, fld.biases):
        blobs += [w, b]
    with open(path, "wb") as fh:
        fh.write(head)
        for blob in blobs:
            fh.write(np.ascontiguousarray(blob, dtype="<f4").tobytes())


def load_field(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        magic, version, D_e, D_t, L_f, L_c, n_hidden = struct.unpack_from("<4sIIIIII", data, 0)
        if magic != SIDECAR_MAGIC:
            raise DataError(f"{path}: bad sidecar magic {magic!r}")
        if version != SIDECAR_VERSION:
            raise DataError(f"{path}: unsupported sidecar version {version}")
        off = struct.calcsize("<4sIIIIII")
        hidden = list(struct.unpack_from(f"<{n_hidden}I", data, off))
        off += 4 * n_hidden
        sh_degree, mode_tag, dc_only, k = struct.unpack_from("<IIIf", data, off)
        off += struct.calcsize("<IIIf")
    except struct.error as exc:
        raise DataError(f"{path}: truncated sidecar header") from exc
    mode = FUSION_MODES[mode_tag]
    in_w = D_e + (2 * D_t if mode == "concat" else D_t)
    widths = [in_w, *hidden, head_width(sh_degree)]
    floats = np.frombuffer(data, dtype="<f4", offset=off).astype(np.float64)

    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        if pos + size > floats.size:
            raise DataError(f"{path}: truncated sidecar payload")
        arr = floats[pos:pos + size].reshape(shape).copy()
        pos += size
        return arr

    fine = take((L_f, D_t))
    coarse = take((L_c, D_t))
    weights, biases = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        weights.append(take((a, b)))
        biases.append(take((b,)))
    if pos != floats.size:
        raise DataError(f"{path}: {floats.size - pos} trailing values in sidecar")
    return DeformationField(tables=TemporalEmbeddingTable(fine, coarse), weights=weights,
                            biases=biases, embed_dim=D_e, sh_degree=sh_degree,
                            fusion_mode=mode, opacity_k=float(k), dc_only=bool(dc_only))
