"""Canonical Gaussian field: storage, activations, covariance and SH colour.

Raw parameters are stored unconstrained (log-scales, opacity logits, raw
quaternions) and mapped through their activations on every use. Every
forward helper in this module has a ``*_backward`` partner that returns
analytic partials, so the rasterizer can chain through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DataError, InvalidRotationError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3
QUAT_EPS = 1e-12


def num_sh_coeffs(degree):
    return (degree + 1) ** 2


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

def sh_basis(dirs, degree, with_jacobian=False):
    """Real SH basis in the usual graphics ordering.

    Returns ``Y`` of shape ``(N, K)``; with ``with_jacobian`` also ``dY/ddir``
    of shape ``(N, K, 3)``. ``dirs`` is assumed unit length, the Jacobian is
    of the polynomial form (the caller chains through normalisation).
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ValueError(f"sh degree must lie in [0, {MAX_SH_DEGREE}], got {degree}")
    n = dirs.shape[0]
    K = num_sh_coeffs(degree)
    Y = np.empty((n, K))
    J = np.zeros((n, K, 3)) if with_jacobian else None
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    Y[:, 0] = SH_C0
    if degree >= 1:
        Y[:, 1] = -SH_C1 * y
        Y[:, 2] = SH_C1 * z
        Y[:, 3] = -SH_C1 * x
        if with_jacobian:
            J[:, 1, 1] = -SH_C1
            J[:, 2, 2] = SH_C1
            J[:, 3, 0] = -SH_C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        Y[:, 4] = SH_C2[0] * xy
        Y[:, 5] = SH_C2[1] * yz
        Y[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        Y[:, 7] = SH_C2[3] * xz
        Y[:, 8] = SH_C2[4] * (xx - yy)
        if with_jacobian:
            J[:, 4, 0] = SH_C2[0] * y
            J[:, 4, 1] = SH_C2[0] * x
            J[:, 5, 1] = SH_C2[1] * z
            J[:, 5, 2] = SH_C2[1] * y
            J[:, 6, 0] = -2.0 * SH_C2[2] * x
            J[:, 6, 1] = -2.0 * SH_C2[2] * y
            J[:, 6, 2] = 4.0 * SH_C2[2] * z
            J[:, 7, 0] = SH_C2[3] * z
            J[:, 7, 2] = SH_C2[3] * x
            J[:, 8, 0] = 2.0 * SH_C2[4] * x
            J[:, 8, 1] = -2.0 * SH_C2[4] * y
    if degree >= 3:
        Y[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        Y[:, 10] = SH_C3[1] * xy * z
        Y[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        Y[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        Y[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        Y[:, 14] = SH_C3[5] * z * (xx - yy)
        Y[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
        if with_jacobian:
            J[:, 9, 0] = 6.0 * SH_C3[0] * xy
            J[:, 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
            J[:, 10, 0] = SH_C3[1] * yz
            J[:, 10, 1] = SH_C3[1] * xz
            J[:, 10, 2] = SH_C3[1] * xy
            J[:, 11, 0] = -2.0 * SH_C3[2] * xy
            J[:, 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
            J[:, 11, 2] = 8.0 * SH_C3[2] * yz
            J[:, 12, 0] = -6.0 * SH_C3[3] * xz
            J[:, 12, 1] = -6.0 * SH_C3[3] * yz
            J[:, 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
            J[:, 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
            J[:, 13, 1] = -2.0 * SH_C3[4] * xy
            J[:, 13, 2] = 8.0 * SH_C3[4] * xz
            J[:, 14, 0] = 2.0 * SH_C3[5] * xz
            J[:, 14, 1] = -2.0 * SH_C3[5] * yz
            J[:, 14, 2] = SH_C3[5] * (xx - yy)
            J[:, 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
            J[:, 15, 1] = -6.0 * SH_C3[6] * xy
    if with_jacobian:
        return Y, J
    return Y


def eval_sh_color(sh, view_dir, degree):
    """Colour of one Gaussian seen along ``view_dir``.

    ``sh`` has shape ``(K, 3)`` with the DC coefficient first. The result is
    clamped at zero from below, after the +0.5 offset.
    """
    sh = np.asarray(sh, dtype=np.float64)
    Y = sh_basis(np.asarray(view_dir, dtype=np.float64)[None], degree)[0]
    K = num_sh_coeffs(degree)
    return np.maximum(Y @ sh[:K] + 0.5, 0.0)


def sh_colors(sh, dirs, degree):
    """Batched colour evaluation.

    Returns ``(rgb, raw)`` where ``raw`` is the pre-clamp value; the backward
    pass needs it to mask clamped channels.
    """
    K = num_sh_coeffs(degree)
    Y = sh_basis(dirs, degree)
    raw = np.einsum("nk,nkc->nc", Y, sh[:, :K]) + 0.5
    return np.maximum(raw, 0.0), raw


def sh_colors_backward(sh, dirs, degree, raw, d_rgb):
    """Partials of :func:`sh_colors` w.r.t. the coefficients and the (unit) direction."""
    K = num_sh_coeffs(degree)
    Y, J = sh_basis(dirs, degree, with_jacobian=True)
    g = np.where(raw > 0.0, d_rgb, 0.0)
    d_sh = np.zeros_like(sh)
    d_sh[:, :K] = Y[:, :, None] * g[:, None, :]
    # dL/ddir_a = sum_k sum_c g_c sh_kc J_ka
    d_dir = np.einsum("nc,nkc,nka->na", g, sh[:, :K], J)
    return d_sh, d_dir


# ---------------------------------------------------------------------------
# quaternions and covariance
# ---------------------------------------------------------------------------

def normalize_quaternions(q):
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norms <= QUAT_EPS):
        raise InvalidRotationError()
    return q / norms, norms


def normalize_backward(v, norms, d_unit):
    """Chain rule through ``v / |v|`` (works for any trailing dimension)."""
    u = v / norms
    return (d_unit - u * np.sum(u * d_unit, axis=-1, keepdims=True)) / norms


def quat_to_rotmat(q):
    """Rotation matrices for unit quaternions ``(w, x, y, z)``; shape ``(..., 3, 3)``."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q, dR):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = dR
    dw = 2.0 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
                - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2.0 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2.0 * x * g[:, 1, 1]
                - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2.0 * x * g[:, 2, 2])
    dy = 2.0 * (-2.0 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
                + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2.0 * y * g[:, 2, 2])
    dz = 2.0 * (-2.0 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
                - 2.0 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def covariance_matrices(scales, quats_unit):
    """Full ``(N, 3, 3)`` covariances ``R S S^T R^T`` from activated scales and unit quaternions."""
    R = quat_to_rotmat(quats_unit)
    M = R * scales[:, None, :]
    return M @ np.swapaxes(M, 1, 2)


def covariance_backward(scales, quats_unit, d_cov):
    """Partials of :func:`covariance_matrices` w.r.t. scales and unit quaternion entries."""
    R = quat_to_rotmat(quats_unit)
    M = R * scales[:, None, :]
    dM = (d_cov + np.swapaxes(d_cov, 1, 2)) @ M
    d_scales = np.einsum("nij,nij->nj", dM, R)
    dR = dM * scales[:, None, :]
    return d_scales, quat_to_rotmat_backward(quats_unit, dR)


def build_covariance(s, q):
    """Covariance of a single Gaussian as its 6 unique entries ``(xx, xy, xz, yy, yz, zz)``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (3,) or not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise ValueError("scale must be a finite, strictly positive 3-vector")
    qn, _ = normalize_quaternions(np.asarray(q, dtype=np.float64)[None])
    cov = covariance_matrices(s[None], qn)[0]
    return cov_to_six(cov)


def cov_to_six(cov):
    cov = np.asarray(cov)
    return np.stack([cov[..., 0, 0], cov[..., 0, 1], cov[..., 0, 2],
                     cov[..., 1, 1], cov[..., 1, 2], cov[..., 2, 2]], axis=-1)


def six_to_cov(six):
    six = np.asarray(six, dtype=np.float64)
    a, b, c, d, e, f = (six[..., i] for i in range(6))
    return np.stack([np.stack([a, b, c], -1), np.stack([b, d, e], -1),
                     np.stack([c, e, f], -1)], -2)


# ---------------------------------------------------------------------------
# the cloud
# ---------------------------------------------------------------------------

PER_GAUSSIAN_FIELDS = ("positions", "log_scales", "rotations", "opacity_logits",
                       "sh_coeffs", "embeddings")


@dataclass
class GaussianCloud:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    embeddings: np.ndarray
    sh_degree: int = 1

    def __post_init__(self):
        for name in PER_GAUSSIAN_FIELDS:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))

    @property
    def n(self):
        return self.positions.shape[0]

    @property
    def embed_dim(self):
        return self.embeddings.shape[1]

    @classmethod
    def create(cls, positions, colors=None, *, sh_degree=1, embed_dim=32,
               log_scales=None, opacity=0.1, rng=None, embed_std=0.1):
        """Fresh cloud at ``positions`` with identity rotations and DC-only colour."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = positions.shape[0]
        rng = np.random.default_rng(0) if rng is None else rng
        K = num_sh_coeffs(sh_degree)
        sh = np.zeros((n, K, 3))
        if colors is not None:
            sh[:, 0, :] = rgb_to_sh_dc(np.asarray(colors, dtype=np.float64).reshape(n, 3))
        ls = np.asarray(np.log(0.05) if log_scales is None else log_scales, dtype=np.float64)
        if ls.ndim == 1:
            ls = ls[:, None]
        log_scales = np.broadcast_to(ls, (n, 3))
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        return cls(
            positions=positions.copy(),
            log_scales=np.array(log_scales),
            rotations=rotations,
            opacity_logits=np.full(n, float(logit(opacity))),
            sh_coeffs=sh,
            embeddings=rng.normal(0.0, embed_std, size=(n, embed_dim)),
            sh_degree=sh_degree,
        )

    def validate(self):
        n = self.n
        K = num_sh_coeffs(self.sh_degree)
        if not 0 <= self.sh_degree <= MAX_SH_DEGREE:
            raise DataError(f"sh_degree {self.sh_degree} outside [0, {MAX_SH_DEGREE}]")
        shapes = {
            "positions": (n, 3), "log_scales": (n, 3), "rotations": (n, 4),
            "opacity_logits": (n,), "sh_coeffs": (n, K, 3),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise DataError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise DataError(f"embeddings has shape {self.embeddings.shape}, expected ({n}, D_e)")

    def arrays(self):
        return {name: getattr(self, name) for name in PER_GAUSSIAN_FIELDS}

    def copy(self):
        return GaussianCloud(**{k: v.copy() for k, v in self.arrays().items()},
                             sh_degree=self.sh_degree)

    def append(self, **rows):
        """Append rows given per field; missing fields are an error."""
        for name in PER_GAUSSIAN_FIELDS:
            extra = np.asarray(rows[name], dtype=np.float64)
            setattr(self, name, np.concatenate([getattr(self, name), extra], axis=0))

    def keep(self, mask):
        for name in PER_GAUSSIAN_FIELDS:
            setattr(self, name, np.ascontiguousarray(getattr(self, name)[mask]))

    def checksum(self):
        import hashlib
        h = hashlib.sha256()
        for name in PER_GAUSSIAN_FIELDS:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()


@dataclass
class ActivatedGaussians:
    """Activated attributes plus what the backward pass needs to undo the activations."""

    positions: np.ndarray
    log_scales: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    quat_norms: np.ndarray
    opacity_logits: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    sh_degree: int = 1
    extras: dict = field(default_factory=dict)


def activated_view(cloud):
    """Apply exp / sigmoid / normalisation to the raw parameters."""
    for name in ("positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs"):
        arr = getattr(cloud, name)
        bad = ~np.isfinite(arr.reshape(arr.shape[0], int(np.prod(arr.shape[1:])))).all(axis=1)
        if bad.any():
            raise DataError(f"non-finite {name} at Gaussian index {int(np.flatnonzero(bad)[0])}")
    norms = np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    zero = norms[:, 0] <= QUAT_EPS
    if zero.any():
        raise InvalidRotationError(f"invalid rotation at Gaussian index {int(np.flatnonzero(zero)[0])}")
    return ActivatedGaussians(
        positions=cloud.positions,
        log_scales=cloud.log_scales,
        scales=np.exp(cloud.log_scales),
        quats=cloud.rotations / norms,
        quat_norms=norms,
        opacity_logits=cloud.opacity_logits,
        opacity=sigmoid(cloud.opacity_logits),
        sh=cloud.sh_coeffs,
        sh_degree=cloud.sh_degree,
    )


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2", "int": "i4",
    "uint": "u4", "float": "f4", "double": "f8", "int8": "i1", "uint8": "u1",
    "int16": "i2", "uint16": "u2", "int32": "i4", "uint32": "u4",
    "float32": "f4", "float64": "f8",
}
_PLY_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int",
              "u4": "uint", "f4": "float", "f8": "double"}


def write_ply(path, columns):
    """Write a binary little-endian PLY with one ``vertex`` element.

    ``columns`` is an ordered mapping ``name -> 1-D array``; dtypes are kept.
    """
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    dtype = np.dtype([(k, np.asarray(columns[k]).dtype.newbyteorder("<")) for k in names])
    rec = np.empty(n, dtype=dtype)
    for k in names:
        rec[k] = columns[k]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for k in names:
        header.append(f"property {_PLY_NAMES[dtype[k].str[1:]]} {k}")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path):
    """Read the ``vertex`` element of a binary little-endian PLY into a dict of arrays."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise DataError(f"{path}: not a PLY file")
        props, n, fmt, in_vertex = [], None, None, False
        while True:
            line = fh.readline()
            if not line:
                raise DataError(f"{path}: truncated PLY header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n = int(tok[2])
                elif n is not None:
                    break
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list":
                    raise DataError(f"{path}: list properties are not supported")
                props.append((tok[2], "<" + _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise DataError(f"{path}: only binary_little_endian PLY is supported (got {fmt})")
        if n is None:
            raise DataError(f"{path}: no vertex element")
        dtype = np.dtype(props)
        buf = fh.read(dtype.itemsize * n)
        if len(buf) != dtype.itemsize * n:
            raise DataError(f"{path}: truncated vertex data")
        rec = np.frombuffer(buf, dtype=dtype, count=n)
    return {name: np.array(rec[name]) for name, _ in props}


def save_cloud_ply(cloud, path):
    K = num_sh_coeffs(cloud.sh_degree)
    cols = {}
    f4 = np.float32
    for i, ax in enumerate("xyz"):
        cols[ax] = cloud.positions[:, i].astype(f4)
    cols["opacity"] = cloud.opacity_logits.astype(f4)
    for i in range(3):
        cols[f"scale_{i}"] = cloud.log_scales[:, i].astype(f4)
    for i in range(4):
        cols[f"rot_{i}"] = cloud.rotations[:, i].astype(f4)
    for c in range(3):
        cols[f"f_dc_{c}"] = cloud.sh_coeffs[:, 0, c].astype(f4)
    # channel-major layout of the higher bands, as common 3DGS tooling expects
    rest = np.transpose(cloud.sh_coeffs[:, 1:K, :], (0, 2, 1)).reshape(cloud.n, 3 * (K - 1))
    for i in range(rest.shape[1]):
        cols[f"f_rest_{i}"] = rest[:, i].astype(f4)
    for i in range(cloud.embed_dim):
        cols[f"embed_{i}"] = cloud.embeddings[:, i].astype(f4)
    write_ply(path, cols)


def load_cloud_ply(path):
    cols = read_ply(path)
    try:
        n = len(cols["x"])
        pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
        log_scales = np.stack([cols[f"scale_{i}"] for i in range(3)], axis=1)
        rot = np.stack([cols[f"rot_{i}"] for i in range(4)], axis=1)
        dc = np.stack([cols[f"f_dc_{c}"] for c in range(3)], axis=1)
    except KeyError as exc:
        raise DataError(f"{path}: missing PLY property {exc}") from None
    n_rest = sum(1 for k in cols if k.startswith("f_rest_"))
    K = 1 + n_rest // 3
    degree = int(round(np.sqrt(K))) - 1
    if num_sh_coeffs(degree) != K or n_rest % 3:
        raise DataError(f"{path}: {n_rest} f_rest properties do not match any SH degree")
    sh = np.zeros((n, K, 3))
    sh[:, 0] = dc
    if n_rest:
        rest = np.stack([cols[f"f_rest_{i}"] for i in range(n_rest)], axis=1)
        sh[:, 1:] = np.transpose(rest.reshape(n, 3, K - 1), (0, 2, 1))
    d_e = sum(1 for k in cols if k.startswith("embed_"))
    emb = (np.stack([cols[f"embed_{i}"] for i in range(d_e)], axis=1)
           if d_e else np.zeros((n, 0)))
    return GaussianCloud(positions=pos, log_scales=log_scales, rotations=rot,
                         opacity_logits=cols["opacity"], sh_coeffs=sh,
                         embeddings=emb, sh_degree=degree)
