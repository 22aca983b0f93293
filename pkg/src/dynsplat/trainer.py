"""Optimisation loop: deform, render, loss, backward, Adam, density control."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import losses
from .adaptive import (DensifyConfig, SamplingConfig, densify_and_prune, sample_anchors,
                       write_anchor_csv)
from .deform import FUSION_MODES, OPACITY_MODES, DeformationField, OpacityMode, load_field, save_field
from .errors import ConfigError, DataError, NumericError
from .gaussians import PER_GAUSSIAN_FIELDS, GaussianCloud, load_cloud_ply, save_cloud_ply
from .optim import Adam, exp_decay
from .pipeline import render_frame, render_frame_backward


@dataclass
class TrainConfig:
    iterations: int = 7000
    seed: int = 0
    # learning rates
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_embedding: float = 1e-3
    lr_mlp: float = 1e-3
    lr_table: float = 1e-3
    # model
    sh_degree: int = 1
    embed_dim: int = 32
    temporal_dim: int = 32
    hidden_width: int = 128
    hidden_layers: int = 4
    fine_factor: int = 5
    coarse_factor: int = 5
    dc_only: bool = False
    fusion_mode: str = "product"
    opacity_mode: str = "aggressive"
    opacity_k: float = 10.0
    init_opacity: float = 0.1
    embed_std: float = 0.1
    table_std: float = 1.0
    # losses
    lambda_emb: float = 0.01
    lambda_w: float = 2000.0
    k_neighbors: int = 5
    dssim_start_iter: int = 10000
    dssim_period: int = 50
    dssim_active_span: int = 5
    # density control
    densify: bool = True
    densify_grad_threshold: float = 2e-4
    densify_split_scale: float = 0.01
    prune_opacity: float = 0.005
    densify_interval: int = 100
    densify_start_iter: int = 500
    densify_stop_iter: int = 15000
    max_gaussians: int = 200_000
    # canonical sampling
    sampling: bool = True
    sampling_error_threshold: float = 0.10
    sampling_top_fraction: float = 0.001
    sampling_max_new: int = 5000
    sampling_anchor_opacity: float = 0.1
    sampling_neighbor_pool: int = 8
    sampling_interval: int = 1000
    sampling_start_iter: int = 3000
    sampling_stop_iter: int = 15000
    # bookkeeping
    eval_every: int = 0
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        for f in dataclasses.fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) > 0:
                raise ConfigError(f"{f.name} must be > 0")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.opacity_mode not in OPACITY_MODES:
            raise ConfigError(f"opacity_mode must be one of {OPACITY_MODES}, "
                              f"got {self.opacity_mode!r}")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError("sh_degree must lie in [0, 3]")
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ConfigError("the MLP needs at least one hidden layer of width >= 1")
        try:
            self.loss_config()
            self.densify_config()
            self.sampling_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def loss_config(self):
        return losses.LossConfig(self.lambda_emb, self.lambda_w, self.k_neighbors,
                                 self.dssim_start_iter, self.dssim_period, self.dssim_active_span)

    def densify_config(self):
        return DensifyConfig(self.densify_grad_threshold, self.densify_split_scale,
                             self.prune_opacity, self.densify_interval, self.densify_start_iter,
                             self.densify_stop_iter, self.max_gaussians)

    def sampling_config(self):
        return SamplingConfig(self.sampling_error_threshold, self.sampling_top_fraction,
                              self.sampling_max_new, self.sampling_anchor_opacity,
                              self.sampling_neighbor_pool, self.sampling_interval,
                              self.sampling_start_iter, self.sampling_stop_iter)

    def opacity(self):
        return OpacityMode(self.opacity_mode, self.opacity_k)

    # -- flat key = value text
    @classmethod
    def keys(cls):
        return [f.name for f in dataclasses.fields(cls)]

    def with_overrides(self, pairs):
        """New config with ``{key: text value}`` applied; unknown keys raise ConfigError."""
        types = {f.name: f.type for f in dataclasses.fields(self)}
        values = dataclasses.asdict(self)
        for key, raw in pairs.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw, types[key])
        return TrainConfig(**values)

    @classmethod
    def from_text(cls, text, base=None):
        pairs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            pairs[k] = v
        return (base or cls()).with_overrides(pairs)

    @classmethod
    def from_file(cls, path, base=None):
        try:
            with open(path) as fh:
                return cls.from_text(fh.read(), base)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ}") from None


# ---------------------------------------------------------------------------

def init_cloud(xyz, rgb, cfg, rng):
    """Canonical field from an initial point cloud (3DGS-style scale init)."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if len(xyz) == 0:
        raise DataError("the dataset has no initial points")
    if len(xyz) > 1:
        k = min(3, len(xyz) - 1)
        d2 = ((xyz[:, None] - xyz[None]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        near = np.sort(d2, axis=1)[:, :k]
        scale = np.sqrt(np.maximum(near.mean(axis=1), 1e-7))
    else:
        scale = np.full(1, 0.05)
    return GaussianCloud.create(xyz, rgb, sh_degree=cfg.sh_degree, embed_dim=cfg.embed_dim,
                                log_scales=np.log(scale), opacity=cfg.init_opacity, rng=rng,
                                embed_std=cfg.embed_std)


def init_field(n_frames, cfg, rng):
    return DeformationField.create(
        n_frames, cfg.embed_dim, temporal_dim=cfg.temporal_dim,
        hidden=(cfg.hidden_width,) * cfg.hidden_layers, sh_degree=cfg.sh_degree,
        fusion_mode=cfg.fusion_mode, opacity_k=cfg.opacity_k, dc_only=cfg.dc_only,
        fine_factor=cfg.fine_factor, coarse_factor=cfg.coarse_factor,
        table_std=cfg.table_std, rng=rng)


METRIC_COLUMNS = ("iter", "l1", "dssim", "emb_reg", "total", "psnr", "n_gaussians",
                  "deform_ms", "step_ms")


def frame_loss(cloud, fld, cam, t, gt, opacity_mode, loss_cfg, use_dssim=False, knn=None,
               counters=None):
    """Total training loss for one view and its gradient w.r.t. every parameter.

    ``L1 + [use_dssim] * D-SSIM + lambda_emb * emb_reg``; the regulariser is
    skipped when ``knn`` is None. Returns ``(terms, render_result, grads)``
    with ``terms["total"]`` holding the sum.
    """
    res = render_frame(cloud, fld, cam, t, opacity_mode, counters=counters)
    l1, d_img = losses.l1_loss(res.color, gt)
    terms = {"l1": l1, "dssim": 0.0, "emb_reg": 0.0}
    if use_dssim:
        terms["dssim"], g = losses.dssim_loss(res.color, gt)
        d_img = d_img + g
    emb_grad = None
    if knn is not None:
        terms["emb_reg"], emb_grad = losses.emb_reg_loss(cloud.embeddings, knn)
    terms["total"] = terms["l1"] + terms["dssim"] + loss_cfg.lambda_emb * terms["emb_reg"]
    cloud_grads, field_grads = render_frame_backward(res, d_img, fld)
    if emb_grad is not None:
        cloud_grads["embeddings"] = cloud_grads["embeddings"] + loss_cfg.lambda_emb * emb_grad
    return terms, res, {**cloud_grads, **field_grads}


class Trainer:
    """Holds the model, optimiser state and schedules for one training run."""

    def __init__(self, dataset, cfg=None, cloud=None, fld=None, log_dir=None):
        self.cfg = cfg or TrainConfig()
        self.dataset = dataset
        self.rng = np.random.default_rng(self.cfg.seed)
        self.train_frames = dataset.train
        if not self.train_frames:
            raise DataError("dataset has no train frames")
        self._gt = {}
        self.cloud = cloud if cloud is not None else init_cloud(
            dataset.init_xyz, dataset.init_rgb, self.cfg, self.rng)
        self.field = fld if fld is not None else init_field(
            max(dataset.n_times, 2), self.cfg, self.rng)
        self.opacity_mode = self.cfg.opacity()
        self.loss_cfg = self.cfg.loss_config()
        self.densify_cfg = self.cfg.densify_config()
        self.sampling_cfg = self.cfg.sampling_config()
        self.optimizer = Adam(self._lrs())
        self.knn = None
        self.iteration = 0
        self.counters = {}
        self.history = []
        self.anchor_log = []
        self.log_dir = log_dir
        self._reset_accum()

    def _lrs(self):
        c = self.cfg
        lrs = {"positions": c.lr_position, "log_scales": c.lr_scale, "rotations": c.lr_rotation,
               "opacity_logits": c.lr_opacity, "sh_coeffs": c.lr_sh,
               "embeddings": c.lr_embedding, "table_fine": c.lr_table,
               "table_coarse": c.lr_table}
        for name in self.field.params():
            if name.startswith("mlp_"):
                lrs[name] = c.lr_mlp
        return lrs

    def _reset_accum(self):
        self.grad_accum = np.zeros(self.cloud.n)
        self.grad_count = np.zeros(self.cloud.n)

    def _gt_image(self, frame):
        key = id(frame)
        if key not in self._gt:
            self._gt[key] = frame.rgb()
        return self._gt[key]

    def params(self):
        p = self.cloud.arrays()
        p.update(self.field.params())
        return p

    def _ensure_knn(self):
        if self.knn is None or self.knn.stale or self.knn.n != self.cloud.n:
            self.knn = losses.build_knn(self.cloud.positions, self.loss_cfg.k_neighbors,
                                        self.loss_cfg.lambda_w, self.iteration)
        return self.knn

    def next_frame(self):
        return self.train_frames[int(self.rng.integers(len(self.train_frames)))]

    def train_step(self, frame=None):
        """One optimisation step on ``frame`` (random train frame by default)."""
        t_start = time.perf_counter()
        frame = self.next_frame() if frame is None else frame
        self.iteration += 1
        it = self.iteration
        gt = self._gt_image(frame)
        knn = self._ensure_knn() if self.loss_cfg.lambda_emb > 0 and self.cloud.n >= 2 else None
        terms, res, grads = frame_loss(self.cloud, self.field, frame.camera, frame.t, gt,
                                       self.opacity_mode, self.loss_cfg,
                                       losses.dssim_active(it, self.loss_cfg), knn, self.counters)
        total = terms.pop("total")
        for name, val in (*terms.items(), ("total", total)):
            if not np.isfinite(val):
                raise NumericError(f"iteration {it}: non-finite {name} loss ({val})")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"iteration {it}: non-finite gradient for {name}")
        lr_pos = exp_decay(self.cfg.lr_position, self.cfg.lr_position_final, it - 1,
                           self.cfg.iterations)
        self.optimizer.step(self.params(), grads, {"positions": lr_pos})

        n_before = self.cloud.n
        ids = res.out.ctx["ids"]
        visible = np.bincount(ids, minlength=n_before) > 0
        self.grad_accum[visible] += res.out.screen_grad_ndc[visible]
        self.grad_count[visible] += 1

        if self.cfg.sampling and self.sampling_cfg.due(it):
            result, picks = sample_anchors(self.cloud, self.field, res.out, gt, frame.camera,
                                           frame.t, self.sampling_cfg, self.optimizer, self.knn)
            if result.count:
                self.grad_accum = np.concatenate([self.grad_accum, np.zeros(result.count)])
                self.grad_count = np.concatenate([self.grad_count, np.zeros(result.count)])
                self.anchor_log.append((it, picks, result))
                if self.log_dir:
                    write_anchor_csv(os.path.join(self.log_dir, "anchors.csv"), it, picks, result)
        if self.cfg.densify and self.densify_cfg.due(it):
            counts, _ = densify_and_prune(self.cloud, self.grad_accum, self.grad_count,
                                          self.densify_cfg, self.optimizer, self.knn, self.rng)
            self.counters["cloned"] = self.counters.get("cloned", 0) + counts["cloned"]
            self.counters["split"] = self.counters.get("split", 0) + counts["split"]
            self.counters["pruned"] = self.counters.get("pruned", 0) + counts["pruned"]
            self._reset_accum()

        metrics = {"iter": it, **terms, "total": total, "psnr": losses.psnr(res.color, gt),
                   "n_gaussians": self.cloud.n, "deform_ms": 1e3 * res.deform_seconds,
                   "step_ms": 1e3 * (time.perf_counter() - t_start)}
        self.history.append(metrics)
        return metrics

    def train(self, iterations=None, callback=None):
        n = self.cfg.iterations if iterations is None else iterations
        for _ in range(n):
            m = self.train_step()
            if callback is not None:
                callback(self, m)
            if self.log_dir and self.cfg.checkpoint_every and \
                    self.iteration % self.cfg.checkpoint_every == 0:
                save_checkpoint(self, os.path.join(self.log_dir, f"ckpt_{self.iteration:06d}"))
        return self.history

    def evaluate(self, frames=None, deform=True):
        frames = self.dataset.test if frames is None else frames
        return evaluate(self.cloud, self.field, frames, self.opacity_mode, deform=deform)

    def write_metrics(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            w.writeheader()
            for row in self.history:
                w.writerow({k: row[k] for k in METRIC_COLUMNS})


def evaluate(cloud, fld, frames, opacity_mode=OpacityMode(), deform=True):
    """Mean PSNR / SSIM / L1 over ``frames``. Never mutates the model."""
    if not frames:
        raise ValueError("evaluation set is empty")
    ps, ss, l1 = [], [], []
    for f in frames:
        res = render_frame(cloud, fld, f.camera, f.t, opacity_mode, deform=deform)
        gt = f.rgb()
        ps.append(losses.psnr(res.color, gt))
        l1.append(float(np.abs(res.color - gt).mean()))
        ss.append(losses.ssim(res.color, gt) if min(gt.shape[:2]) >= losses.SSIM_WINDOW
                  else float("nan"))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "l1": float(np.mean(l1)),
            "n_views": len(frames)}


def benchmark_deform(n_gaussians=100_000, n_timesteps=1, modes=("product", "dual"), *,
                     embed_dim=32, temporal_dim=32, hidden=(128, 128, 128, 128), sh_degree=1,
                     n_frames=60, repetitions=20, seed=0):
    """Median wall time of one deformation of ``n_gaussians`` per mode, plus MLP pass counts."""
    rng = np.random.default_rng(seed)
    emb = rng.normal(0.0, 0.1, (n_gaussians, embed_dim))
    times = np.linspace(0.0, 1.0, max(n_timesteps, 1))
    out = {}
    for mode in modes:
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        fld = DeformationField.create(n_frames, embed_dim, temporal_dim=temporal_dim,
                                      hidden=hidden, sh_degree=sh_degree, fusion_mode=mode,
                                      rng=np.random.default_rng(seed))
        fld.forward(emb[:8], 0.0)  # warm-up
        fld.mlp_passes = 0
        walls = []
        calls = 0
        for _ in range(repetitions):
            t0 = time.perf_counter()
            for t in times:
                fld.forward(emb, float(t))
                calls += 1
            walls.append(time.perf_counter() - t0)
        out[mode] = {"seconds": float(np.median(walls)),
                     "passes_per_step": fld.mlp_passes / calls}
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(trainer, path):
    """Directory with ``cloud.ply``, ``field.dsdf``, ``optim.npz`` and ``state.json``."""
    os.makedirs(path, exist_ok=True)
    save_cloud_ply(trainer.cloud, os.path.join(path, "cloud.ply"))
    save_field(trainer.field, os.path.join(path, "field.dsdf"))
    with open(os.path.join(path, "optim.npz"), "wb") as fh:
        np.savez(fh, **trainer.optimizer.state_arrays())
    with open(os.path.join(path, "state.json"), "w") as fh:
        json.dump({"iteration": trainer.iteration, "opacity_mode": trainer.opacity_mode.kind,
                   "opacity_k": trainer.opacity_mode.k, "config": dataclasses.asdict(trainer.cfg)},
                  fh, indent=1, sort_keys=True)
    return path


def load_checkpoint(path):
    """Returns ``(cloud, field, opacity_mode, state_dict)``."""
    if not os.path.isdir(path):
        raise DataError(f"checkpoint {path} not found")
    cloud = load_cloud_ply(os.path.join(path, "cloud.ply"))
    fld = load_field(os.path.join(path, "field.dsdf"))
    state = {}
    sp = os.path.join(path, "state.json")
    if os.path.exists(sp):
        with open(sp) as fh:
            state = json.load(fh)
    mode = OpacityMode(state.get("opacity_mode", "aggressive"),
                       float(state.get("opacity_k", fld.opacity_k)))
    return cloud, fld, mode, state


def checkpoint_files(path):
    return [os.path.join(path, n) for n in ("cloud.ply", "field.dsdf", "optim.npz", "state.json")]


__all__ = ["TrainConfig", "Trainer", "frame_loss", "evaluate", "benchmark_deform",
           "save_checkpoint", "load_checkpoint", "init_cloud", "init_field", "PER_GAUSSIAN_FIELDS"]
