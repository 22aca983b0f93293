"""Command line entry point: ``dynsplat <subcommand> ...``.

Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 numeric failure.
Config precedence: defaults < ``--config`` file < ``--set key=value`` < dedicated flags
(``--seed``, ``--fusion``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time

import numpy as np

from .errors import ConfigError, DataError, NumericError

THREADS_ENV = "DYNSPLAT_THREADS"


def _say(*parts):
    print(*parts, flush=True)


def _parse_sets(items):
    pairs = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def _config(args):
    from .trainer import TrainConfig
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = TrainConfig.from_file(args.config)
    cfg = cfg.with_overrides(_parse_sets(getattr(args, "set", None)))
    extra = {}
    if getattr(args, "seed", None) is not None:
        extra["seed"] = args.seed
    if getattr(args, "fusion", None):
        extra["fusion_mode"] = args.fusion
    if getattr(args, "iterations", None) is not None:
        extra["iterations"] = args.iterations
    return cfg.with_overrides(extra) if extra else cfg


def _dataset(spec, seed=None):
    from .scenes import CANNED, generate_synthetic, load_dataset
    if spec is None:
        raise ConfigError("--data is required")
    if spec in CANNED:
        kw = {} if seed is None else {"seed": seed}
        return generate_synthetic(CANNED[spec](**kw))
    path = os.path.join(spec, "manifest.json") if os.path.isdir(spec) else spec
    return load_dataset(path)


def _out_dir(path):
    if not path:
        raise ConfigError("--out is required")
    os.makedirs(path, exist_ok=True)
    return path


def _set_threads(n):
    from .raster import set_num_threads
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return None
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    set_num_threads(n)
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _frame(ds, camera, t):
    cams = ds.cameras()
    if camera is None:
        test = ds.test
        camera = test[0].camera_id if test else 0
    ids = sorted({f.camera_id for f in ds.frames})
    if camera not in ids:
        raise ConfigError(f"camera index {camera} out of range (have {ids})")
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"time {t} outside [0, 1]")
    return cams[ids.index(camera)]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args):
    from .trainer import Trainer, save_checkpoint
    cfg = _config(args)
    ds = _dataset(args.data)
    out = _out_dir(args.out)
    anchors = os.path.join(out, "anchors.csv")
    if os.path.exists(anchors):
        os.remove(anchors)
    tr = Trainer(ds, cfg, log_dir=out)
    t0 = time.perf_counter()
    tr.train()
    seconds = time.perf_counter() - t0
    metrics = os.path.join(out, "metrics.csv")
    tr.write_metrics(metrics)
    ckpt = save_checkpoint(tr, os.path.join(out, "checkpoint"))
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    ev = tr.evaluate(ds.test or ds.train)
    summary = {"psnr": ev["psnr"], "ssim": ev["ssim"], "N": tr.cloud.n,
               "train_seconds": seconds, "iterations": tr.iteration,
               "counters": tr.counters}
    ev_path = os.path.join(out, "eval.json")
    with open(ev_path, "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    _say("metrics:", metrics)
    _say("checkpoint:", ckpt)
    if os.path.exists(anchors):
        _say("anchors:", anchors)
    _say("eval:", ev_path)
    _say(f"held-out psnr {ev['psnr']:.3f} dB, ssim {ev['ssim']:.4f}, N={tr.cloud.n}")
    return 0


def cmd_render(args):
    from .pipeline import render_frame
    from .scenes import write_png
    from .trainer import load_checkpoint
    cloud, fld, mode, _ = load_checkpoint(args.ckpt)
    ds = _dataset(args.data)
    cam = _frame(ds, args.camera, args.t)
    res = render_frame(cloud, fld, cam, args.t, mode, deform=not args.canonical)
    out = _out_dir(args.out)
    path = os.path.join(out, f"render_t{args.t:.4f}.png")
    write_png(path, np.clip(res.color, 0.0, 1.0))
    _say("image:", path)
    return 0


def cmd_eval(args):
    from .trainer import evaluate, load_checkpoint
    cloud, fld, mode, _ = load_checkpoint(args.ckpt)
    ds = _dataset(args.data)
    frames = ds.test or ds.train
    ev = evaluate(cloud, fld, frames, mode)
    ev["N"] = cloud.n
    text = json.dumps(ev, indent=1, sort_keys=True)
    if args.out:
        path = os.path.join(_out_dir(args.out), "eval.json")
        with open(path, "w") as fh:
            fh.write(text)
        _say("eval:", path)
    _say(text)
    return 0


NAN_COLOR = np.array([255, 0, 255], dtype=np.uint8)


def depth_to_png(depth):
    """Grey-scale visualisation (near = bright); NaN pixels get a magenta sentinel."""
    finite = np.isfinite(depth)
    img = np.zeros(depth.shape + (3,), dtype=np.uint8)
    if finite.any():
        lo, hi = float(depth[finite].min()), float(depth[finite].max())
        span = hi - lo if hi > lo else 1.0
        g = np.rint(255.0 * (1.0 - (depth - lo) / span))
        g = np.clip(np.where(finite, g, 0), 0, 255).astype(np.uint8)
        img[...] = g[..., None]
    img[~finite] = NAN_COLOR
    return img


def cmd_depth(args):
    from PIL import Image

    from .pipeline import render_frame
    from .trainer import load_checkpoint
    cloud, fld, mode, _ = load_checkpoint(args.ckpt)
    ds = _dataset(args.data)
    cam = _frame(ds, args.camera, args.t)
    res = render_frame(cloud, fld, cam, args.t, mode)
    depth = res.out.median_depth if args.mode == "median" else res.out.mean_depth
    out = _out_dir(args.out)
    stem = os.path.join(out, f"depth_{args.mode}_t{args.t:.4f}")
    np.save(stem + ".npy", depth.astype("<f4"))
    Image.fromarray(depth_to_png(depth)).save(stem + ".png")
    _say("depth:", stem + ".npy")
    _say("image:", stem + ".png")
    return 0


def cmd_ablate_fusion(args):
    from .trainer import Trainer
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise ConfigError("--modes must name at least one fusion mode")
    base = _config(args)
    ds = _dataset(args.data)
    out = _out_dir(args.out)
    rows = []
    for mode in modes:
        row = {"mode": mode, "status": "ok", "psnr": "", "ssim": "", "deform_ms": "",
               "mlp_passes": ""}
        try:
            cfg = base.with_overrides({"fusion_mode": mode})
            tr = Trainer(ds, cfg)
            tr.field.mlp_passes = 0
            tr.train()
            passes = tr.field.mlp_passes / max(tr.iteration, 1)
            ev = tr.evaluate(ds.test or ds.train)
            row.update(psnr=ev["psnr"], ssim=ev["ssim"],
                       deform_ms=float(np.median([h["deform_ms"] for h in tr.history])),
                       mlp_passes=passes)
        except (ConfigError, DataError, NumericError, ValueError) as exc:
            row["status"] = f"failed: {exc}"
        rows.append(row)
        _say(f"{mode}: {row['status']} psnr={row['psnr']}")
    path = os.path.join(out, "ablation.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["mode", "psnr", "ssim", "deform_ms", "mlp_passes",
                                           "status"])
        w.writeheader()
        w.writerows(rows)
    _say("table:", path)
    return 0


def _tupled(v):
    return tuple(_tupled(x) for x in v) if isinstance(v, list) else v


def cmd_gen_synthetic(args):
    from .scenes import CANNED, generate_synthetic, write_dataset
    if args.scene not in CANNED:
        raise ConfigError(f"unknown scene {args.scene!r} (have {sorted(CANNED)})")
    spec = CANNED[args.scene]()
    types = {f.name: f.type for f in dataclasses.fields(spec)}
    overrides = {}
    for k, v in _parse_sets(args.set).items():
        if k not in types or k == "primitives":
            raise ConfigError(f"unknown scene key {k!r}")
        try:
            val = json.loads(v)
        except json.JSONDecodeError:
            val = v
        overrides[k] = _tupled(val)
    if args.seed is not None:
        overrides["seed"] = args.seed
    spec = dataclasses.replace(spec, **overrides)
    ds = generate_synthetic(spec)
    path = write_dataset(ds, _out_dir(args.out))
    _say("manifest:", path)
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dynsplat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--out", help="output directory (created if absent)")
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or 1)")
        if data:
            sp.add_argument("--data", help="manifest path, dataset directory or canned scene name")

    def training(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--iterations", type=int, default=None)

    sp = sub.add_parser("train", help="optimise a model on a dataset")
    common(sp)
    training(sp)
    sp.add_argument("--fusion", default=None, help="temporal fusion mode")
    sp.set_defaults(func=cmd_train)

    for name, func, hlp in (("render", cmd_render, "render one view"),
                            ("depth", cmd_depth, "dump a mean or median depth map")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--ckpt", required=True, help="checkpoint directory")
        sp.add_argument("--camera", type=int, default=None, help="camera index")
        sp.add_argument("--t", type=float, default=0.0, help="normalised time in [0, 1]")
        if name == "depth":
            sp.add_argument("--mode", choices=("mean", "median"), default="median")
        else:
            sp.add_argument("--canonical", action="store_true",
                            help="draw the undeformed canonical field")
        sp.set_defaults(func=func)

    sp = sub.add_parser("eval", help="PSNR / SSIM of a checkpoint on held-out frames")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate-fusion", help="train once per fusion mode and tabulate")
    common(sp)
    training(sp)
    sp.add_argument("--modes", default="coarse,fine,add,concat,product,dual")
    sp.set_defaults(func=cmd_ablate_fusion)

    sp = sub.add_parser("gen-synthetic", help="write a canned synthetic dataset to disk")
    common(sp, data=False)
    sp.add_argument("--scene", default="orbit-blobs")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="scene spec override")
    sp.set_defaults(func=cmd_gen_synthetic)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        limiter = _set_threads(args.threads)
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
