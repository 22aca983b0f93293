"""Compare the compiled and numpy compositing kernels.

    python benchmarks/bench_raster.py --gaussians 2000 --size 128 --repeats 5

Prints the median forward and backward time per backend and the speedup of
each backend over the numpy one. Both backends render the same splats and the
script checks that their images agree before timing.
"""

import argparse
import json
import statistics
import time

import numpy as np

from dynsplat.camera import Camera, look_at
from dynsplat.gaussians import covariance_matrices, rgb_to_sh_dc
from dynsplat.raster import available_backends, project_gaussians, render, render_backward


def make_scene(n, size, seed):
    rng = np.random.default_rng(seed)
    pos = rng.normal(0.0, 0.5, (n, 3))
    scales = np.exp(rng.uniform(np.log(0.01), np.log(0.08), (n, 3)))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacity = rng.uniform(0.05, 0.9, n)
    sh = np.zeros((n, 4, 3))
    sh[:, 0] = rgb_to_sh_dc(rng.uniform(0, 1, (n, 3)))
    f = 1.2 * size
    cam = Camera(look_at((0.0, -3.0, 0.5), (0, 0, 0)), f, f, size / 2, size / 2, size, size)
    splats, _ = project_gaussians(pos, covariance_matrices(scales, quats), opacity, sh, 1, cam)
    return splats, cam


def time_backend(name, splats, cam, repeats):
    fwd, bwd = [], []
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = render(splats, cam, backend=name)
        t1 = time.perf_counter()
        render_backward(out, np.ones_like(out.color))
        fwd.append(t1 - t0)
        bwd.append(time.perf_counter() - t1)
    return statistics.median(fwd), statistics.median(bwd), out.color


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gaussians", type=int, default=2000)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)

    splats, cam = make_scene(args.gaussians, args.size, args.seed)
    results, images = {}, {}
    for name in available_backends():
        f, b, img = time_backend(name, splats, cam, args.repeats)
        results[name] = {"forward_ms": 1e3 * f, "backward_ms": 1e3 * b}
        images[name] = img
    if len(images) > 1:
        diff = max(np.abs(images[a] - images["python"]).max() for a in images)
        if diff > 1e-9:
            raise SystemExit(f"backends disagree by {diff:.3g}")
    base = results["python"]
    print(f"{args.gaussians} gaussians, {args.size}x{args.size}, median of {args.repeats}")
    print(f"{'backend':<8} {'fwd ms':>9} {'bwd ms':>9} {'speedup':>8}")
    for name, r in results.items():
        r["speedup"] = (base["forward_ms"] + base["backward_ms"]) / (r["forward_ms"] + r["backward_ms"])
        print(f"{name:<8} {r['forward_ms']:9.2f} {r['backward_ms']:9.2f} {r['speedup']:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"config": vars(args), "results": results}, fh, indent=2)


if __name__ == "__main__":
    main()
