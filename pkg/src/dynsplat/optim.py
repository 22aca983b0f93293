"""Adam over named parameter groups whose row count can change between steps."""

from __future__ import annotations

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15


def exp_decay(lr_init, lr_final, step, max_steps):
    """Log-linear interpolation from ``lr_init`` to ``lr_final`` over ``max_steps``."""
    if max_steps <= 0:
        return lr_init
    t = min(max(step / max_steps, 0.0), 1.0)
    return float(np.exp(np.log(lr_init) * (1.0 - t) + np.log(lr_final) * t))


class Adam:
    """One Adam state per named array.

    Arrays are updated in place. Per-Gaussian groups can grow (new rows get
    zero moments) or shrink (rows dropped with their moments).
    """

    def __init__(self, lrs):
        self.lrs = dict(lrs)
        self.m = {}
        self.v = {}
        self.steps = {}

    def _ensure(self, name, p):
        if name not in self.m:
            self.m[name] = np.zeros_like(p)
            self.v[name] = np.zeros_like(p)
            self.steps[name] = 0
        elif self.m[name].shape != p.shape:
            raise ValueError(f"optimizer state for {name!r} has shape {self.m[name].shape}, "
                             f"parameter has {p.shape}")

    def step(self, params, grads, lr_override=None):
        lr_override = lr_override or {}
        for name, g in grads.items():
            if name not in self.lrs:
                continue
            p = params[name]
            self._ensure(name, p)
            lr = lr_override.get(name, self.lrs[name])
            m, v = self.m[name], self.v[name]
            m *= BETA1
            m += (1.0 - BETA1) * g
            v *= BETA2
            v += (1.0 - BETA2) * g * g
            self.steps[name] += 1
            s = self.steps[name]
            mhat = m / (1.0 - BETA1 ** s)
            vhat = v / (1.0 - BETA2 ** s)
            p -= lr * mhat / (np.sqrt(vhat) + EPS)

    def append_rows(self, names, n_new):
        for name in names:
            if name in self.m:
                pad = np.zeros((n_new,) + self.m[name].shape[1:])
                self.m[name] = np.concatenate([self.m[name], pad])
                self.v[name] = np.concatenate([self.v[name], pad])

    def keep_rows(self, names, mask):
        for name in names:
            if name in self.m:
                self.m[name] = np.ascontiguousarray(self.m[name][mask])
                self.v[name] = np.ascontiguousarray(self.v[name][mask])

    def rows(self, name):
        return self.m[name].shape[0] if name in self.m else None

    def state_arrays(self):
        out = {}
        for name in sorted(self.m):
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
            out[f"step/{name}"] = np.array(self.steps[name], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays):
        for key, val in arrays.items():
            kind, name = key.split("/", 1)
            if kind == "m":
                self.m[name] = np.array(val, dtype=np.float64)
            elif kind == "v":
                self.v[name] = np.array(val, dtype=np.float64)
            elif kind == "step":
                self.steps[name] = int(val)
