"""AdamW with decoupled weight decay, plus the cosine schedule."""

from __future__ import annotations

import numpy as np


def cosine_lr(step, total):
    """Decay factor in [0, 1]: 1 at step 0, 0 at `total`."""
    if total <= 0:
        return 1.0
    t = min(max(step, 0), total)
    return float(0.5 * (1.0 + np.cos(np.pi * t / total)))


class AdamW:
    """Named-parameter AdamW; state round-trips through plain dicts."""

    def __init__(self, named_params, lr=4e-5, betas=(0.9, 0.95), eps=1e-8,
                 weight_decay=0.01):
        self.params = list(named_params)
        if len({n for n, _ in self.params}) != len(self.params):
            raise ValueError("duplicate parameter names")
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = float(eps)
        self.wd = float(weight_decay)
        self.t = 0
        self.m = {n: np.zeros_like(p.data, dtype=np.float64)
                  for n, p in self.params}
        self.v = {n: np.zeros_like(p.data, dtype=np.float64)
                  for n, p in self.params}

    def step(self, lr_scale=1.0):
        self.t += 1
        lr = self.lr * float(lr_scale)
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = np.asarray(p.grad, dtype=np.float64)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data.astype(np.float64) - upd
                      - lr * self.wd * p.data).astype(p.data.dtype)

    def prepared_step(self, lr_scale=1.0):
        """Advance moments once and return (apply, revert) closures.

        apply(factor) writes w0 - factor*lr*(adam_dir + wd*w0); revert()
        restores w0 exactly. Lets a caller run a backtracking line search
        on a deterministic objective without touching the moments again.
        """
        self.t += 1
        base_lr = self.lr * float(lr_scale)
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        rows = []
        for name, p in self.params:
            if p.grad is None:
                continue
            g = np.asarray(p.grad, dtype=np.float64)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            w0 = p.data.copy()
            direction = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * w0
            rows.append((p, w0, w0.astype(np.float64), direction))

        def apply(factor=1.0):
            lr = base_lr * float(factor)
            for p, w0, w64, d in rows:
                p.data = (w64 - lr * d).astype(w0.dtype)

        def revert():
            for p, w0, _, _ in rows:
                p.data = w0.copy()

        return apply, revert

    def state_dict(self):
        return {"t": self.t,
                "m": {n: a.copy() for n, a in self.m.items()},
                "v": {n: a.copy() for n, a in self.v.items()}}

    def load_state_dict(self, state):
        if set(state["m"]) != set(self.m):
            raise KeyError("optimizer state names do not match parameters")
        self.t = int(state["t"])
        for n in self.m:
            self.m[n] = np.asarray(state["m"][n], dtype=np.float64).copy()
            self.v[n] = np.asarray(state["v"][n], dtype=np.float64).copy()
