"""Reconstruction loss and image quality metrics.

The perceptual term avoids any pretrained feature network: the surrogate
feature map is the stack of finite-difference image gradients at full,
half, and quarter resolution. It vanishes on constant brightness shifts
and reacts to structure, which is what the loss needs it for.
"""

from __future__ import annotations

import numpy as np

from ..tensor import Tensor, getitem, tmean

PERC_SCALES = (1, 2, 4)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x, True
    return Tensor(np.asarray(x, dtype=np.float64)), False


def _pool(x, s):
    """Average pool by factor s over the two leading (spatial) axes."""
    if s == 1:
        return x
    h, w = x.data.shape[0], x.data.shape[1]
    hs, ws = (h // s) * s, (w // s) * s
    acc = None
    for i in range(s):
        for j in range(s):
            part = getitem(x, (slice(i, hs, s), slice(j, ws, s)))
            acc = part if acc is None else acc + part
    return acc * (1.0 / (s * s))


def _grad_terms(x):
    dx = getitem(x, (slice(None), slice(1, None))) \
        - getitem(x, (slice(None), slice(0, -1)))
    dy = getitem(x, (slice(1, None),)) - getitem(x, (slice(0, -1),))
    return dx, dy


def recon_loss(render, target, lam_perc=0.5):
    """Mean squared pixel error plus a multi-scale gradient-difference term.

    Accepts a Tensor render (differentiable) or a plain array; the target is
    always treated as a constant. Returns a scalar of the input's kind.
    """
    r, was_tensor = _as_tensor(render)
    t = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if r.data.shape != t.shape:
        raise ValueError(f"render shape {r.data.shape} != target {t.shape}")
    if r.data.ndim not in (2, 3):
        raise ValueError(f"images must be (H, W) or (H, W, C), got {r.data.ndim}d")
    tt = Tensor(t)
    diff = r - tt
    loss = tmean(diff * diff)
    if lam_perc > 0:
        h, w = t.shape[:2]
        perc = None
        for s in PERC_SCALES:
            if h // s < 2 or w // s < 2:
                continue
            rs, ts = _pool(r, s), _pool(tt, s)
            for dr, dt in zip(_grad_terms(rs), _grad_terms(ts)):
                d = dr - dt
                term = tmean(d * d)
                perc = term if perc is None else perc + term
        if perc is not None:
            loss = loss + perc * float(lam_perc)
    return loss if was_tensor else float(loss.data)


def psnr(a, b):
    """-10 log10(MSE) for [0,1] images, capped at 99 dB near zero error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 99.0
    return float(-10.0 * np.log10(mse))


def ssim_window(size=11, sigma=1.5):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean structural similarity, 11x11 Gaussian window, valid region only."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = ssim_window()
    k = win.shape[0]
    if a.shape[0] < k or a.shape[1] < k:
        raise ValueError(f"images must be at least {k}x{k} for ssim")

    def filt(x):
        v = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(0, 1))
        return np.einsum("hwcij,ij->hwc", v, win)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
