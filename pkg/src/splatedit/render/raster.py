"""Tile-based differentiable splat rasterizer.

Forward: EWA projection of each Gaussian to a 2D mean/covariance
(cov2d = J W Sigma W^T J^T + blur floor), front-to-back alpha compositing
per pixel with transmittance early-stop. Backward: analytic gradients to
every Gaussian attribute (position, log-scale, rotation, opacity logit,
SH), treating the depth sort as constant.

Per-pixel semantics are tile-independent: a Gaussian contributes to a
pixel iff its Mahalanobis distance there is under the cutoff, so the tile
decomposition is purely an acceleration structure and results match a
per-pixel full-sort composite bit for bit.

All internal math is float64; pixel (ix, iy) samples at coordinate
(ix, iy) exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..splats.model import quat_to_rotmat, sigmoid
from ..splats.sh import n_coeffs, sh_basis, sh_basis_grad
from ..tensor import Tensor, custom_op


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class RasterConfig:
    tile_size: int = 16
    background: tuple = (0.0, 0.0, 0.0)
    near: float = 0.01
    alpha_clamp: float = 0.999   # alpha saturates just below 1
    t_stop: float = 1e-4         # stop compositing once transmittance drops here
    alpha_skip: float = 1.0 / 255.0
    cutoff_sigma: float = 3.5    # per-pixel Mahalanobis support radius
    blur_floor: float = 0.3      # px^2 added to cov2d diagonal
    sh_degree: int | None = None  # None: use the scene's stored degree

    def exact(self):
        """Smooth configuration for gradient checks: no support cutoff."""
        return replace(self, cutoff_sigma=np.inf, alpha_skip=0.0)


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass(frozen=True)
class RenderOutput:
    color: np.ndarray          # (H, W, 3) in [0, 1]
    alpha: np.ndarray          # (H, W)
    depth: np.ndarray          # (H, W) expected camera-space depth
    contrib_count: np.ndarray  # (H, W) int32 composited splats per pixel


def _check_finite(name, arr):
    arr = np.asarray(arr)
    if arr.size == 0:
        return
    flat = arr.reshape(len(arr), -1)
    bad = ~np.all(np.isfinite(flat), axis=1)
    if np.any(bad):
        raise RenderError(f"non-finite {name} at gaussian index {int(np.argmax(bad))}")


def _project_arrays(positions, log_scales, rotations, opacity_logits, sh,
                    cam, cfg):
    """Vectorized projection of the whole scene. Returns the per-Gaussian
    intermediates needed by both compositing and the backward pass."""
    n = len(positions)
    stored = int(np.sqrt(sh.shape[-1])) - 1
    deg = cfg.sh_degree if cfg.sh_degree is not None else stored
    if deg > stored:
        raise ValueError(f"render degree {deg} exceeds stored degree {stored}")

    p = positions.astype(np.float64)
    W = cam.R
    t = p @ W.T + cam.t
    tz = t[:, 2]
    in_front = tz > cfg.near
    tz_safe = np.where(in_front, tz, 1.0)

    u = cam.fx * t[:, 0] / tz_safe + cam.cx
    v = cam.fy * t[:, 1] / tz_safe + cam.cy
    mean2d = np.stack([u, v], axis=1)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / tz_safe
    J[:, 1, 1] = cam.fy / tz_safe
    J[:, 0, 2] = -cam.fx * t[:, 0] / tz_safe ** 2
    J[:, 1, 2] = -cam.fy * t[:, 1] / tz_safe ** 2

    Rq = quat_to_rotmat(rotations)
    s = np.exp(log_scales.astype(np.float64))
    A = Rq * s[:, None, :]                      # R diag(s)
    Sigma = A @ np.swapaxes(A, 1, 2)
    M = W @ Sigma @ W.T                         # camera-frame covariance
    V = J @ M @ np.swapaxes(J, 1, 2)
    V[:, 0, 0] += cfg.blur_floor
    V[:, 1, 1] += cfg.blur_floor

    det = V[:, 0, 0] * V[:, 1, 1] - V[:, 0, 1] * V[:, 1, 0]
    # cov2d so large that blur_floor is swamped can hit det == 0 or inf
    # exactly; those splats are culled below, so divide by a stand-in
    det_ok = np.isfinite(det) & (det > 0.0)
    inv = np.empty_like(V)
    inv[:, 0, 0] = V[:, 1, 1]
    inv[:, 1, 1] = V[:, 0, 0]
    inv[:, 0, 1] = -V[:, 0, 1]
    inv[:, 1, 0] = -V[:, 1, 0]
    inv /= np.where(det_ok, det, 1.0)[:, None, None]

    half_tr = 0.5 * (V[:, 0, 0] + V[:, 1, 1])
    lam_max = half_tr + np.sqrt(np.maximum(half_tr ** 2 - det, 0.0))
    if np.isfinite(cfg.cutoff_sigma):
        radius = cfg.cutoff_sigma * np.sqrt(lam_max)
    else:
        radius = np.full(n, max(cam.width, cam.height) * 4.0)

    visible = (in_front
               & (mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= cam.width - 1)
               & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= cam.height - 1))

    campos = cam.cam_position()
    off = p - campos
    dist = np.linalg.norm(off, axis=1)
    dirs = off / np.maximum(dist, 1e-12)[:, None]
    basis = sh_basis(dirs, deg)
    k = n_coeffs(deg)
    sh_used = sh[:, :, :k].astype(np.float64)
    raw = 0.5 + np.einsum("ncm,nm->nc", sh_used, basis)
    color = np.maximum(raw, 0.0)

    opac = sigmoid(opacity_logits)

    return dict(p=p, t=t, mean2d=mean2d, J=J, Rq=Rq, s=s, A=A, M=M,
                V=V, inv=inv, radius=radius, visible=visible, dirs=dirs,
                dist=dist, basis=basis, raw=raw, color=color, opac=opac,
                deg=deg, k=k, campos=campos, sh_used=sh_used,
                quats_raw=rotations.astype(np.float64))


def project(gaussian, cam, cfg=RasterConfig()):
    """Project one Gaussian; returns None when culled."""
    pr = _project_arrays(gaussian.position[None], gaussian.log_scale[None],
                         gaussian.rotation[None],
                         np.asarray([gaussian.opacity_logit]),
                         gaussian.sh[None], cam, cfg)
    if not pr["visible"][0]:
        return None
    return ProjectedGaussian(mean2d=pr["mean2d"][0], cov2d=pr["V"][0],
                             depth=float(pr["t"][0, 2]), color=pr["color"][0],
                             opacity=float(pr["opac"][0]))


def _tile_pairs(pr, cam, cfg):
    """(tile_id, gaussian) pairs sorted by tile then (depth, index)."""
    ts = cfg.tile_size
    ntx = (cam.width + ts - 1) // ts
    nty = (cam.height + ts - 1) // ts
    idx = np.nonzero(pr["visible"])[0]
    if len(idx) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), ntx, nty
    mean2d = pr["mean2d"][idx]
    radius = pr["radius"][idx]
    tx0 = np.clip(np.floor((mean2d[:, 0] - radius) / ts), 0, ntx - 1).astype(np.int64)
    tx1 = np.clip(np.floor((mean2d[:, 0] + radius) / ts), 0, ntx - 1).astype(np.int64)
    ty0 = np.clip(np.floor((mean2d[:, 1] - radius) / ts), 0, nty - 1).astype(np.int64)
    ty1 = np.clip(np.floor((mean2d[:, 1] + radius) / ts), 0, nty - 1).astype(np.int64)
    wx = tx1 - tx0 + 1
    wy = ty1 - ty0 + 1
    counts = wx * wy
    total = int(counts.sum())
    gi = np.repeat(np.arange(len(idx)), counts)
    within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    dtx = within % wx[gi]
    dty = within // wx[gi]
    tile_id = (ty0[gi] + dty) * ntx + (tx0[gi] + dtx)
    gauss = idx[gi]
    order = np.lexsort((gauss, pr["t"][gauss, 2], tile_id))
    return tile_id[order], gauss[order], ntx, nty


def _composite_tile(pr, gs, xs, ys, cfg, want_records=False):
    """Composite depth-sorted Gaussians `gs` over pixels (xs, ys).

    Returns per-pixel color/alpha/depth sums and contribution count, plus
    the record matrices the backward pass needs when want_records is set.
    """
    mean = pr["mean2d"][gs]
    inv = pr["inv"][gs]
    dx = xs[None, :] - mean[:, 0:1]
    dy = ys[None, :] - mean[:, 1:2]
    q = inv[:, 0, 0, None] * dx * dx + 2 * inv[:, 0, 1, None] * dx * dy \
        + inv[:, 1, 1, None] * dy * dy
    if np.isfinite(cfg.cutoff_sigma):
        support = q <= cfg.cutoff_sigma ** 2
    else:
        support = np.ones_like(q, dtype=bool)
    alpha_un = pr["opac"][gs, None] * np.exp(-0.5 * q)
    clamp_mask = alpha_un < cfg.alpha_clamp
    alpha = np.where(clamp_mask, alpha_un, cfg.alpha_clamp)
    include = support & (alpha >= cfg.alpha_skip) if cfg.alpha_skip > 0 else support
    alpha = np.where(include, alpha, 0.0)

    one_m = 1.0 - alpha
    t_before = np.ones_like(alpha)
    if len(gs) > 1:
        t_before[1:] = np.cumprod(one_m[:-1], axis=0)
    # sequential early stop: a record starting at T < t_stop never composites
    live = t_before >= cfg.t_stop
    w = np.where(live, t_before * alpha, 0.0)

    color = np.einsum("gp,gc->pc", w, pr["color"][gs])
    asum = w.sum(axis=0)
    dsum = w.T @ pr["t"][gs, 2]
    count = (w > 0).sum(axis=0).astype(np.int32)
    if not want_records:
        return color, asum, dsum, count, None
    recs = dict(q=q, alpha_un=alpha_un, alpha=alpha, clamp=clamp_mask,
                include=include, live=live, t_before=t_before, w=w,
                dx=dx, dy=dy)
    return color, asum, dsum, count, recs


def _forward(positions, log_scales, rotations, opacity_logits, sh, cam, cfg):
    for name, arr in (("position", positions), ("log_scale", log_scales),
                      ("rotation", rotations),
                      ("opacity", np.reshape(opacity_logits, (-1, 1))),
                      ("sh", sh)):
        _check_finite(name, arr)
    # finite but zero-norm rotations (f32 overflow collapse) are just as
    # unrenderable as NaNs; surface them as the same error class
    qn = np.linalg.norm(np.asarray(rotations, np.float64), axis=-1)
    if qn.size and np.any(qn < 1e-12):
        raise RenderError(
            f"zero-norm rotation at gaussian index {int(np.argmin(qn))}")
    pr = _project_arrays(positions, log_scales, rotations, opacity_logits, sh, cam, cfg)
    h, w = cam.height, cam.width
    bg = np.asarray(cfg.background, dtype=np.float64)
    color = np.empty((h, w, 3))
    color[:] = bg
    asum = np.zeros((h, w))
    dsum = np.zeros((h, w))
    count = np.zeros((h, w), np.int32)

    tile_id, gauss, ntx, nty = _tile_pairs(pr, cam, cfg)
    bounds = np.searchsorted(tile_id, np.arange(ntx * nty + 1))
    ts = cfg.tile_size
    tiles = []
    for tid in np.unique(tile_id):
        lo, hi = bounds[tid], bounds[tid + 1]
        gs = gauss[lo:hi]
        ty, tx = divmod(int(tid), ntx)
        x0, y0 = tx * ts, ty * ts
        x1, y1 = min(x0 + ts, w), min(y0 + ts, h)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        xs = xx.reshape(-1).astype(np.float64)
        ys = yy.reshape(-1).astype(np.float64)
        c, a, d, cnt, _ = _composite_tile(pr, gs, xs, ys, cfg)
        sl = (slice(y0, y1), slice(x0, x1))
        shape2 = (y1 - y0, x1 - x0)
        color[sl] = c.reshape(shape2 + (3,)) + (1.0 - a.reshape(shape2))[..., None] * bg
        asum[sl] = a.reshape(shape2)
        dsum[sl] = d.reshape(shape2)
        count[sl] = cnt.reshape(shape2)
        tiles.append((gs, xs, ys, sl))

    depth = np.where(asum > 0, dsum / np.maximum(asum, 1e-12), 0.0)
    out = RenderOutput(color=color, alpha=asum, depth=depth, contrib_count=count)
    ctx = dict(pr=pr, tiles=tiles, cfg=cfg, cam=cam, bg=bg,
               shapes=(np.shape(positions), np.shape(log_scales), np.shape(rotations),
                       np.shape(opacity_logits), np.shape(sh)))
    return out, ctx


def rasterize(scene, cam, cfg=RasterConfig()):
    out, _ = _forward(scene.positions, scene.log_scales, scene.rotations,
                      scene.opacity_logits, scene.sh, cam, cfg)
    return out


def render_views(scene, cams, cfg=RasterConfig()):
    return [rasterize(scene, cam, cfg) for cam in cams]


def rasterize_backward(ctx, grad_color):
    """Adjoint of _forward w.r.t. all Gaussian attributes.

    grad_color: (H, W, 3). Returns dict of float64 grads keyed like the
    attribute arrays. The depth sort, support cutoff, early stop, and the
    alpha clamp boundary are treated as locally constant.
    """
    if ctx is None:
        raise RuntimeError("rasterize_backward needs the cached forward context")
    pr, cfg, cam, bg = ctx["pr"], ctx["cfg"], ctx["cam"], ctx["bg"]
    n = len(pr["p"])
    g_color = np.zeros((n, 3))
    g_mean = np.zeros((n, 2))
    g_inv = np.zeros((n, 2, 2))
    g_opac = np.zeros(n)

    grad_color = np.asarray(grad_color, dtype=np.float64)
    for gs, xs, ys, sl in ctx["tiles"]:
        gpix = grad_color[sl].reshape(-1, 3)
        _, _, _, _, rec = _composite_tile(pr, gs, xs, ys, cfg, want_records=True)
        cols = pr["color"][gs]
        ctil = cols[:, None, :] - bg  # colors relative to background
        # pixel = sum_r w_r c_r + (1 - sum_r w_r) bg; for live record r:
        #   d pixel / d alpha_r = T_r (c_r - bg) - [sum_{r'>r} w_r' (c_r' - bg)] / (1 - alpha_r)
        wc = rec["w"][:, :, None] * ctil
        suffix = wc[::-1].cumsum(axis=0)[::-1] - wc  # sum over r' > r
        dpix = rec["t_before"][:, :, None] * ctil - suffix / (1.0 - rec["alpha"])[:, :, None]
        dalpha = np.einsum("gpc,pc->gp", dpix, gpix)
        active = rec["live"] & rec["include"] & rec["clamp"]
        dalpha = np.where(active, dalpha, 0.0)

        # color grads (straight compositing weights)
        g_color[gs] += np.einsum("gp,pc->gc", rec["w"], gpix)
        # alpha = opac * exp(-q/2)
        e_term = np.exp(-0.5 * rec["q"])
        g_opac[gs] += (dalpha * e_term).sum(axis=1)
        dq = dalpha * rec["alpha_un"] * -0.5
        inv = pr["inv"][gs]
        dqdx = 2 * (inv[:, 0, 0, None] * rec["dx"] + inv[:, 0, 1, None] * rec["dy"])
        dqdy = 2 * (inv[:, 0, 1, None] * rec["dx"] + inv[:, 1, 1, None] * rec["dy"])
        np.add.at(g_mean, (gs, 0), -(dq * dqdx).sum(axis=1))
        np.add.at(g_mean, (gs, 1), -(dq * dqdy).sum(axis=1))
        np.add.at(g_inv, (gs, 0, 0), (dq * rec["dx"] ** 2).sum(axis=1))
        np.add.at(g_inv, (gs, 0, 1), (dq * rec["dx"] * rec["dy"]).sum(axis=1))
        np.add.at(g_inv, (gs, 1, 0), (dq * rec["dx"] * rec["dy"]).sum(axis=1))
        np.add.at(g_inv, (gs, 1, 1), (dq * rec["dy"] ** 2).sum(axis=1))

    return _chain_to_attributes(pr, cam, cfg, g_color, g_mean, g_inv, g_opac,
                                ctx["shapes"])


def _chain_to_attributes(pr, cam, cfg, g_color, g_mean, g_inv, g_opac, shapes):
    n = len(pr["p"])

    # opacity logit
    op = pr["opac"]
    g_lop = g_opac * op * (1 - op)

    # color = max(raw, 0), raw = 0.5 + sh . basis(dir)
    draw = g_color * (pr["raw"] > 0)
    k = pr["k"]
    g_sh = np.zeros(shapes[4], dtype=np.float64)
    g_sh[:, :, :k] = np.einsum("nc,nm->ncm", draw, pr["basis"])
    basis_grad = sh_basis_grad(pr["dirs"], pr["deg"])
    g_dir = np.einsum("nc,ncm,nmk->nk", draw, pr["sh_used"], basis_grad)
    dirs = pr["dirs"]
    proj3 = np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]
    g_p = np.einsum("nij,ni->nj",
                    proj3 / np.maximum(pr["dist"], 1e-12)[:, None, None], g_dir)

    # inv = V^{-1}
    g_V = -pr["inv"] @ g_inv @ pr["inv"]
    g_V = 0.5 * (g_V + np.swapaxes(g_V, 1, 2))

    # V = J M J^T (+ blur floor)
    J, M = pr["J"], pr["M"]
    g_M = np.einsum("nji,njk,nkl->nil", J, g_V, J)
    g_J = 2 * g_V @ J @ M

    # mean2d and J both depend on the camera-space point t
    t = pr["t"]
    tz = np.where(t[:, 2] > cfg.near, t[:, 2], 1.0)
    g_t = np.zeros((n, 3))
    g_t[:, 0] = g_mean[:, 0] * cam.fx / tz + g_J[:, 0, 2] * (-cam.fx / tz ** 2)
    g_t[:, 1] = g_mean[:, 1] * cam.fy / tz + g_J[:, 1, 2] * (-cam.fy / tz ** 2)
    g_t[:, 2] = (g_mean[:, 0] * (-cam.fx * t[:, 0] / tz ** 2)
                 + g_mean[:, 1] * (-cam.fy * t[:, 1] / tz ** 2)
                 + g_J[:, 0, 0] * (-cam.fx / tz ** 2)
                 + g_J[:, 1, 1] * (-cam.fy / tz ** 2)
                 + g_J[:, 0, 2] * (2 * cam.fx * t[:, 0] / tz ** 3)
                 + g_J[:, 1, 2] * (2 * cam.fy * t[:, 1] / tz ** 3))
    g_p += g_t @ cam.R  # t = R p + tc

    # M = W Sigma W^T
    W = cam.R
    g_Sigma = W.T @ g_M @ W
    g_Sigma = 0.5 * (g_Sigma + np.swapaxes(g_Sigma, 1, 2))
    # Sigma = A A^T with A = Rq diag(s)
    A, Rq, s = pr["A"], pr["Rq"], pr["s"]
    g_A = 2 * g_Sigma @ A
    g_s = np.einsum("nij,nij->nj", g_A, Rq)
    g_ls = g_s * s
    g_R = g_A * s[:, None, :]
    g_q = _rotmat_grad_to_quat(g_R, pr["quats_raw"])

    mask = pr["visible"]
    return dict(
        positions=np.where(mask[:, None], g_p, 0.0),
        log_scales=np.where(mask[:, None], g_ls, 0.0),
        rotations=np.where(mask[:, None], g_q, 0.0),
        opacity_logits=np.where(mask, g_lop, 0.0),
        sh=np.where(mask[:, None, None], g_sh, 0.0),
    )


def _rotmat_grad_to_quat(g_R, quats):
    """Chain dL/dR -> dL/dq through R(q/|q|), batched."""
    norm = np.linalg.norm(quats, axis=1, keepdims=True)
    qh = quats / norm
    w, x, y, z = qh.T
    zeros = np.zeros_like(w)
    dRw = np.stack([
        np.stack([zeros, -2 * z, 2 * y], -1),
        np.stack([2 * z, zeros, -2 * x], -1),
        np.stack([-2 * y, 2 * x, zeros], -1)], -2)
    dRx = np.stack([
        np.stack([zeros, 2 * y, 2 * z], -1),
        np.stack([2 * y, -4 * x, -2 * w], -1),
        np.stack([2 * z, 2 * w, -4 * x], -1)], -2)
    dRy = np.stack([
        np.stack([-4 * y, 2 * x, 2 * w], -1),
        np.stack([2 * x, zeros, 2 * z], -1),
        np.stack([-2 * w, 2 * z, -4 * y], -1)], -2)
    dRz = np.stack([
        np.stack([-4 * z, -2 * w, 2 * x], -1),
        np.stack([2 * w, -4 * z, 2 * y], -1),
        np.stack([2 * x, 2 * y, zeros], -1)], -2)
    g_qh = np.stack([np.einsum("nij,nij->n", g_R, d)
                     for d in (dRw, dRx, dRy, dRz)], -1)
    proj4 = (np.eye(4)[None] - qh[:, :, None] * qh[:, None, :]) / norm[:, :, None]
    return np.einsum("nij,ni->nj", proj4, g_qh)


def rasterize_tensors(positions, log_scales, rotations, opacity_logits, sh,
                      cam, cfg=RasterConfig()):
    """Differentiable render for training graphs.

    Inputs are Tensors; returns an (H, W, 3) color Tensor whose backward
    routes through the analytic rasterizer gradients.
    """
    parents = (positions, log_scales, rotations, opacity_logits, sh)
    arrs = [p.data for p in parents]
    out, ctx = _forward(*arrs, cam, cfg)

    def vjp(grad_out):
        g = rasterize_backward(ctx, grad_out)
        keys = ("positions", "log_scales", "rotations", "opacity_logits", "sh")
        return tuple(g[k].astype(parents[i].data.dtype)
                     for i, k in enumerate(keys))

    return custom_op(out.color, parents, vjp), out


def rasterize_scene_tensor(scene, cam, cfg=RasterConfig()):
    """Render a static scene as a constant Tensor graph source."""
    color, out = rasterize_tensors(Tensor(scene.positions), Tensor(scene.log_scales),
                                   Tensor(scene.rotations), Tensor(scene.opacity_logits),
                                   Tensor(scene.sh), cam, cfg)
    return color, out
