"""Evaluation report: task quality tables, timing, and ablation rows.

Global edits are scored on eight novel orbit views; zoom edits on the two
ground-truth views sampled around each zoomed camera; graffiti on its
held-out painted views. The ablation table carries one row per compressor
query variant (reconstruction quality) and one per refiner wiring (edit
quality), so configured variants line up in a single comparable table.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from ..refine.muon import MuonState
from ..refine.session import EditSession, EditView, decoded_scene, refine
from ..render.image_io import save_png
from ..render.raster import RasterConfig, rasterize
from ..splats.model import orbit_cameras
from .loop import _scene_for, latents_from_asset
from .metrics import psnr, ssim
from .tasks import sample_task

GLOBAL_NOVEL_VIEWS = 8
ZOOM_NOVEL_PER_VIEW = 2


def _novel_ring(scene, n, w, h):
    bmin, bmax = scene.bounds
    center = (bmin + bmax) / 2
    radius = 2.6 * max(float(np.linalg.norm(bmax - bmin)) / 2, 1e-3)
    return orbit_cameras(n, center, radius, float(w), w, h,
                         elevations=(0.55,))


def _session(vl, lrm, comp, refiner, cfg):
    muon = MuonState(eta=cfg.muon_eta, mu=cfg.muon_mu, steps=cfg.inner_steps)
    return EditSession(vl, lrm, comp, refiner, muon=muon)


def _score(pairs):
    ps = [psnr(a, b) for a, b in pairs]
    ss = [ssim(a, b) for a, b in pairs]
    return float(np.mean(ps)), float(np.mean(ss))


def _edit_and_render(cfg, lrm, comp, refiner, scene, sample, cams):
    """Refine on the sample's edit views, render at `cams`."""
    vl, _ = latents_from_asset(cfg, lrm, comp, scene)
    session = _session(vl, lrm, comp, refiner, cfg)
    edits = [EditView(np.asarray(img, np.float32), cam)
             for img, cam in sample.edit_views]
    t0 = time.perf_counter()
    refine(session, edits, mode="global")
    edit_seconds = time.perf_counter() - t0
    out = decoded_scene(session)
    renders = [rasterize(out, c, RasterConfig()).color for c in cams]
    return renders, edit_seconds


def _transform_of(sample):
    from .tasks import directional_shade, hue_rotate
    p = sample.params

    def f(img):
        return np.clip(directional_shade(hue_rotate(img, p["hue"]),
                                         p["shade_dir"], p["shade_amp"]), 0, 1)
    return f


def eval_suite(cfg, lrm, compressors, refiners, out_dir, n_scenes=1):
    """Score every configured variant; write report.txt, eval.csv, grids."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    w = h = cfg.image_size
    scenes = [_scene_for(cfg, i) for i in range(n_scenes)]
    comp_items = list(compressors.items())
    ref_items = list(refiners.items())
    main_comp = comp_items[0][1]
    main_ref = ref_items[0][1]
    report = {"timing": {}}
    grid_rows = []

    # -- stage I timing on the first scene -----------------------------------
    t0 = time.perf_counter()
    vl0, _ = latents_from_asset(cfg, lrm, main_comp, scenes[0])
    report["timing"]["stage1_seconds"] = time.perf_counter() - t0

    # -- global recolor over 8 novel views -----------------------------------
    g_pairs, edit_secs = [], []
    for i, scene in enumerate(scenes):
        rng = np.random.default_rng((cfg.seed, 101, i))
        sample = sample_task("recolor", rng, scene, image_size=(w, h),
                             n_edit=max(cfg.view_min, 1), n_target=1)
        cams = _novel_ring(scene, GLOBAL_NOVEL_VIEWS, w, h)
        renders, secs = _edit_and_render(cfg, lrm, main_comp, main_ref,
                                         scene, sample, cams)
        edit_secs.append(secs)
        transform = _transform_of(sample)
        gts = [transform(rasterize(scene, c, RasterConfig()).color)
               for c in cams]
        g_pairs += list(zip(renders, gts))
        if i == 0:
            grid_rows.append(np.concatenate([gts[0], renders[0]], axis=1))
    p, s = _score(g_pairs)
    report["global"] = {"n_novel_views": GLOBAL_NOVEL_VIEWS, "psnr": p,
                        "ssim": s}
    report["timing"]["edit_seconds"] = float(np.mean(edit_secs))

    # -- zoom: two ground-truth views around each zoomed camera --------------
    z_pairs = []
    for i, scene in enumerate(scenes):
        rng = np.random.default_rng((cfg.seed, 202, i))
        sample = sample_task("zoom", rng, scene, image_size=(w, h), n_edit=1)
        cams = [c for _, c in sample.target_views]
        renders, _ = _edit_and_render(cfg, lrm, main_comp, main_ref,
                                      scene, sample, cams)
        gts = [img for img, _ in sample.target_views]
        z_pairs += list(zip(renders, gts))
        if i == 0:
            grid_rows.append(np.concatenate([gts[0], renders[0]], axis=1))
    p, s = _score(z_pairs)
    report["zoom"] = {"novel_per_view": ZOOM_NOVEL_PER_VIEW, "psnr": p,
                      "ssim": s}

    # -- graffiti: held-out painted views -------------------------------------
    f_pairs = []
    for i, scene in enumerate(scenes):
        rng = np.random.default_rng((cfg.seed, 303, i))
        sample = sample_task("graffiti", rng, scene, image_size=(w, h),
                             n_target=2)
        cams = [c for _, c in sample.target_views]
        renders, _ = _edit_and_render(cfg, lrm, main_comp, main_ref,
                                      scene, sample, cams)
        gts = [img for img, _ in sample.target_views]
        f_pairs += list(zip(renders, gts))
    p, s = _score(f_pairs)
    report["graffiti"] = {"psnr": p, "ssim": s}

    # -- ablation table -------------------------------------------------------
    rows = []
    for name, comp in comp_items:
        pairs = []
        for scene in scenes:
            vl, grid = latents_from_asset(cfg, lrm, comp, scene)
            from ..tensor import Tensor
            out = comp.decoded_scene(Tensor(vl.latents), vl.cell_ids,
                                     vl.k_per_cell, grid)
            for cam in _novel_ring(scene, 4, w, h):
                pairs.append((rasterize(out, cam, RasterConfig()).color,
                              rasterize(scene, cam, RasterConfig()).color))
        p, s = _score(pairs)
        rows.append({"name": name, "kind": "compressor", "psnr": p, "ssim": s})
    for name, ref in ref_items:
        pairs = []
        for i, scene in enumerate(scenes):
            rng = np.random.default_rng((cfg.seed, 404, i))
            sample = sample_task("recolor", rng, scene, image_size=(w, h),
                                 n_edit=1, n_target=1)
            cams = _novel_ring(scene, 4, w, h)
            renders, _ = _edit_and_render(cfg, lrm, main_comp, ref,
                                          scene, sample, cams)
            transform = _transform_of(sample)
            pairs += [(r, transform(rasterize(scene, c, RasterConfig()).color))
                      for r, c in zip(renders, cams)]
        p, s = _score(pairs)
        rows.append({"name": name, "kind": "refiner", "psnr": p, "ssim": s})
    report["ablation"] = rows

    _write_outputs(out_dir, report, grid_rows)
    return report


def _write_outputs(out_dir, report, grid_rows):
    lines = ["task metrics", "-" * 52]
    for task in ("global", "zoom", "graffiti"):
        r = report[task]
        lines.append(f"{task:<10} psnr {r['psnr']:7.2f}  ssim {r['ssim']:6.3f}")
    lines += ["", "ablation", "-" * 52]
    for row in report["ablation"]:
        lines.append(f"{row['kind']:<11} {row['name']:<14} "
                     f"psnr {row['psnr']:7.2f}  ssim {row['ssim']:6.3f}")
    t = report["timing"]
    lines += ["", f"stage1_seconds {t['stage1_seconds']:.3f}",
              f"edit_seconds   {t['edit_seconds']:.3f}"]
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n")

    import csv
    with open(out_dir / "eval.csv", "w", newline="") as f:
        cw = csv.writer(f)
        cw.writerow(["name", "kind", "psnr", "ssim"])
        for row in report["ablation"]:
            cw.writerow([row["name"], row["kind"], row["psnr"], row["ssim"]])

    if grid_rows:
        width = max(r.shape[1] for r in grid_rows)
        padded = [np.pad(r, ((0, 0), (0, width - r.shape[1]), (0, 0)))
                  for r in grid_rows]
        save_png(np.concatenate(padded, axis=0), out_dir / "grid.png")
