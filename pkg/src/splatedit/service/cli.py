"""Command-line surface: preprocess, edit, render, train, eval, serve.

Exit codes: 0 success, 2 missing checkpoint bundle or input file, 1 any
other failure. Timing lines print as "timing: <name>_seconds=<float>" so
scripts can scrape them.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from ..compress.pipeline import compress_asset, load_latents, save_latents
from ..refine.session import EditView, decoded_scene, new_session, refine
from ..render.image_io import load_png, save_png
from ..render.raster import RasterConfig, rasterize
from ..splats.ply import load_ply, save_ply
from ..tensor.engine import Tensor
from ..train.evalsuite import eval_suite
from ..train.loop import load_config, pretrain_lrm, train_stage1, train_stage2
from .bundle import BundleError, load_bundle, save_bundle
from .wire import camera_from_json, decode_mask

_NEED = {"lrm": ("lrm",), "stage1": ("lrm", "compressor"),
         "stage2": ("lrm", "compressor", "refiner")}


def _read_camera(path):
    return camera_from_json(json.loads(Path(path).read_text()))


def _timing(name, seconds):
    print(f"timing: {name}_seconds={seconds:.3f}")


def cmd_preprocess(args):
    models, _ = load_bundle(args.bundle, need=("lrm", "compressor"))
    scene = load_ply(args.asset)
    t0 = time.perf_counter()
    vl, grid, fg = compress_asset(scene, models["lrm"], models["compressor"],
                                  res=args.res, n_views=args.views)
    save_latents(args.out, vl)
    _timing("preprocess", time.perf_counter() - t0)
    print(f"wrote {args.out}: {len(vl.cell_ids)} voxels, {len(vl)} latents "
          f"from {len(fg)} gaussians")
    return 0


def _edit_views(args, lrm):
    cams = [_read_camera(p) for p in args.camera]
    if len(cams) != len(args.view):
        raise ValueError(f"{len(args.view)} views but {len(cams)} cameras")
    masks = [decode_mask(json.loads(Path(p).read_text())) for p in args.mask]
    if masks and len(masks) != len(args.view):
        raise ValueError("give either no masks or one per view")
    masks = masks or [None] * len(args.view)
    views = []
    for path, cam, mask in zip(args.view, cams, masks):
        img = load_png(path).astype(np.float32)
        if img.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"image {img.shape[:2]} != camera size "
                             f"{(cam.height, cam.width)}")
        if img.shape[:2] != lrm.image_size:
            raise ValueError(f"edit views must be {lrm.image_size}, "
                             f"got {img.shape[:2]}")
        views.append(EditView(img, cam, mask))
    return views


def cmd_edit(args):
    models, _ = load_bundle(args.bundle, need=("lrm", "compressor", "refiner"))
    vl = load_latents(args.latents)
    session = new_session(vl, models["lrm"], models["compressor"],
                          models["refiner"])
    views = _edit_views(args, models["lrm"])
    t0 = time.perf_counter()
    refine(session, views, mode=args.mode, stride=args.stride)
    dt = time.perf_counter() - t0
    save_ply(decoded_scene(session), args.out)
    hits = session.history[-1].hit_cells
    print(f"hit_voxels={'all' if hits is None else len(hits)}")
    _timing("edit", dt)
    if hits is not None and len(hits) == 0:
        print("warning: edit rays hit no occupied voxels; "
              "output keeps the input asset", file=sys.stderr)
    return 0


def cmd_render(args):
    cam = _read_camera(args.camera)
    if args.asset.endswith(".spvl"):
        if not args.bundle:
            raise BundleError("decoding .spvl latents needs --bundle")
        models, _ = load_bundle(args.bundle, need=("compressor",))
        vl = load_latents(args.asset)
        scene = models["compressor"].decoded_scene(
            Tensor(vl.latents), vl.cell_ids, vl.k_per_cell, vl.geometry())
    else:
        scene = load_ply(args.asset)
    save_png(rasterize(scene, cam, RasterConfig()).color, args.out)
    print(f"wrote {args.out}")
    return 0


def _models_for(cfg, args, need):
    """Warm-start every bundle member / cold-start every arch entry, then
    check the stage's needs; extra members ride along into --save-bundle."""
    if args.bundle:
        models, arch = load_bundle(args.bundle)
    else:
        arch = json.loads(Path(args.arch).read_text())
        from .bundle import _CTORS
        models = {}
        for i, name in enumerate(("lrm", "compressor", "refiner")):
            if name not in arch:
                continue
            kwargs = dict(arch[name])
            if "image_size" in kwargs:
                kwargs["image_size"] = tuple(kwargs["image_size"])
            models[name] = _CTORS[name](np.random.default_rng((cfg.seed, i)),
                                        **kwargs)
    missing = set(need) - set(models)
    if missing:
        raise BundleError(
            f"stage {cfg.stage!r} needs {sorted(missing)} but the "
            f"{'bundle' if args.bundle else 'arch json'} lacks them")
    return models, arch


def cmd_train(args):
    cfg = load_config(args.config)
    need = _NEED[cfg.stage]
    models, arch = _models_for(cfg, args, need)
    t0 = time.perf_counter()
    if cfg.stage == "lrm":
        res = pretrain_lrm(cfg, models["lrm"], args.out)
    elif cfg.stage == "stage1":
        res = train_stage1(cfg, models["lrm"], models["compressor"], args.out)
    else:
        res = train_stage2(cfg, models["lrm"], models["compressor"],
                           models["refiner"], args.out)
    _timing("train", time.perf_counter() - t0)
    if res["aborted"]:
        print(f"aborted at step {len(res['losses'])}; last checkpoint: "
              f"{res['checkpoint']}", file=sys.stderr)
        return 1
    print(f"done: {len(res['losses'])} steps, last loss "
          f"{res['losses'][-1]:.4f}, checkpoint {res['checkpoint']}")
    if args.save_bundle:
        save_bundle(args.save_bundle, models, arch)
        print(f"bundle saved to {args.save_bundle}")
    return 0


def cmd_eval(args):
    cfg = load_config(args.config)
    models, _ = load_bundle(args.bundle, need=("lrm", "compressor", "refiner"))
    report = eval_suite(cfg, models["lrm"], {"main": models["compressor"]},
                        {models["refiner"].mode: models["refiner"]},
                        args.out, n_scenes=args.scenes)
    for task in ("global", "zoom", "graffiti"):
        r = report[task]
        print(f"{task}: psnr={r['psnr']:.2f} ssim={r['ssim']:.3f}")
    print(f"wrote {Path(args.out) / 'eval.csv'}")
    return 0


def cmd_serve(args):
    import uvicorn

    from .app import create_app
    app = create_app(bundle_dir=args.bundle, res=args.res, n_views=args.views)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="splatedit",
        description="Compress, edit, render, and serve splat assets.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("preprocess", help="compress a .ply into voxel latents")
    sp.add_argument("asset")
    sp.add_argument("out")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--res", type=int, default=16)
    sp.add_argument("--views", type=int, default=9)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("edit", help="refine latents from 2-D edit views")
    sp.add_argument("latents")
    sp.add_argument("out")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--view", action="append", required=True,
                    help="edit image (png); repeatable")
    sp.add_argument("--camera", action="append", required=True,
                    help="camera json; one per view")
    sp.add_argument("--mask", action="append", default=[],
                    help="RLE stroke mask json; none or one per view")
    sp.add_argument("--mode", choices=("global", "local"), default="global")
    sp.add_argument("--stride", type=int, default=4)
    sp.set_defaults(func=cmd_edit)

    sp = sub.add_parser("render", help="rasterize a .ply or .spvl to png")
    sp.add_argument("asset")
    sp.add_argument("out")
    sp.add_argument("--camera", required=True)
    sp.add_argument("--bundle", help="needed to decode .spvl latents")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("train", help="run one training stage from a config")
    sp.add_argument("config")
    sp.add_argument("--out", required=True)
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--bundle", help="warm start from a bundle")
    group.add_argument("--arch", help="cold start from arch kwargs json")
    sp.add_argument("--save-bundle", help="write the trained bundle here")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a bundle on the synthetic suite")
    sp.add_argument("config")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scenes", type=int, default=1)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("serve", help="run the interactive edit service")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--res", type=int, default=16)
    sp.add_argument("--views", type=int, default=9)
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (BundleError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
