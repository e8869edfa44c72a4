"""Two-stage training loops with freeze contracts and resumable checkpoints.

Stage 1 fits the voxel compressor against renders of its own decoded
splats while the feature model stays frozen; stage 2 fits the refinement
network (slow weights plus initial fast weights, differentiating through
the unrolled inner updates) while both upstream models stay frozen.
Freezes are enforced twice: frozen parameters never enter the optimizer,
and their state is checked bit-equal after the run.

Determinism: every step draws from a generator seeded by (seed, step), so
a resumed run replays the exact sample stream; `full_batch` pins the
stream to step 0, giving a stationary objective for smoke oracles.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..compress.pipeline import VoxelLatents, canonical_cameras
from ..refine.muon import MuonState
from ..refine.ttt import adapt, apply_streams
from ..render.raster import RasterConfig, RenderError, rasterize, rasterize_tensors
from ..splats.synth import random_desk_scene
from ..tensor import Tensor, backward, no_grad
from ..tensor.checkpoint import load_weights, save_weights
from ..voxels.grid import voxelize
from .metrics import recon_loss
from .optim import AdamW, cosine_lr
from .tasks import sample_task

STAGES = ("lrm", "stage1", "stage2")


@dataclass(frozen=True)
class TrainConfig:
    """One run's knobs; view counts are ranges sampled per step."""

    stage: str
    lr: float = 4e-5
    batch_size: int = 1
    steps: int = 1000
    lam_perc: float = 0.5
    view_min: int = 1
    view_max: int = 4
    seed: int = 0
    cosine: bool = True
    warmup: int = 0
    backtrack: int = 0
    view_seed: int | None = None
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.01
    inner_steps: int = 5
    muon_eta: float = 0.02
    muon_mu: float = 0.9
    tasks: tuple = ("recolor",)
    image_size: int = 16
    grid_res: int = 4
    n_scenes: int = 1
    scene_objects: int = 1
    scene_gaussians: int = 30
    sh_degree: int = 1
    prune_floor: float = 0.005
    full_batch: bool = False
    raster_exact: bool = False
    save_every: int = 0
    log_every: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lam_perc < 0:
            raise ValueError("lam_perc must be >= 0")
        if not (1 <= self.view_min <= self.view_max):
            raise ValueError(f"bad view range [{self.view_min}, {self.view_max}]")
        if min(self.steps, self.inner_steps, self.warmup, self.backtrack) < 0:
            raise ValueError("step counts must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if isinstance(self.tasks, list):
            object.__setattr__(self, "tasks", tuple(self.tasks))
        if isinstance(self.betas, list):
            object.__setattr__(self, "betas", tuple(self.betas))


def save_config(cfg, path):
    Path(path).write_text(json.dumps(dataclasses.asdict(cfg), indent=2) + "\n")


def load_config(path):
    raw = json.loads(Path(path).read_text())
    raw["tasks"] = tuple(raw.get("tasks", ()))
    if "betas" in raw:
        raw["betas"] = tuple(raw["betas"])
    return TrainConfig(**raw)


def smoke_stage1_config(steps=200):
    """Deterministic stage-1 sanity preset with a cleanly decreasing loss.

    Full-batch on one tiny seeded scene, smooth raster config, momentum-free
    AdamW plus Armijo backtracking: the recorded curve decreases strictly.
    """
    return TrainConfig(stage="stage1", lr=3e-4, steps=steps, lam_perc=0.5,
                       view_min=2, view_max=2, seed=0, image_size=16,
                       grid_res=3, n_scenes=1, scene_objects=1,
                       scene_gaussians=30, sh_degree=1, full_batch=True,
                       raster_exact=True, backtrack=16, betas=(0.0, 0.95),
                       weight_decay=0.0)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _scene_for(cfg, idx):
    return random_desk_scene(cfg.seed * 9973 + idx,
                             n_objects=cfg.scene_objects,
                             gaussians_per_object=cfg.scene_gaussians,
                             sh_degree=cfg.sh_degree)


def _step_rng(cfg, step):
    return np.random.default_rng((cfg.seed, 0 if cfg.full_batch else step))


def _snapshot(module):
    return {k: v.copy() for k, v in module.state_dict().items()}


def _check_frozen(name, module, before):
    after = module.state_dict()
    bad = [k for k in before if not np.array_equal(before[k], after[k])]
    if bad:
        raise RuntimeError(f"frozen {name} changed during training: {bad[:3]}")


class _MetricLog:
    def __init__(self, path, every):
        self.every = every
        self.rows = []
        self.path = path

    def add(self, step, loss, lr):
        if self.every and (step + 1) % self.every == 0:
            self.rows.append((step, float(loss), float(lr)))

    def flush(self):
        if not self.every:
            return
        with open(self.path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "lr"])
            w.writerows(self.rows)


def _save_checkpoint(out_dir, step, named, opt):
    """Write weights + optimizer state; refuses non-finite weights."""
    for _, arrs in named.items():
        for v in arrs.values():
            if not np.isfinite(v).all():
                return None
    ck = Path(out_dir) / f"step_{step:06d}"
    ck.mkdir(parents=True, exist_ok=True)
    for fname, arrs in named.items():
        save_weights(ck / f"{fname}.spwt", arrs)
    # optimizer moments stay float64 so a resumed trajectory is bit-exact
    flat = {"t": np.array(float(opt.t))}
    for n, a in opt.m.items():
        flat[f"m.{n}"] = a
    for n, a in opt.v.items():
        flat[f"v.{n}"] = a
    np.savez(ck / "opt.npz", **flat)
    (ck / "state.json").write_text(json.dumps({"step": step}))
    return ck


def _load_checkpoint(ck, modules, opt):
    ck = Path(ck)
    for fname, module in modules.items():
        module.load_state_dict(load_weights(ck / f"{fname}.spwt"))
    with np.load(ck / "opt.npz") as flat:
        state = {"t": int(flat["t"]), "m": {}, "v": {}}
        for k in flat.files:
            if k.startswith("m."):
                state["m"][k[2:]] = flat[k]
            elif k.startswith("v."):
                state["v"][k[2:]] = flat[k]
    opt.load_state_dict(state)
    return json.loads((ck / "state.json").read_text())["step"]


def _run_loop(cfg, out_dir, step_fn, opt, named_for_ckpt, start_step=0):
    """Shared step/abort/log/checkpoint scaffolding around `step_fn`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = _MetricLog(out_dir / "metrics.csv", cfg.log_every)
    losses = []
    last_ckpt = None
    aborted = False
    bt_exhausted = []
    for step in range(start_step, cfg.steps):
        lr_scale = cosine_lr(step, cfg.steps) if cfg.cosine else 1.0
        if cfg.warmup:
            lr_scale *= min(1.0, (step + 1) / cfg.warmup)
        try:
            with np.errstate(over="ignore", invalid="ignore", under="ignore"):
                loss = step_fn(step)
                if not np.isfinite(loss):
                    aborted = True
                    break
                losses.append(loss)
                if cfg.backtrack:
                    # Armijo safeguard for deterministic runs: halve the
                    # Adam step until the re-evaluated loss actually drops.
                    apply, revert = opt.prepared_step(lr_scale=lr_scale)
                    factor = 1.0
                    for _ in range(cfg.backtrack):
                        apply(factor)
                        if step_fn(step) < loss:
                            break
                        revert()
                        factor *= 0.5
                    else:
                        apply(factor)
                        bt_exhausted.append(step)
                else:
                    opt.step(lr_scale=lr_scale)
        except (RenderError, FloatingPointError):
            aborted = True
            break
        log.add(step, loss, cfg.lr * lr_scale)
        if cfg.save_every and (step + 1) % cfg.save_every == 0:
            ck = _save_checkpoint(out_dir, step + 1, named_for_ckpt(), opt)
            last_ckpt = ck or last_ckpt
    if not aborted:
        ck = _save_checkpoint(out_dir, cfg.steps, named_for_ckpt(), opt)
        last_ckpt = ck or last_ckpt
    log.flush()
    return {"losses": np.array(losses, dtype=np.float64),
            "aborted": aborted, "checkpoint": last_ckpt,
            "start_step": start_step, "bt_exhausted": bt_exhausted}


def _rcfg(cfg):
    base = RasterConfig()
    if not cfg.raster_exact:
        return base
    # exact() drops the support cutoff and alpha skip; also disable the
    # transmittance early stop so the training loss is jump-free
    return dataclasses.replace(base.exact(), t_stop=0.0)


def _gt(scene, cam, rcfg=None):
    return rasterize(scene, cam, rcfg or RasterConfig()).color


def _n_views(cfg, rng):
    return int(rng.integers(cfg.view_min, cfg.view_max + 1))


# ---------------------------------------------------------------------------
# feature-model pretraining
# ---------------------------------------------------------------------------

def pretrain_lrm(cfg, lrm, out_dir, resume=None):
    """Fit the feature model to re-render its input views through splats."""
    opt = AdamW(list(lrm.named_parameters()), lr=cfg.lr,
                betas=cfg.betas, weight_decay=cfg.weight_decay)
    start = _load_checkpoint(resume, {"lrm": lrm}, opt) if resume else 0

    def step_fn(step):
        rng = _step_rng(cfg, step)
        rc = _rcfg(cfg)
        scene = _scene_for(cfg, step % cfg.n_scenes)
        cams = canonical_cameras(scene, n_views=_n_views(cfg, rng),
                                 width=cfg.image_size, height=cfg.image_size,
                                 seed=cfg.view_seed)
        images = np.stack([_gt(scene, c, rc) for c in cams])
        fg = lrm.forward(images.astype(np.float32), cams)
        views = (range(len(cams)) if cfg.full_batch
                 else [int(rng.integers(len(cams)))])
        loss = None
        for vi in views:
            color, _ = rasterize_tensors(*fg.render_tensors(), cams[vi], rc)
            term = recon_loss(color, images[vi], cfg.lam_perc)
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / len(views))
        lrm.zero_grad()
        backward(loss)
        return float(loss.data)

    return _run_loop(cfg, out_dir, step_fn, opt,
                     lambda: {"lrm": lrm.state_dict()}, start)


# ---------------------------------------------------------------------------
# stage 1: compressor
# ---------------------------------------------------------------------------

def train_stage1(cfg, lrm, compressor, out_dir, resume=None):
    """Optimize the compressor against held-in view reconstruction."""
    lrm_before = _snapshot(lrm)
    opt = AdamW(list(compressor.named_parameters()), lr=cfg.lr,
                betas=cfg.betas, weight_decay=cfg.weight_decay)
    start = (_load_checkpoint(resume, {"compressor": compressor}, opt)
             if resume else 0)

    def step_fn(step):
        rng = _step_rng(cfg, step)
        rc = _rcfg(cfg)
        scene = _scene_for(cfg, step % cfg.n_scenes)
        cams = canonical_cameras(scene, n_views=_n_views(cfg, rng),
                                 width=cfg.image_size, height=cfg.image_size,
                                 seed=cfg.view_seed)
        images = np.stack([_gt(scene, c, rc) for c in cams])
        with no_grad():
            fg = lrm.forward(images.astype(np.float32), cams).prune(cfg.prune_floor)
        cloud = fg.detached_scene()
        grid = voxelize(cloud, fg.detached_features(), cfg.grid_res,
                        bounds=scene.bounds)
        feats = Tensor(np.asarray(fg.features.data, dtype=np.float32))
        lat, cells, k_per, _ = compressor.compress(grid, feats, cloud)
        attrs = compressor.gs_decode(lat, cells, k_per, grid)
        views = (range(len(cams)) if cfg.full_batch
                 else [int(rng.integers(len(cams)))])
        loss = None
        for vi in views:
            color, _ = rasterize_tensors(*attrs, cams[vi], rc)
            term = recon_loss(color, images[vi], cfg.lam_perc)
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / len(views))
        compressor.zero_grad()
        backward(loss)
        return float(loss.data)

    out = _run_loop(cfg, out_dir, step_fn, opt,
                    lambda: {"compressor": compressor.state_dict()}, start)
    _check_frozen("feature model", lrm, lrm_before)
    return out


# ---------------------------------------------------------------------------
# stage 2: refinement network
# ---------------------------------------------------------------------------

def _edit_forward(cfg, lrm, compressor, refiner, sample, mode):
    """Differentiable path: base latents + edit tokens -> refined latents."""
    h = w = cfg.image_size
    with no_grad():
        in_cams = canonical_cameras(sample.scene, n_views=max(cfg.view_max, 2),
                                    seed=cfg.view_seed,
                                    width=w, height=h)
        in_images = np.stack([_gt(sample.scene, c, _rcfg(cfg)) for c in in_cams])
        fg = lrm.forward(in_images.astype(np.float32), in_cams).prune(cfg.prune_floor)
        cloud = fg.detached_scene()
        grid = voxelize(cloud, fg.detached_features(), cfg.grid_res,
                        bounds=sample.scene.bounds)
        lat0, cells, k_per, _ = compressor.compress(
            grid, Tensor(np.asarray(fg.features.data, np.float32)), cloud)
        e_images = np.stack([np.asarray(img, np.float32)
                             for img, _ in sample.edit_views])
        e_cams = [c for _, c in sample.edit_views]
        tok = lrm.tokenize(e_images, e_cams)

    x = Tensor(np.asarray(tok.tokens.data, np.float32))
    lat = Tensor(np.asarray(lat0.data, np.float32))
    if refiner.mode == "xattn":
        for blk in refiner.blocks:
            lat = blk(lat, x)
    else:
        muon = MuonState(eta=cfg.muon_eta, mu=cfg.muon_mu,
                         steps=cfg.inner_steps)
        for blk in refiner.blocks:
            fast, _ = adapt(blk, x, muon, fast=blk.fast_start(train=True),
                            train=True)
            x, lat = apply_streams(blk, x, lat, fast, train=True)
    return compressor.gs_decode(lat, cells, k_per, grid)


def train_stage2(cfg, lrm, compressor, refiner, out_dir, mode="global",
                 resume=None):
    """Optimize refinement slow weights and initial fast weights."""
    if mode not in ("global", "local"):
        raise ValueError(f"mode must be global or local, got {mode!r}")
    lrm_before = _snapshot(lrm)
    comp_before = _snapshot(compressor)
    opt = AdamW(list(refiner.named_parameters()), lr=cfg.lr,
                betas=cfg.betas, weight_decay=cfg.weight_decay)
    start = _load_checkpoint(resume, {"refiner": refiner}, opt) if resume else 0

    def step_fn(step):
        rng = _step_rng(cfg, step)
        scene = _scene_for(cfg, step % cfg.n_scenes)
        kind = cfg.tasks[int(rng.integers(len(cfg.tasks)))]
        kw = {"n_edit": _n_views(cfg, rng)}
        if kind != "zoom":
            kw["n_target"] = 2
        sample = sample_task(kind, rng, scene,
                             image_size=(cfg.image_size, cfg.image_size), **kw)
        attrs = _edit_forward(cfg, lrm, compressor, refiner, sample, mode)
        loss = None
        for img, cam in tuple(sample.edit_views) + tuple(sample.target_views):
            color, _ = rasterize_tensors(*attrs, cam, _rcfg(cfg))
            term = recon_loss(color, np.asarray(img, np.float64), cfg.lam_perc)
            loss = term if loss is None else loss + term
        n = len(sample.edit_views) + len(sample.target_views)
        loss = loss * (1.0 / n)
        refiner.zero_grad()
        compressor.zero_grad()
        lrm.zero_grad()
        backward(loss)
        return float(loss.data)

    out = _run_loop(cfg, out_dir, step_fn, opt,
                    lambda: {"refiner": refiner.state_dict()}, start)
    _check_frozen("feature model", lrm, lrm_before)
    _check_frozen("compressor", compressor, comp_before)
    return out


def latents_from_asset(cfg, lrm, compressor, scene):
    """Frozen-path compression of one scene into a VoxelLatents asset."""
    h = w = cfg.image_size
    with no_grad():
        cams = canonical_cameras(scene, n_views=max(cfg.view_max, 2),
                                 width=w, height=h, seed=cfg.view_seed)
        images = np.stack([_gt(scene, c, _rcfg(cfg)) for c in cams])
        fg = lrm.forward(images.astype(np.float32), cams).prune(cfg.prune_floor)
        cloud = fg.detached_scene()
        grid = voxelize(cloud, fg.detached_features(), cfg.grid_res,
                        bounds=scene.bounds)
        lat, cells, k_per, _ = compressor.compress(
            grid, Tensor(np.asarray(fg.features.data, np.float32)), cloud)
    return VoxelLatents(
        resolution=grid.resolution, bounds_min=grid.bounds_min,
        cell_size=grid.cell_size, cell_ids=np.asarray(cells, np.int64),
        k_per_cell=np.asarray(k_per, np.int64),
        latents=np.asarray(lat.data, np.float32)), grid
