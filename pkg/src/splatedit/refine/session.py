"""Edit sessions: stateful refinement of a compressed asset.

A session owns the immutable Stage I latents plus everything that changes
while a user edits: the current latents, per-block fast weights, and the
edit history. Each refine call re-derives the updated latents from the base
with the session's (freshly adapted) fast weights, so all cross-edit state
lives in the fast weights; local edits only rewrite the rows of ray-hit
voxels and keep every other row bit-identical.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..splats.model import SplatScene
from ..tensor.engine import Tensor, no_grad
from ..voxels.grid import point_cells
from ..voxels.raycast import first_hit_cells
from .muon import MuonState
from .ttt import adapt, apply_streams, fast_apply

SESSION_MAGIC = b"SPSN"
SESSION_VERSION = 1


@dataclass(frozen=True)
class EditView:
    """One user-provided 2-D edit: an image at the refiner's working size
    plus the camera it was painted/captured from. An optional boolean mask
    (same H x W) restricts local-mode ray selection to the painted pixels."""

    image: np.ndarray
    camera: object
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.mask is None:
            return
        m = np.asarray(self.mask, dtype=bool)
        if m.shape != np.asarray(self.image).shape[:2]:
            raise ValueError(
                f"mask shape {m.shape} != image {np.asarray(self.image).shape[:2]}")
        object.__setattr__(self, "mask", m)


@dataclass
class EditRecord:
    mode: str                       # "global" | "local"
    n_views: int
    hit_cells: np.ndarray | None    # local mode only
    views: tuple = field(default=(), repr=False)  # kept in memory, not saved


class EditSession:
    """Single-writer edit state bound to one compressed asset."""

    def __init__(self, base, lrm, compressor, refiner, muon=None):
        for name, dim in (("feature model", getattr(lrm, "d_model", None)),
                          ("compressor", compressor.d_model),
                          ("refiner", refiner.dim)):
            if dim is not None and dim != base.d_model:
                raise ValueError(
                    f"{name} width {dim} != latent width {base.d_model}")
        self.base = base
        self.lrm = lrm
        self.compressor = compressor
        self.refiner = refiner
        self.muon = muon or MuonState()
        self.current = base.latents.copy()
        self.fast = self._fresh_fast()
        self.history: list[EditRecord] = []

    def _fresh_fast(self):
        if self.refiner.mode != "ttt":
            return []
        return [blk.fast_start() for blk in self.refiner.blocks]


def new_session(base, lrm, compressor, refiner, muon=None):
    return EditSession(base, lrm, compressor, refiner, muon=muon)


def refine(session, edits, mode="global", stride=4):
    """Adapt fast weights on the edit views, then rebuild the latents.

    Global mode rewrites every latent row; local mode first marches the edit
    cameras' rays to the nearest occupied voxels and rewrites only those
    rows. Fast weights persist across calls; latents are recomputed from the
    base each call so that repeated zero-step refines stay idempotent.
    """
    if mode not in ("global", "local"):
        raise ValueError(f"unknown edit mode {mode!r}")
    if not edits:
        raise ValueError("refine needs at least one edit view")
    images = np.stack([np.asarray(e.image, dtype=np.float32) for e in edits])
    cameras = [e.camera for e in edits]

    rows = None
    hits = None
    if mode == "local":
        geom = session.base.geometry()
        occ = session.base.occupancy()
        hit = set()
        for e in edits:
            hit |= set(first_hit_cells(geom, occ, e.camera,
                                       mask=getattr(e, "mask", None),
                                       stride=stride))
        hits = np.array(sorted(hit), dtype=np.int64)
        rows = np.nonzero(np.isin(session.base.cell_of_slot(), hits))[0]
        if rows.size == 0:
            warnings.warn("local edit rays hit no occupied voxels; no-op")
            session.history.append(
                EditRecord("local", len(edits), hits, tuple(edits)))
            return session

    with no_grad():
        tok = session.lrm.tokenize(images, cameras)
    x = Tensor(tok.tokens.data.copy())
    lat = Tensor(session.base.latents.copy())

    if session.refiner.mode == "ttt":
        for i, blk in enumerate(session.refiner.blocks):
            session.fast[i], _ = adapt(blk, x, session.muon,
                                       fast=session.fast[i])
            x, lat = apply_streams(blk, x, lat, session.fast[i],
                                   latent_rows=rows)
    else:
        for blk in session.refiner.blocks:
            lat = blk(lat, x, latent_rows=rows)

    if rows is None:
        session.current = lat.data
    else:
        merged = session.current.copy()
        merged[rows] = lat.data[rows]
        session.current = merged
    session.history.append(EditRecord(mode, len(edits), hits, tuple(edits)))
    return session


def reset_session(session):
    """Back to the freshly loaded asset: W0 fast weights, base latents."""
    session.current = session.base.latents.copy()
    session.fast = session._fresh_fast()
    session.history.clear()
    return session


def decoded_scene(session):
    """Gaussians decoded from the session's current latents."""
    lat = Tensor(session.current)
    pos, ls, quat, op, sh = session.compressor.gs_decode(
        lat, session.base.cell_ids, session.base.k_per_cell,
        session.base.geometry())
    return SplatScene(pos.data, ls.data, quat.data, op.data, sh.data)


def merge_local(session, hit_cells, scene, region=None, edits=None):
    """Materialize a local edit into `scene`, doubling the region.

    The region (originals inside the hit voxels) contributes twice to the
    output: once re-decoded after one dedicated fast-weight block adapted on
    the edit tokens, and once as fresh Gaussians decoded from the refined
    latents of each original's voxel (slots assigned round-robin). All
    Gaussians outside the region are passed through bit-identical.
    """
    if session.refiner.mode != "ttt":
        raise ValueError("merge_local needs fast-weight blocks, not the "
                         "cross-attention ablation")
    base = session.base
    hit = np.intersect1d(np.unique(np.asarray(hit_cells, dtype=np.int64)),
                         base.cell_ids)
    cells_all = point_cells(scene.positions, base.bounds_min, base.cell_size,
                            base.resolution)
    if region is None:
        region = np.nonzero(np.isin(cells_all, hit))[0]
    else:
        region = np.asarray(region, dtype=np.int64)
        keep = np.isin(cells_all[region], base.cell_ids)
        if not keep.all():
            warnings.warn("dropping region Gaussians outside occupied voxels")
            region = region[keep]
    if region.size == 0:
        return scene
    if not any(r.mode == "local" for r in session.history):
        warnings.warn("merge_local without a completed local refine")
    if edits is None:
        for rec in reversed(session.history):
            if rec.mode == "local" and rec.views:
                edits = rec.views
                break
        else:
            raise ValueError("no edit views available to adapt the merge block")

    comp = session.compressor
    if scene.sh.shape[-1] != comp.sh_coeffs:
        raise ValueError(
            f"scene has {scene.sh.shape[-1]} SH coefficients per channel, "
            f"compressor expects {comp.sh_coeffs}")

    geom = base.geometry()
    m = int(region.size)
    cells_r = cells_all[region]
    centers = geom.cell_center(cells_r)

    # originals -> tokens (no learned features for a raw asset: zeros)
    pos_rel = (scene.positions[region] - centers) / geom.cell_size
    attrs = np.concatenate([
        pos_rel, scene.log_scales[region], scene.rotations[region],
        scene.opacity_logits[region, None],
        scene.sh[region].reshape(m, -1)], axis=1).astype(np.float32)
    d_feature = comp.in_proj.w.data.shape[0] - comp.d_attr
    tok = comp.in_proj(Tensor(np.concatenate(
        [np.zeros((m, d_feature), dtype=np.float32), attrs], axis=1)))

    # dedicated block, adapted on the same edit tokens as the local refine
    images = np.stack([np.asarray(e.image, dtype=np.float32) for e in edits])
    with no_grad():
        etok = session.lrm.tokenize(images, [e.camera for e in edits])
    mb = session.refiner.merge_block
    mfast, _ = adapt(mb, Tensor(etok.tokens.data.copy()), session.muon)
    t = tok + mb.out(fast_apply(mfast, mb.wqv(mb.norm(tok)), mb.fast_mode))
    t = t + mb.mlp(mb.norm2(t))
    upd = comp.gs_decode_at(t, scene.positions[region], geom.cell_size)

    # one refined latent per original, round-robin over its voxel's slots
    offsets = np.concatenate([[0], np.cumsum(base.k_per_cell)])
    gi = np.searchsorted(base.cell_ids, cells_r)
    order = np.argsort(cells_r, kind="stable")
    rank = np.empty(m, dtype=np.int64)
    rank[order] = np.arange(m) - np.concatenate(
        [[0], np.cumsum(np.bincount(gi[order]))])[gi[order]]
    slot_rows = offsets[gi] + rank % base.k_per_cell[gi]
    new = comp.gs_decode_at(Tensor(session.current[slot_rows]),
                            geom.cell_center(cells_r), geom.cell_size)

    outside = np.setdiff1d(np.arange(len(scene)), region)
    fields = ("positions", "log_scales", "rotations", "opacity_logits", "sh")
    arrays = [np.concatenate([getattr(scene, name)[outside], u.data, n.data],
                             axis=0)
              for name, u, n in zip(fields, upd, new)]
    return SplatScene(*arrays)


# -- snapshot io ------------------------------------------------------------

def base_digest(vl):
    """Canonical content hash of a latent set, used as the snapshot's base
    reference so a snapshot can't silently reattach to the wrong asset."""
    h = hashlib.sha256()
    h.update(struct.pack("<I", vl.resolution))
    h.update(np.ascontiguousarray(vl.bounds_min, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(vl.cell_size, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(vl.cell_ids, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(vl.k_per_cell, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(vl.latents, dtype="<f4").tobytes())
    return h.digest()


def save_session(path, session):
    with open(path, "wb") as f:
        f.write(SESSION_MAGIC)
        f.write(struct.pack("<I", SESSION_VERSION))
        f.write(base_digest(session.base))
        s, d = session.current.shape
        f.write(struct.pack("<II", s, d))
        f.write(np.ascontiguousarray(session.current, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(session.fast)))
        for blk in session.fast:
            f.write(struct.pack("<I", len(blk)))
            for w in blk:
                f.write(struct.pack("<I", w.data.ndim))
                f.write(struct.pack(f"<{w.data.ndim}I", *w.data.shape))
                f.write(np.ascontiguousarray(w.data, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(session.history)))
        for rec in session.history:
            f.write(struct.pack("<BI", rec.mode == "local", rec.n_views))
            if rec.hit_cells is None:
                f.write(struct.pack("<B", 0))
            else:
                f.write(struct.pack("<BI", 1, len(rec.hit_cells)))
                f.write(np.ascontiguousarray(rec.hit_cells,
                                             dtype="<i8").tobytes())


def load_session(path, base, lrm, compressor, refiner, muon=None):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != SESSION_MAGIC:
        raise ValueError("not a session snapshot (bad magic)")
    (ver,) = struct.unpack_from("<I", raw, 4)
    if ver != SESSION_VERSION:
        raise ValueError(f"unsupported session snapshot version {ver}")
    if raw[8:40] != base_digest(base):
        raise ValueError("snapshot references a different base asset")
    off = 40
    s, d = struct.unpack_from("<II", raw, off); off += 8
    current = np.frombuffer(raw, "<f4", s * d, off).reshape(s, d).copy()
    off += 4 * s * d
    session = EditSession(base, lrm, compressor, refiner, muon=muon)
    if current.shape != session.current.shape:
        raise ValueError("snapshot latents do not match the base asset")
    session.current = current
    (n_blocks,) = struct.unpack_from("<I", raw, off); off += 4
    if n_blocks != len(session.fast):
        raise ValueError(f"snapshot has {n_blocks} fast-weight blocks, "
                         f"refiner expects {len(session.fast)}")
    fast = []
    for bi in range(n_blocks):
        (n_mats,) = struct.unpack_from("<I", raw, off); off += 4
        mats = []
        for mi in range(n_mats):
            (nd,) = struct.unpack_from("<I", raw, off); off += 4
            shape = struct.unpack_from(f"<{nd}I", raw, off); off += 4 * nd
            count = int(np.prod(shape))
            w = np.frombuffer(raw, "<f4", count, off).reshape(shape).copy()
            off += 4 * count
            want = session.fast[bi][mi].data.shape
            if w.shape != want:
                raise ValueError(
                    f"fast weight {bi}.{mi} shape {w.shape} != {want}")
            mats.append(Tensor(w))
        fast.append(mats)
    session.fast = fast
    (n_rec,) = struct.unpack_from("<I", raw, off); off += 4
    history = []
    for _ in range(n_rec):
        is_local, n_views = struct.unpack_from("<BI", raw, off); off += 5
        (has_hits,) = struct.unpack_from("<B", raw, off); off += 1
        hits = None
        if has_hits:
            (n_hits,) = struct.unpack_from("<I", raw, off); off += 4
            hits = np.frombuffer(raw, "<i8", n_hits, off).copy()
            off += 8 * n_hits
        history.append(EditRecord("local" if is_local else "global",
                                  n_views, hits))
    if off != len(raw):
        raise ValueError("trailing bytes after session snapshot")
    session.history = history
    return session
