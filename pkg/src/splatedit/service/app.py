"""Interactive edit service: sessions, renders, synchronous edits, events.

One writer per session: POST /edit takes the session's lock non-blocking
and answers 409 while another edit runs. Renders never lock; an edit
installs its result as a single reference swap, so a concurrent render
sees the pre- or post-edit latents, never a mix. Every mutation pushes a
{"type": "latents-updated"} message to the session's event subscribers.
"""

from __future__ import annotations

import json
import queue
import tempfile
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import Body, FastAPI, HTTPException, Response
from fastapi.responses import StreamingResponse

from ..compress.pipeline import compress_asset, load_latents
from ..refine.session import (EditView, decoded_scene, new_session, refine,
                              reset_session, save_session)
from ..render.image_io import png_bytes
from ..render.raster import RasterConfig, rasterize
from ..splats.ply import load_ply
from .bundle import load_bundle
from .wire import camera_from_json, decode_mask, image_from_b64, resized_camera


@dataclass
class _Box:
    """One live session plus its plumbing."""

    sid: str
    asset: str
    created: float
    session: object
    edit_count: int = 0
    edit_index: int = 0                  # monotone, ticks on edit and reset
    lock: threading.Lock = field(default_factory=threading.Lock)
    queues: list = field(default_factory=list)
    qlock: threading.Lock = field(default_factory=threading.Lock)

    def handle(self):
        return {"session": self.sid, "asset": self.asset,
                "created": self.created, "edit_count": self.edit_count}

    def subscribe(self):
        q = queue.SimpleQueue()
        with self.qlock:
            self.queues.append(q)
        return q

    def unsubscribe(self, q):
        with self.qlock:
            if q in self.queues:
                self.queues.remove(q)

    def emit(self):
        msg = {"type": "latents-updated", "session": self.sid,
               "edit_index": self.edit_index}
        with self.qlock:
            listeners = list(self.queues)
        for q in listeners:
            q.put(msg)


def _bad(detail):
    raise HTTPException(status_code=400, detail=detail)


def create_app(bundle_dir=None, models=None, res=16, n_views=9):
    """Build the service; `models` overrides bundle loading for embedding."""
    if models is None:
        models, _ = load_bundle(bundle_dir,
                                need=("lrm", "compressor", "refiner"))
    lrm, comp, ref = models["lrm"], models["compressor"], models["refiner"]
    app = FastAPI(title="splatedit")
    sessions: dict[str, _Box] = {}

    def box_of(sid):
        box = sessions.get(sid)
        if box is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return box

    def load_asset(payload):
        if "asset_path" in payload:
            path, label = Path(payload["asset_path"]), payload["asset_path"]
            if not path.is_file():
                _bad(f"no such asset: {path}")
        elif "asset_b64" in payload:
            fmt = payload.get("format", "spvl")
            if fmt not in ("spvl", "ply"):
                _bad(f"unknown asset format {fmt!r}")
            import base64
            tmp = tempfile.NamedTemporaryFile(suffix=f".{fmt}", delete=False)
            tmp.write(base64.b64decode(payload["asset_b64"]))
            tmp.close()
            path, label = Path(tmp.name), f"upload.{fmt}"
        else:
            _bad("need asset_path or asset_b64")
        try:
            if path.suffix == ".spvl":
                return load_latents(path), label
            vl, _, _ = compress_asset(load_ply(path), lrm, comp,
                                      res=res, n_views=n_views)
            return vl, label
        except (ValueError, OSError) as e:
            _bad(f"cannot load asset: {e}")

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    @app.post("/session")
    def create_session(payload: dict = Body(...)):
        vl, label = load_asset(payload)
        box = _Box(sid=uuid.uuid4().hex, asset=label, created=time.time(),
                   session=new_session(vl, lrm, comp, ref))
        sessions[box.sid] = box
        return box.handle()

    @app.get("/session/{sid}/render")
    def render(sid: str, camera: str, width: int | None = None,
               height: int | None = None):
        box = box_of(sid)
        try:
            cam = camera_from_json(json.loads(camera))
            if width or height:
                cam = resized_camera(cam, width or cam.width,
                                     height or cam.height)
        except (ValueError, json.JSONDecodeError) as e:
            _bad(f"bad camera: {e}")
        img = rasterize(decoded_scene(box.session), cam, RasterConfig()).color
        return Response(content=png_bytes(img), media_type="image/png")

    def parse_views(raw):
        if not isinstance(raw, list) or not raw:
            _bad("need at least one edit view")
        views = []
        for i, v in enumerate(raw):
            try:
                cam = camera_from_json(v["camera"])
                img = image_from_b64(v["image_b64"]).astype(np.float32)
            except KeyError as e:
                _bad(f"view {i} missing {e}")
            except ValueError as e:
                _bad(f"view {i}: {e}")
            if img.shape[:2] != (cam.height, cam.width):
                _bad(f"view {i}: image {img.shape[:2]} != camera size "
                     f"{(cam.height, cam.width)}")
            if img.shape[:2] != lrm.image_size:
                _bad(f"view {i}: edit views must be {lrm.image_size}")
            mask = None
            if v.get("mask") is not None:
                try:
                    mask = decode_mask(v["mask"])
                except ValueError as e:
                    _bad(f"view {i} mask: {e}")
            try:
                views.append(EditView(img, cam, mask))
            except ValueError as e:
                _bad(f"view {i}: {e}")
        return views

    @app.post("/session/{sid}/edit")
    def edit(sid: str, payload: dict = Body(...)):
        box = box_of(sid)
        mode = payload.get("mode", "global")
        if mode not in ("global", "local"):
            _bad(f"unknown edit mode {mode!r}")
        views = parse_views(payload.get("views"))
        stride = int(payload.get("stride", 4))
        if not box.lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="edit in progress")
        try:
            t0 = time.perf_counter()
            refine(box.session, views, mode=mode, stride=stride)
            dt = time.perf_counter() - t0
            box.edit_count += 1
            box.edit_index += 1
        finally:
            box.lock.release()
        box.emit()
        hits = box.session.history[-1].hit_cells
        return {"session": sid, "edit_index": box.edit_index, "mode": mode,
                "hit_voxels": "all" if hits is None else len(hits),
                "timing_seconds": dt}

    @app.post("/session/{sid}/reset")
    def reset(sid: str):
        box = box_of(sid)
        if not box.lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="edit in progress")
        try:
            reset_session(box.session)
            box.edit_count = 0
            box.edit_index += 1
        finally:
            box.lock.release()
        box.emit()
        return box.handle()

    @app.get("/session/{sid}/snapshot")
    def snapshot(sid: str):
        box = box_of(sid)
        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "session.spsn"
            save_session(path, box.session)
            blob = path.read_bytes()
        return Response(
            content=blob, media_type="application/octet-stream",
            headers={"Content-Disposition":
                     f'attachment; filename="{sid}.spsn"'})

    @app.get("/session/{sid}/events")
    def events(sid: str):
        box = box_of(sid)
        q = box.subscribe()

        def stream():
            try:
                yield ":connected\n\n"
                while True:
                    try:
                        msg = q.get(timeout=0.5)
                        yield f"data: {json.dumps(msg)}\n\n"
                    except queue.Empty:
                        yield ":keepalive\n\n"
            finally:
                box.unsubscribe(q)

        return StreamingResponse(stream(), media_type="text/event-stream")

    app.state.sessions = sessions
    return app
