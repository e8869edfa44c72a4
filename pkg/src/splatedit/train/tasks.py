"""Synthetic edit tasks with targets that are correct by construction.

Recolor stands in for relighting: a hue rotation about the gray axis plus
a directional shading ramp, both parametric, applied identically to edit
and target renders. Zoom crops move the camera closer and score against
ground-truth renders near the zoomed view. Graffiti paints a random
quadratic stroke into the splats themselves, then renders edit and target
views from the painted scene, so every view agrees with the edit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..render.raster import RasterConfig, rasterize
from ..splats.model import SplatScene, camera_from_lookat
from ..splats.sh import rgb_to_dc
from ..compress.pipeline import canonical_cameras

TASK_KINDS = ("recolor", "zoom", "graffiti")
GRAY_AXIS = np.ones(3) / np.sqrt(3.0)


# ---------------------------------------------------------------------------
# appearance transforms
# ---------------------------------------------------------------------------

def hue_rotate(img, angle):
    """Rotate RGB about the gray axis; linear, no clipping."""
    a = GRAY_AXIS
    k = np.array([[0, -a[2], a[1]],
                  [a[2], 0, -a[0]],
                  [-a[1], a[0], 0]])
    rot = (np.cos(angle) * np.eye(3) + np.sin(angle) * k
           + (1 - np.cos(angle)) * np.outer(a, a))
    return np.asarray(img, dtype=np.float64) @ rot.T


def shade_field(h, w, direction, amplitude):
    """1 + amplitude * signed ramp along `direction` over [-1, 1]^2 coords."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / max(np.linalg.norm(d), 1e-12)
    u = np.zeros(w) if w == 1 else 2.0 * np.arange(w) / (w - 1) - 1.0
    v = np.zeros(h) if h == 1 else 2.0 * np.arange(h) / (h - 1) - 1.0
    return 1.0 + amplitude * (u[None, :] * d[0] + v[:, None] * d[1])


def directional_shade(img, direction, amplitude):
    img = np.asarray(img, dtype=np.float64)
    f = shade_field(img.shape[0], img.shape[1], direction, amplitude)
    return img * (f[..., None] if img.ndim == 3 else f)


# ---------------------------------------------------------------------------
# graffiti strokes
# ---------------------------------------------------------------------------

def stroke_points(p0, p1, p2, n):
    """Quadratic curve samples from control points, shape (n, 2) as (x, y)."""
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2 = (np.asarray(p, dtype=np.float64) for p in (p0, p1, p2))
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def stroke_mask(rng, h, w, radius=2.0, n_samples=256, ctrl=None):
    """Boolean (h, w) mask of pixels within `radius` of a random stroke."""
    if ctrl is None:
        ctrl = rng.uniform(0, (w - 1, h - 1), (3, 2))
    pts = stroke_points(ctrl[0], ctrl[1], ctrl[2], n_samples)
    ys, xs = np.mgrid[0:h, 0:w]
    d2 = ((xs.reshape(-1, 1) - pts[None, :, 0]) ** 2
          + (ys.reshape(-1, 1) - pts[None, :, 1]) ** 2).min(axis=1)
    return (d2 <= radius * radius).reshape(h, w)


def paint_stroke(scene, cam, mask, color, strength=0.85):
    """New scene with splats under the stroke recolored toward `color`.

    Selection projects splat centers into `cam` and takes those within the
    mask's stroke footprint; if the stroke misses every center, the single
    nearest projected splat is painted so the edit is never a no-op.
    """
    px, z = cam.project(scene.positions)
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("empty stroke mask")
    d = np.hypot(px[:, 0:1] - xs[None, :], px[:, 1:2] - ys[None, :]).min(axis=1)
    hit = (d <= 1.5) & (z > 0)
    if not hit.any():
        infront = np.where(z > 0, d, np.inf)
        hit = np.zeros(len(scene), dtype=bool)
        hit[int(np.argmin(infront))] = True
    sh = np.array(scene.sh, copy=True)
    dc = rgb_to_dc(np.asarray(color, dtype=np.float64))
    sh[hit, :, 0] = ((1 - strength) * sh[hit, :, 0]
                     + strength * dc[None, :]).astype(sh.dtype)
    sh[hit, :, 1:] *= np.float32(1 - strength)
    return SplatScene(scene.positions, scene.log_scales, scene.rotations,
                      scene.opacity_logits, sh)


# ---------------------------------------------------------------------------
# task samples
# ---------------------------------------------------------------------------

@dataclass
class EditTaskSample:
    """One training/eval item: what the user edited and what must come out."""

    scene: SplatScene
    kind: str
    canonical_views: tuple   # ((image, camera), ...) base appearance
    edit_views: tuple        # ((image, camera), ...) the user's edit inputs
    target_views: tuple      # ((image, camera), ...) ground truth to match
    params: dict = field(default_factory=dict)


def _render(scene, cam):
    return rasterize(scene, cam, RasterConfig()).color


def recolor_sample(rng, scene, n_edit=1, n_target=2, image_size=(16, 16)):
    h, w = image_size
    cams = canonical_cameras(scene, n_views=n_edit + n_target,
                             width=w, height=h)
    hue = float(rng.uniform(0.4, 2 * np.pi - 0.4))
    shade_dir = rng.normal(size=2)
    shade_dir /= max(np.linalg.norm(shade_dir), 1e-9)
    shade_amp = float(rng.uniform(0.1, 0.3))

    def transform(img):
        return np.clip(directional_shade(hue_rotate(img, hue),
                                         shade_dir, shade_amp), 0, 1)

    base = [_render(scene, c) for c in cams]
    edited = [transform(b) for b in base]
    return EditTaskSample(
        scene=scene, kind="recolor",
        canonical_views=tuple((base[i], cams[i]) for i in range(n_edit)),
        edit_views=tuple((edited[i], cams[i]) for i in range(n_edit)),
        target_views=tuple((edited[i], cams[i])
                           for i in range(n_edit, n_edit + n_target)),
        params={"hue": hue, "shade_dir": tuple(shade_dir),
                "shade_amp": shade_amp})


def zoom_crop_sample(rng, scene, n_edit=1, image_size=(16, 16),
                     zoom=(0.35, 0.55), jitter=0.25):
    """Closer cameras as edits; two ground-truth views around each zoom."""
    h, w = image_size
    cams = canonical_cameras(scene, n_views=max(n_edit, 2),
                             width=w, height=h)[:n_edit]
    center = (scene.bounds[0] + scene.bounds[1]) / 2
    edit, targets, canonical = [], [], []
    for cam in cams:
        canonical.append((_render(scene, cam), cam))
        eye = cam.cam_position()
        f = float(rng.uniform(*zoom))
        zeye = center + f * (eye - center)
        zcam = camera_from_lookat(zeye, center, cam.fx, w, h)
        edit.append((_render(scene, zcam), zcam))
        radial = zeye - center
        for sign in (-1.0, 1.0):
            ang = sign * float(rng.uniform(0.5, 1.0)) * jitter
            rot = np.array([[np.cos(ang), 0, np.sin(ang)],
                            [0, 1, 0],
                            [-np.sin(ang), 0, np.cos(ang)]])
            tcam = camera_from_lookat(center + rot @ radial, center,
                                      cam.fx, w, h)
            targets.append((_render(scene, tcam), tcam))
    return EditTaskSample(scene=scene, kind="zoom",
                          canonical_views=tuple(canonical),
                          edit_views=tuple(edit),
                          target_views=tuple(targets),
                          params={"zoom": zoom})


def graffiti_sample(rng, scene, n_edit=1, n_target=2, image_size=(24, 24),
                    radius=2.5):
    h, w = image_size
    cams = canonical_cameras(scene, n_views=n_edit + n_target,
                             width=w, height=h)
    # anchor the stroke near the projected splats so it lands on the scene
    px, z = cams[0].project(scene.positions)
    anchor = px[z > 0].mean(axis=0) if (z > 0).any() else np.array([w / 2, h / 2])
    spread = 0.25 * min(h, w)
    ctrl = np.clip(anchor[None, :] + rng.uniform(-spread, spread, (3, 2)),
                   0, (w - 1, h - 1))
    mask = stroke_mask(rng, h, w, radius=radius, ctrl=ctrl)
    color = rng.uniform(0.2, 1.0, 3)
    painted = paint_stroke(scene, cams[0], mask, color)
    return EditTaskSample(
        scene=scene, kind="graffiti",
        canonical_views=tuple((_render(scene, c), c) for c in cams[:n_edit]),
        edit_views=tuple((_render(painted, c), c) for c in cams[:n_edit]),
        target_views=tuple((_render(painted, c), c)
                           for c in cams[n_edit:n_edit + n_target]),
        params={"mask": mask, "color": tuple(color), "painted": painted})


def sample_task(kind, rng, scene, image_size=(16, 16), **kw):
    if kind == "recolor":
        return recolor_sample(rng, scene, image_size=image_size, **kw)
    if kind == "zoom":
        return zoom_crop_sample(rng, scene, image_size=image_size, **kw)
    if kind == "graffiti":
        return graffiti_sample(rng, scene, image_size=image_size, **kw)
    raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
