"""Procedural splat assets for training and tests.

Primitives (sphere / box / plane) are sampled into surface-aligned
Gaussian disks with solid, striped, or checkered coloring. Everything is
a pure function of the seed. `period` for stripes/checker is the full
repeat length (one light + one dark band), so a rendered pattern
correlates with itself at that spacing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import SplatScene, logit
from .sh import n_coeffs, rgb_to_dc


@dataclass(frozen=True)
class PrimitiveSpec:
    kind: str = "sphere"            # sphere | box | plane
    center: tuple = (0.0, 0.0, 0.0)
    size: tuple = (0.3, 0.3, 0.3)   # sphere: (r,·,·); box/plane: half extents
    texture: str = "solid"          # solid | stripes | checker
    color_a: tuple = (0.8, 0.3, 0.2)
    color_b: tuple = (0.9, 0.9, 0.9)
    period: float = 0.2             # world-unit repeat length
    axis: int = 0                   # stripe direction (local axis index)
    n: int = 400
    overlap: float = 1.7            # splat radius multiplier over sample spacing
    flatness: float = 0.15          # normal-axis scale relative to tangential
    sh_noise: float = 0.0           # stddev of higher-order coefficients


def _sphere_samples(rng, spec):
    r = spec.size[0]
    v = rng.standard_normal((spec.n, 3))
    normals = v / np.linalg.norm(v, axis=1, keepdims=True)
    pts = np.asarray(spec.center) + r * normals
    area = 4 * np.pi * r * r
    return pts, normals, area


def _box_samples(rng, spec):
    hx, hy, hz = spec.size
    faces = [  # (normal axis, sign, area)
        (0, +1, 4 * hy * hz), (0, -1, 4 * hy * hz),
        (1, +1, 4 * hx * hz), (1, -1, 4 * hx * hz),
        (2, +1, 4 * hx * hy), (2, -1, 4 * hx * hy),
    ]
    areas = np.array([f[2] for f in faces])
    pick = rng.choice(6, size=spec.n, p=areas / areas.sum())
    uv = rng.uniform(-1, 1, (spec.n, 2))
    pts = np.empty((spec.n, 3))
    normals = np.zeros((spec.n, 3))
    half = np.array([hx, hy, hz])
    for i, (ax, sign, _) in enumerate(faces):
        m = pick == i
        t = [j for j in range(3) if j != ax]
        pts[m, ax] = sign * half[ax]
        pts[m, t[0]] = uv[m, 0] * half[t[0]]
        pts[m, t[1]] = uv[m, 1] * half[t[1]]
        normals[m, ax] = sign
    return np.asarray(spec.center) + pts, normals, float(areas.sum())


def _plane_samples(rng, spec):
    hx, _, hz = spec.size
    uv = rng.uniform(-1, 1, (spec.n, 2))
    pts = np.stack([uv[:, 0] * hx, np.zeros(spec.n), uv[:, 1] * hz], axis=1)
    normals = np.tile([0.0, 1.0, 0.0], (spec.n, 1))
    return np.asarray(spec.center) + pts, normals, float(4 * hx * hz)


_SAMPLERS = {"sphere": _sphere_samples, "box": _box_samples, "plane": _plane_samples}


def _texture_colors(spec, pts):
    local = pts - np.asarray(spec.center)
    a = np.asarray(spec.color_a, dtype=np.float64)
    b = np.asarray(spec.color_b, dtype=np.float64)
    if spec.texture == "solid":
        return np.tile(a, (len(pts), 1))
    band = spec.period / 2.0  # two bands per repeat
    if spec.texture == "stripes":
        k = np.floor(local[:, spec.axis] / band).astype(np.int64)
        sel = (k % 2 == 0)
    elif spec.texture == "checker":
        k = np.floor(local / band).astype(np.int64).sum(axis=1)
        sel = (k % 2 == 0)
    else:
        raise ValueError(f"unknown texture {spec.texture!r}")
    return np.where(sel[:, None], a, b)


def _normal_to_quat(normals):
    """Quaternions rotating local +z onto each normal (w,x,y,z)."""
    z = np.array([0.0, 0.0, 1.0])
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    dots = n @ z
    axes = np.cross(np.tile(z, (len(n), 1)), n)
    quats = np.empty((len(n), 4))
    quats[:, 0] = 1.0 + dots
    quats[:, 1:] = axes
    flipped = dots < -1 + 1e-9  # antiparallel: rotate pi about x
    quats[flipped] = [0.0, 1.0, 0.0, 0.0]
    return quats / np.linalg.norm(quats, axis=1, keepdims=True)


def synth_primitive(spec, seed, sh_degree=3):
    if spec.kind not in _SAMPLERS:
        raise ValueError(f"unknown primitive kind {spec.kind!r}")
    rng = np.random.default_rng(seed)
    pts, normals, area = _SAMPLERS[spec.kind](rng, spec)
    colors = np.clip(_texture_colors(spec, pts), 0.0, 1.0)

    splat_r = spec.overlap * np.sqrt(area / (np.pi * spec.n))
    log_scales = np.tile(np.log([splat_r, splat_r, spec.flatness * splat_r]),
                         (spec.n, 1))
    log_scales += rng.uniform(-0.15, 0.15, log_scales.shape)
    quats = _normal_to_quat(normals)
    opacity_logits = logit(rng.uniform(0.75, 0.95, spec.n))

    m = n_coeffs(sh_degree)
    sh = np.zeros((spec.n, 3, m))
    sh[:, :, 0] = rgb_to_dc(colors)
    if spec.sh_noise > 0 and m > 1:
        sh[:, :, 1:] = rng.normal(0.0, spec.sh_noise, (spec.n, 3, m - 1))
    return SplatScene(pts, log_scales, quats, opacity_logits, sh, sh_degree)


def synth_scene(specs, seed, sh_degree=3):
    """Deterministic multi-primitive asset; same seed, same scene."""
    if isinstance(specs, PrimitiveSpec):
        specs = [specs]
    parts = [synth_primitive(s, seed + 7919 * i, sh_degree)
             for i, s in enumerate(specs)]
    return SplatScene.concatenate(parts)


_PALETTE = [(0.85, 0.25, 0.2), (0.2, 0.55, 0.85), (0.95, 0.75, 0.2),
            (0.3, 0.75, 0.4), (0.7, 0.4, 0.8), (0.9, 0.5, 0.3),
            (0.25, 0.7, 0.7), (0.85, 0.85, 0.85)]


def random_desk_scene(seed, n_objects=3, gaussians_per_object=350,
                      sh_degree=3, sh_noise=0.03, with_ground=True):
    """Small random tabletop arrangement inside roughly the unit box."""
    rng = np.random.default_rng(seed)
    specs = []
    if with_ground:
        specs.append(PrimitiveSpec(
            kind="plane", center=(0.0, -0.35, 0.0), size=(0.8, 0.0, 0.8),
            texture=rng.choice(["solid", "checker"]),
            color_a=_PALETTE[rng.integers(len(_PALETTE))],
            color_b=(0.95, 0.95, 0.92), period=0.4,
            n=int(gaussians_per_object * 1.2), sh_noise=sh_noise))
    for _ in range(n_objects):
        kind = rng.choice(["sphere", "box"])
        size = rng.uniform(0.1, 0.22)
        center = (rng.uniform(-0.4, 0.4), -0.35 + size + rng.uniform(0.0, 0.1),
                  rng.uniform(-0.4, 0.4))
        specs.append(PrimitiveSpec(
            kind=kind, center=center,
            size=(size, size * rng.uniform(0.6, 1.4), size * rng.uniform(0.6, 1.4)),
            texture=rng.choice(["solid", "stripes", "checker"], p=[0.5, 0.25, 0.25]),
            color_a=_PALETTE[rng.integers(len(_PALETTE))],
            color_b=_PALETTE[rng.integers(len(_PALETTE))],
            period=rng.uniform(0.08, 0.2), axis=int(rng.integers(3)),
            n=gaussians_per_object, sh_noise=sh_noise))
    return synth_scene(specs, int(rng.integers(2 ** 31)), sh_degree)
