"""Splat asset data model: Gaussians, scenes, cameras.

A scene is struct-of-arrays (one ndarray per attribute) and immutable
after construction; edits build new scenes. Scales live in log space and
opacities in logit space everywhere outside a renderer, matching the
de-facto splat interchange convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sh import n_coeffs


def quat_to_rotmat(q):
    """Unit-quaternion (w,x,y,z) -> rotation matrix; batched over leading dims.

    Normalizes first; an (numerically) zero quaternion is a contract error.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("zero quaternion has no orientation")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian:
    """One splat, decoded-view accessors included. Stored encodings:
    log_scale, logit opacity, quaternion (w,x,y,z), sh (3, (deg+1)^2)."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh: np.ndarray

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    @property
    def rotmat(self):
        return quat_to_rotmat(self.rotation)

    def covariance(self):
        R = self.rotmat
        return R @ np.diag(self.scale ** 2) @ R.T


class SplatScene:
    """Ordered Gaussian collection with stable indices.

    Arrays: positions (N,3), log_scales (N,3), rotations (N,4) wxyz,
    opacity_logits (N,), sh (N,3,M). All float32, write-locked.
    """

    def __init__(self, positions, log_scales, rotations, opacity_logits, sh,
                 sh_degree=None, bounds=None):
        self.positions = self._lock(positions, (None, 3))
        self.log_scales = self._lock(log_scales, (None, 3))
        self.rotations = self._lock(rotations, (None, 4))
        self.opacity_logits = self._lock(opacity_logits, (None,))
        self.sh = self._lock(sh, (None, 3, None))
        n = len(self.positions)
        for name in ("log_scales", "rotations", "opacity_logits", "sh"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length != {n}")
        m = self.sh.shape[-1]
        deg = int(np.sqrt(m)) - 1
        if n_coeffs(deg) != m:
            raise ValueError(f"sh coefficient count {m} is not (d+1)^2")
        if sh_degree is None:
            sh_degree = deg
        if n_coeffs(sh_degree) != m:
            raise ValueError(f"sh_degree {sh_degree} disagrees with {m} coefficients")
        self.sh_degree = sh_degree
        if np.any(np.linalg.norm(self.rotations, axis=-1) < 1e-12):
            raise ValueError("zero quaternion in scene")
        if n:
            lo = self.positions.min(axis=0)
            hi = self.positions.max(axis=0)
        else:
            lo = np.zeros(3, np.float32)
            hi = np.zeros(3, np.float32)
        if bounds is None:
            bounds = (lo, hi)
        else:
            bmin = np.asarray(bounds[0], np.float64)
            bmax = np.asarray(bounds[1], np.float64)
            if n and (np.any(lo < bmin - 1e-6) or np.any(hi > bmax + 1e-6)):
                raise ValueError("bounds do not contain every position")
        self.bounds = (np.asarray(bounds[0], np.float32).copy(),
                       np.asarray(bounds[1], np.float32).copy())
        self.bounds[0].setflags(write=False)
        self.bounds[1].setflags(write=False)

    @staticmethod
    def _lock(arr, shape):
        a = np.asarray(arr, dtype=np.float32)
        if a.ndim != len(shape):
            raise ValueError(f"rank {a.ndim} != {len(shape)}")
        for got, want in zip(a.shape, shape):
            if want is not None and got != want:
                raise ValueError(f"shape {a.shape} incompatible with {shape}")
        a = a.copy()
        a.setflags(write=False)
        return a

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i):
        return Gaussian(self.positions[i], self.log_scales[i], self.rotations[i],
                        float(self.opacity_logits[i]), self.sh[i])

    # decoded views (fresh arrays, float64 for downstream math)
    def scales(self):
        return np.exp(self.log_scales.astype(np.float64))

    def opacities(self):
        return sigmoid(self.opacity_logits)

    def rotmats(self):
        return quat_to_rotmat(self.rotations)

    def covariances(self):
        R = self.rotmats()
        s2 = self.scales() ** 2
        return np.einsum("nij,nj,nkj->nik", R, s2, R)

    def replace(self, **arrays):
        """New scene with some attribute arrays swapped out."""
        kw = dict(positions=self.positions, log_scales=self.log_scales,
                  rotations=self.rotations, opacity_logits=self.opacity_logits,
                  sh=self.sh, sh_degree=self.sh_degree)
        kw.update(arrays)
        if "sh" in arrays and arrays["sh"].shape[-1] != self.sh.shape[-1]:
            kw.pop("sh_degree")
        return SplatScene(**kw)

    def subset(self, idx):
        idx = np.asarray(idx)
        return SplatScene(self.positions[idx], self.log_scales[idx],
                          self.rotations[idx], self.opacity_logits[idx],
                          self.sh[idx], self.sh_degree)

    @staticmethod
    def concatenate(scenes):
        scenes = list(scenes)
        deg = scenes[0].sh_degree
        if any(s.sh_degree != deg for s in scenes):
            raise ValueError("cannot concatenate scenes of mixed sh degree")
        return SplatScene(
            np.concatenate([s.positions for s in scenes]),
            np.concatenate([s.log_scales for s in scenes]),
            np.concatenate([s.rotations for s in scenes]),
            np.concatenate([s.opacity_logits for s in scenes]),
            np.concatenate([s.sh for s in scenes]), deg)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: world-to-camera rigid transform + intrinsics.

    OpenCV-style: camera looks down +z, pixel = (fx x/z + cx, fy y/z + cy).
    """

    world_to_cam: np.ndarray  # 4x4, last row (0,0,0,1)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        w2c = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        R = w2c[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise ValueError("world_to_cam rotation is not orthonormal")
        if np.max(np.abs(w2c[3] - np.array([0, 0, 0, 1.0]))) > 1e-9:
            raise ValueError("world_to_cam last row must be (0,0,0,1)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        w2c = w2c.copy()
        w2c.setflags(write=False)
        object.__setattr__(self, "world_to_cam", w2c)

    @property
    def R(self):
        return self.world_to_cam[:3, :3]

    @property
    def t(self):
        return self.world_to_cam[:3, 3]

    def cam_position(self):
        return -self.R.T @ self.t

    def to_cam(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.R.T + self.t

    def project(self, pts):
        """World points -> (pixel xy, depth z). No culling."""
        pc = self.to_cam(pts)
        z = pc[..., 2]
        px = np.stack([self.fx * pc[..., 0] / z + self.cx,
                       self.fy * pc[..., 1] / z + self.cy], axis=-1)
        return px, z

    def resized(self, width, height):
        sx, sy = width / self.width, height / self.height
        return Camera(self.world_to_cam, self.fx * sx, self.fy * sy,
                      self.cx * sx, self.cy * sy, width, height)


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera matrix with +z toward the target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # forward parallel to up: pick any perpendicular
        upv = np.array([1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows: camera axes in world frame
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ eye
    return w2c


def camera_from_lookat(eye, target, fx, width, height, up=(0.0, 1.0, 0.0), fy=None):
    return Camera(look_at(eye, target, up), fx, fy if fy is not None else fx,
                  width / 2.0, height / 2.0, width, height)


def orbit_cameras(n, center, radius, fx, width, height, elevations=(0.35,), seed=None):
    """Deterministic ring(s) of inward-looking cameras around `center`."""
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for elev in elevations:
        for i in range(n):
            ang = 2 * np.pi * i / n + (0.0 if seed is None else (seed % 97) * 0.01)
            eye = center + radius * np.array([
                np.cos(ang) * np.cos(elev), np.sin(elev), np.sin(ang) * np.cos(elev)])
            cams.append(camera_from_lookat(eye, center, fx, width, height))
    return cams
