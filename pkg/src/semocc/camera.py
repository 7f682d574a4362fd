"""Pinhole cameras, rays, frustum normalisation and positional encoding.

Conventions: camera frame is x right, y down, z forward. Poses are
camera-to-world 4x4 matrices. Continuous pixel coordinates put the centre of
pixel (row i, col j) at (j + 0.5, i + 0.5), so an image spans [0, W) x [0, H).

The array functions accept either numpy arrays or torch tensors and return the
same kind they were given.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


def _xp(a):
    return torch if isinstance(a, torch.Tensor) else np


class BehindCameraError(ValueError):
    """Raised when a point has non-positive camera depth."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def K34(self) -> np.ndarray:
        """3x4 projection matrix [K | 0]."""
        return np.concatenate([self.K, np.zeros((3, 1))], axis=1)

    def scaled(self, factor: float) -> "Intrinsics":
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                          int(round(self.width * factor)), int(round(self.height * factor)))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def validate_pose(pose: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValueError(f"pose must be 4x4, got {pose.shape}")
    if not np.allclose(pose[3], [0, 0, 0, 1], atol=atol):
        raise ValueError("pose bottom row must be (0, 0, 0, 1)")
    R = pose[:3, :3]
    if not np.allclose(R.T @ R, np.eye(3), atol=atol) or np.linalg.det(R) <= 0:
        raise ValueError("pose rotation must be orthonormal with det +1")
    return pose


def invert_pose(pose: np.ndarray) -> np.ndarray:
    R, t = pose[:3, :3], pose[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose at `position` whose +z axis points at `target`."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        # looking along `up`; pick any perpendicular right vector
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, fwd, position
    return pose


def world_to_camera(points, pose):
    """Transform world points (..., 3) into the frame of a camera-to-world pose."""
    xp = _xp(points)
    R = pose[:3, :3]
    t = pose[:3, 3]
    if xp is torch:
        R = torch.as_tensor(R, dtype=points.dtype, device=points.device)
        t = torch.as_tensor(t, dtype=points.dtype, device=points.device)
    return (points - t) @ R


def project(point, intrinsics: Intrinsics, pose, *, strict: bool = True):
    """Project world point(s) to pixels.

    Returns ``(pixel, depth)`` where ``pixel`` has shape (..., 2) and ``depth``
    is the camera-frame z. With ``strict`` a point at or behind the camera
    raises :class:`BehindCameraError`; otherwise such pixels are returned as
    garbage and the caller masks on ``depth > 0``.
    """
    xp = _xp(point)
    pc = world_to_camera(point, pose)
    z = pc[..., 2]
    if strict and bool((z <= 0).any()):
        raise BehindCameraError("point is behind the camera")
    safe = xp.where(z > 0, z, xp.ones_like(z)) if not strict else z
    u = intrinsics.fx * pc[..., 0] / safe + intrinsics.cx
    v = intrinsics.fy * pc[..., 1] / safe + intrinsics.cy
    return xp.stack([u, v], -1), z


@dataclass
class Ray:
    """Ray bundle; fields may carry leading batch dimensions.

    ``z_per_unit`` is the camera-frame depth gained per unit of travel along
    ``direction``, used to convert between ray distance and camera depth.
    """

    origin: np.ndarray
    direction: np.ndarray
    pixel: np.ndarray
    z_per_unit: np.ndarray


def backproject_ray(pixel, intrinsics: Intrinsics, pose) -> Ray:
    """Unit-direction ray(s) through continuous pixel coordinates (..., 2)."""
    if not isinstance(pixel, torch.Tensor):
        pixel = np.asarray(pixel, dtype=np.float64)
    xp = _xp(pixel)
    x = (pixel[..., 0] - intrinsics.cx) / intrinsics.fx
    y = (pixel[..., 1] - intrinsics.cy) / intrinsics.fy
    d_cam = xp.stack([x, y, xp.ones_like(x)], -1)
    norm = (d_cam ** 2).sum(-1) ** 0.5
    d_cam = d_cam / norm[..., None]
    R, t = pose[:3, :3], pose[:3, 3]
    if xp is torch:
        R = torch.as_tensor(R, dtype=pixel.dtype, device=pixel.device)
        t = torch.as_tensor(t, dtype=pixel.dtype, device=pixel.device)
    direction = d_cam @ R.T
    origin = xp.zeros_like(direction) + t
    return Ray(origin=origin, direction=direction, pixel=pixel, z_per_unit=d_cam[..., 2])


def pixel_centers(intrinsics: Intrinsics) -> np.ndarray:
    """(H, W, 2) continuous coordinates of every pixel centre."""
    j, i = np.meshgrid(np.arange(intrinsics.width), np.arange(intrinsics.height))
    return np.stack([j + 0.5, i + 0.5], -1).astype(np.float64)


@dataclass(frozen=True)
class FrustumBounds:
    """Depth range plus lateral half-extents of the frustum at unit depth.

    ``x_scale``/``y_scale`` are tan of the half field of view per axis; the
    lateral NDC coordinate is (x / z) / scale.
    """

    z_near: float = 3.0
    z_far: float = 50.0
    x_scale: float = 1.0
    y_scale: float = 0.3

    def __post_init__(self):
        if not (0 < self.z_near < self.z_far):
            raise ValueError("need 0 < z_near < z_far")
        if self.x_scale <= 0 or self.y_scale <= 0:
            raise ValueError("lateral scales must be positive")

    @classmethod
    def for_intrinsics(cls, intrinsics: Intrinsics, z_near: float = 3.0, z_far: float = 50.0):
        return cls(z_near, z_far,
                   x_scale=intrinsics.width / 2 / intrinsics.fx,
                   y_scale=intrinsics.height / 2 / intrinsics.fy)


def ndc_normalize(point_cam, bounds: FrustumBounds, principal=(0.0, 0.0)):
    """Map camera-frame points (..., 3) to [-1, 1]^3.

    z is linear in inverse depth (z_near -> -1, z_far -> +1); x and y are
    frustum-relative. ``principal`` is the (x/z, y/z) of the frustum centre.
    Returns ``(ndc, clamped)`` where ``clamped`` flags points that had to be
    clipped back into the cube.
    """
    xp = _xp(point_cam)
    z = point_cam[..., 2]
    zc = z.clip(bounds.z_near, bounds.z_far) if xp is np else z.clamp(bounds.z_near, bounds.z_far)
    inv_n, inv_f = 1.0 / bounds.z_near, 1.0 / bounds.z_far
    nz = 2.0 * (inv_n - 1.0 / zc) / (inv_n - inv_f) - 1.0
    nx = (point_cam[..., 0] / zc - principal[0]) / bounds.x_scale
    ny = (point_cam[..., 1] / zc - principal[1]) / bounds.y_scale
    ndc = xp.stack([nx, ny, nz], -1)
    clamped = (z < bounds.z_near) | (z > bounds.z_far) | (abs(nx) > 1) | (abs(ny) > 1)
    ndc = ndc.clip(-1.0, 1.0) if xp is np else ndc.clamp(-1.0, 1.0)
    return ndc, clamped


def principal_offset(intrinsics: Intrinsics):
    """Frustum centre in (x/z, y/z) for an image whose principal point is off-centre."""
    return ((intrinsics.width / 2 - intrinsics.cx) / intrinsics.fx,
            (intrinsics.height / 2 - intrinsics.cy) / intrinsics.fy)


def positional_encoding(ndc, n_freq: int = 6):
    """[x, sin(2^j pi x), cos(2^j pi x) for j < n_freq] along the last axis."""
    xp = _xp(ndc)
    parts = [ndc]
    for j in range(n_freq):
        w = (2.0 ** j) * math.pi
        parts.append(xp.sin(w * ndc))
        parts.append(xp.cos(w * ndc))
    if xp is torch:
        return torch.cat(parts, -1)
    return np.concatenate(parts, -1)


def encoding_width(n_freq: int) -> int:
    return 3 + 6 * n_freq
