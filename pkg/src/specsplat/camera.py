"""Pinhole cameras. Pixel (x, y) = (column, row) with pixel centers at integer coordinates.

Depth maps throughout the package store the distance from the camera center
along the unit pixel ray, so ``p = R^T (D * r_d - t)`` holds with unit ``r_d``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PosedView:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # world-to-camera rotation
    t: np.ndarray  # world-to-camera translation
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-8) or np.linalg.det(R) < 0:
            raise ValueError("R must be a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_camera(self, p):
        return np.asarray(p) @ self.R.T + self.t

    def project(self, p):
        """World points -> (pixel xy, camera z)."""
        c = self.to_camera(p)
        z = c[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.fx * c[..., 0] / z + self.cx
            y = self.fy * c[..., 1] / z + self.cy
        return np.stack([x, y], axis=-1), z

    def camera_rays(self, xy=None):
        """Unit camera-space ray directions for pixel coordinates (default: full grid, (H, W, 3))."""
        if xy is None:
            ys, xs = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        else:
            xy = np.asarray(xy, dtype=np.float64)
            xs, ys = xy[..., 0], xy[..., 1]
        d = np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def world_rays(self, xy=None):
        return self.camera_rays(xy) @ self.R

    def in_bounds(self, xy):
        return (xy[..., 0] >= 0) & (xy[..., 0] <= self.width - 1) & (xy[..., 1] >= 0) & (xy[..., 1] <= self.height - 1)


def look_at(eye, target, up=(0.0, 0.0, 1.0), width=128, height=128, fov_deg=40.0) -> PosedView:
    """OpenCV-style camera (x right, y down, z forward) at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return PosedView(f, f, (width - 1) / 2, (height - 1) / 2, R, -R @ eye, width, height)


def orbit_views(count: int, radius: float, width: int, height: int, fov_deg: float = 40.0,
                elevations=(20.0, 45.0), target=(0.0, 0.0, 0.0)) -> list[PosedView]:
    """Cameras on rings around ``target``, alternating between the given elevations."""
    views = []
    for k in range(count):
        elev = np.radians(elevations[k % len(elevations)])
        azim = 2 * np.pi * k / count
        eye = np.asarray(target) + radius * np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)])
        views.append(look_at(eye, target, width=width, height=height, fov_deg=fov_deg))
    return views
