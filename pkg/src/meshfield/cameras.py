"""Pinhole cameras and spherical camera sampling.

Convention (documented with a worked example in the README): camera space is
right-handed with the optical axis along -Z, +X to the right, +Y up in the
image. A pixel with continuous coordinates (px, py) maps to the camera-space
direction ((px - cx) / fx, -(py - cy) / fy, -1), normalized, then rotated to
world by the camera-to-world transform. Image row 0 is the top of the frame,
and render paths use pixel centers (i + 0.5, j + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = ["Camera", "CameraScope", "look_at", "sample_spherical_cameras",
           "pixel_rays", "spherical_position"]


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    camera_to_world: np.ndarray  # (4,4)
    width: int
    height: int

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64)
        if self.camera_to_world.shape != (4, 4):
            raise ValueError("camera_to_world must be 4x4")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.camera_to_world[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal")

    @property
    def position(self):
        return self.camera_to_world[:3, 3]

    @property
    def optical_axis(self):
        # camera looks along -Z in camera space
        return -self.camera_to_world[:3, 2]

    def ray_through(self, px, py):
        """World-space (origin, unit direction) for continuous pixel coords."""
        d_cam = np.array([(px - self.cx) / self.fx,
                          -(py - self.cy) / self.fy,
                          -1.0])
        d = self.camera_to_world[:3, :3] @ d_cam
        return self.position.copy(), d / np.linalg.norm(d)

    def scaled_to(self, width, height):
        """Same field of view at a different resolution."""
        sx = width / self.width
        sy = height / self.height
        return replace(self, fx=self.fx * sx, fy=self.fy * sy,
                       cx=self.cx * sx, cy=self.cy * sy,
                       width=width, height=height,
                       camera_to_world=self.camera_to_world.copy())


@dataclass
class CameraScope:
    """Spherical shell of viewpoints around the origin (degrees)."""

    radius: float = 2.5
    elevation_range: tuple = (0.0, 45.0)
    azimuth_range: tuple = (0.0, 315.0)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")


def spherical_position(radius, elevation_deg, azimuth_deg):
    """Point on the sphere; elevation measured from the xz-plane toward +y,
    azimuth about +y starting at +z."""
    el = np.deg2rad(elevation_deg)
    az = np.deg2rad(azimuth_deg)
    return radius * np.array([
        np.cos(el) * np.sin(az),
        np.sin(el),
        np.cos(el) * np.cos(az),
    ])


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    """Camera-to-world with -Z toward target. Falls back to the +x up-vector
    when the view direction is (anti)parallel to up (the poles)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(np.cross(fwd, up)) < 1e-8:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = -fwd
    c2w[:3, 3] = eye
    return c2w


def camera_at(eye, width=96, height=96, fov_deg=50.0, target=(0.0, 0.0, 0.0)):
    f = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_deg))
    return Camera(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                  camera_to_world=look_at(eye, target), width=width, height=height)


def sample_spherical_cameras(scope, step_deg, width=256, height=256, fov_deg=50.0):
    """Cameras at every (elevation, azimuth) lattice point of the scope at
    step_deg spacing, each looking at the origin. Count = n_elev * n_azim."""
    if step_deg <= 0:
        raise ValueError("step must be positive")

    def lattice(lo, hi):
        n = int(round((hi - lo) / step_deg)) + 1 if hi > lo else 1
        return [lo + i * step_deg for i in range(n)]

    cams = []
    for el in lattice(*scope.elevation_range):
        for az in lattice(*scope.azimuth_range):
            eye = spherical_position(scope.radius, el, az)
            cams.append(camera_at(eye, width=width, height=height, fov_deg=fov_deg))
    return cams


def pixel_rays(camera, width=None, height=None):
    """Rays through all pixel centers at the given (or native) resolution.
    Returns (origins (H*W,3), dirs (H*W,3)) in row-major pixel order."""
    cam = camera if width is None else camera.scaled_to(width, height)
    w, h = cam.width, cam.height
    px = (np.arange(w) + 0.5)
    py = (np.arange(h) + 0.5)
    gx, gy = np.meshgrid(px, py)  # row-major: gy varies by row
    d_cam = np.stack([
        (gx.ravel() - cam.cx) / cam.fx,
        -(gy.ravel() - cam.cy) / cam.fy,
        -np.ones(w * h),
    ], axis=1)
    d = d_cam @ cam.camera_to_world[:3, :3].T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(cam.position, d.shape).copy()
    return o, d
