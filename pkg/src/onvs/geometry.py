"""Cameras, poses, and view-placement utilities.

Conventions, used everywhere downstream:
  * camera axes follow OpenCV: x right, y down, z forward (right-handed),
  * a pose is the 4x4 world-to-camera matrix,
  * pixel (i, j) = (row, col) has its center at (u, v) = (j + 0.5, i + 0.5),
  * projection: u = cx + fx * X/Z, v = cy + fy * Y/Z,
  * ray directions are scaled so their camera-z component is 1; the marching
    parameter t along such a ray equals camera-space depth Z directly.
  * world up is +z; view domes sit on the z >= 0 hemisphere.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {self.pose.shape}")
        if not np.allclose(self.pose[3], [0, 0, 0, 1], atol=1e-9):
            raise ValueError("pose bottom row must be [0, 0, 0, 1]")
        R = self.pose[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("pose rotation block is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.pose[:3, 3]

    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def cam_to_world(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.translation) @ self.rotation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points (..., 3) -> pixel coords (..., 2) and camera depth (...,)."""
        pc = self.world_to_cam(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.cx + self.fx * pc[..., 0] / z
            v = self.cy + self.fy * pc[..., 1] / z
        return np.stack([u, v], axis=-1), z

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel coords (..., 2) + camera depth (...,) -> world points (..., 3)."""
        uv = np.asarray(uv, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        x = (uv[..., 0] - self.cx) / self.fx * depth
        y = (uv[..., 1] - self.cy) / self.fy * depth
        pc = np.stack([x, y, depth], axis=-1)
        return self.cam_to_world(pc)

    def with_size(self, width: int, height: int) -> "Camera":
        """Same view scaled to a different pixel grid."""
        sx = width / self.width
        sy = height / self.height
        return Camera(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=self.cx * sx,
            cy=self.cy * sy,
            width=width,
            height=height,
            pose=self.pose.copy(),
        )


def pixel_centers(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of pixel-center (u, v) coordinates."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u + 0.5, v + 0.5], axis=-1)


def camera_rays(camera: Camera, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rays through given pixel coordinates.

    Returns (origins, dirs), both (..., 3) world-space. Directions are scaled
    so that the camera-z component is 1, hence point(t) = o + t * d sits at
    camera depth t.
    """
    uv = np.asarray(uv, dtype=np.float64)
    x = (uv[..., 0] - camera.cx) / camera.fx
    y = (uv[..., 1] - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    dirs = d_cam @ camera.rotation
    origins = np.broadcast_to(camera.center(), dirs.shape).copy()
    return origins, dirs


def look_at_pose(eye, target, up=WORLD_UP) -> np.ndarray:
    """World-to-camera pose for a camera at `eye` looking toward `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("eye and target coincide")
    z = z / nz
    x = np.cross(-up, z)
    nx = np.linalg.norm(x)
    if nx < 1e-8:
        # looking straight along up; pick an arbitrary stable right vector
        alt = np.array([1.0, 0.0, 0.0])
        if abs(z @ alt) > 0.9:
            alt = np.array([0.0, 1.0, 0.0])
        x = np.cross(alt, z)
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    pose = np.eye(4)
    pose[:3, :3] = R
    pose[:3, 3] = -R @ eye
    return pose


def fibonacci_dome(n: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """n roughly equidistributed points on the upper hemisphere (z > 0)."""
    center = np.asarray(center, dtype=np.float64)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    i = np.arange(n, dtype=np.float64)
    z = (i + 0.5) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = golden * i
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    return center + radius * pts


def orbit_positions(
    n: int, radius: float, elevation_deg: float, center=(0.0, 0.0, 0.0), start_deg: float = 0.0
) -> np.ndarray:
    """n positions on a circle at fixed elevation above `center`."""
    center = np.asarray(center, dtype=np.float64)
    el = math.radians(elevation_deg)
    az = np.radians(start_deg) + 2.0 * np.pi * np.arange(n) / n
    x = radius * math.cos(el) * np.cos(az)
    y = radius * math.cos(el) * np.sin(az)
    z = np.full(n, radius * math.sin(el))
    return center + np.stack([x, y, z], axis=-1)


def cameras_at(positions: np.ndarray, target, intrinsics: Camera) -> list[Camera]:
    """One camera per position, all looking at `target`, sharing intrinsics."""
    cams = []
    for p in np.asarray(positions, dtype=np.float64):
        cams.append(
            Camera(
                fx=intrinsics.fx,
                fy=intrinsics.fy,
                cx=intrinsics.cx,
                cy=intrinsics.cy,
                width=intrinsics.width,
                height=intrinsics.height,
                pose=look_at_pose(p, target),
            )
        )
    return cams


def select_neighbors(locations: np.ndarray, target: np.ndarray, center, k: int = 3) -> np.ndarray:
    """Pick the k view locations most aligned with the target location.

    Alignment is cosine similarity of center-relative positions. Ties resolve
    to the lower index (stable sort).
    """
    locations = np.asarray(locations, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if k > len(locations):
        raise ValueError(f"asked for {k} neighbors out of {len(locations)} locations")
    rel = locations - center
    rel = rel / np.maximum(np.linalg.norm(rel, axis=-1, keepdims=True), 1e-12)
    t = target - center
    t = t / max(np.linalg.norm(t), 1e-12)
    sims = rel @ t
    order = np.argsort(-sims, kind="stable")
    return order[:k]


def barycentric_weights(target: np.ndarray, corners: np.ndarray, center) -> np.ndarray:
    """Blend weights of a target location with respect to three corner locations.

    The center-relative target is projected onto the plane of the three
    center-relative corners; plain barycentric coordinates are computed there.
    Outside the triangle the weights are clamped to zero and renormalized.
    A degenerate (near-collinear) triangle falls back to inverse angular
    distance with a logged warning.
    """
    center = np.asarray(center, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64) - center
    v = np.asarray(corners, dtype=np.float64) - center
    if v.shape != (3, 3):
        raise ValueError("expected exactly three corner locations")
    e1 = v[1] - v[0]
    e2 = v[2] - v[0]
    g11 = e1 @ e1
    g12 = e1 @ e2
    g22 = e2 @ e2
    det = g11 * g22 - g12 * g12
    scale = max(g11, g22, 1e-30)
    if det <= 1e-12 * scale * scale:
        log.warning("degenerate neighbor triangle; falling back to angular-distance weights")
        tn = t / max(np.linalg.norm(t), 1e-12)
        vn = v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)
        ang = np.arccos(np.clip(vn @ tn, -1.0, 1.0))
        w = 1.0 / (ang + 1e-6)
        return w / w.sum()
    d = t - v[0]
    b1 = e1 @ d
    b2 = e2 @ d
    a = (g22 * b1 - g12 * b2) / det
    b = (g11 * b2 - g12 * b1) / det
    w = np.array([1.0 - a - b, a, b])
    w = np.clip(w, 0.0, None)
    s = w.sum()
    if s < 1e-12:
        # projected point opposite to the whole triangle
        log.warning("target projects outside neighbor triangle with no support; using uniform weights")
        return np.full(3, 1.0 / 3.0)
    return w / s


def save_cameras(path, cameras: list[Camera]) -> None:
    lines = [f"ONVS-CAMS 1 {len(cameras)}"]
    for cam in cameras:
        lines.append(
            f"{float(cam.fx)!r} {float(cam.fy)!r} {float(cam.cx)!r} {float(cam.cy)!r} "
            f"{cam.width} {cam.height}"
        )
        for row in cam.pose:
            lines.append(" ".join(repr(float(x)) for x in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cameras(path) -> list[Camera]:
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as e:
        raise DataError("cameras-missing", f"cannot read camera file {path}: {e}") from e
    if not lines or not lines[0].startswith("ONVS-CAMS 1 "):
        raise DataError("cameras-header", f"bad camera file header in {path}")
    count = int(lines[0].split()[2])
    if len(lines) != 1 + 5 * count:
        raise DataError("cameras-truncated", f"camera file {path} has wrong line count")
    cams = []
    for c in range(count):
        base = 1 + 5 * c
        fx, fy, cx, cy, w, h = lines[base].split()
        pose = np.array([[float(x) for x in lines[base + 1 + r].split()] for r in range(4)])
        try:
            cams.append(
                Camera(float(fx), float(fy), float(cx), float(cy), int(w), int(h), pose)
            )
        except ValueError as e:
            raise DataError("cameras-invalid", f"camera {c} in {path} invalid: {e}") from e
    return cams
