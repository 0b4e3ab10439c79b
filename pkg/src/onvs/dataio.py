"""Synthetic desk-scale scenes and dataset persistence.

Scenes are small collections of analytic solids with Lambertian shading,
traced exactly at pixel centers. The tracer returns camera-space depth, which
doubles as the geometry oracle for warping and reliability tests. Datasets are
stored as a directory: JSON metadata, a camera text file, one float32 array
archive with exact pixel data, and 8-bit PNG previews.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DataError
from .geometry import Camera, cameras_at, fibonacci_dome, load_cameras, orbit_positions, save_cameras
from .substrate import load_arrays, save_arrays

DATASET_FORMAT = 1


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: str = "flat"  # flat | checker | waves
    color: tuple = (0.8, 0.8, 0.8)
    color2: tuple = (0.1, 0.1, 0.1)
    scale: float = 0.3


@dataclass
class SceneSpec:
    spheres: list[Sphere]
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.4, 0.25, 0.88]))
    ambient: float = 0.35
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)


def _albedo(sphere: Sphere, pts: np.ndarray) -> np.ndarray:
    if sphere.albedo == "flat":
        return np.broadcast_to(np.asarray(sphere.color, dtype=np.float64), pts.shape).copy()
    if sphere.albedo == "checker":
        cells = np.floor(pts / sphere.scale).sum(axis=-1).astype(np.int64)
        even = (cells % 2 == 0)[..., None]
        c1 = np.asarray(sphere.color, dtype=np.float64)
        c2 = np.asarray(sphere.color2, dtype=np.float64)
        return np.where(even, c1, c2)
    if sphere.albedo == "waves":
        k = 2.0 * np.pi / max(sphere.scale, 1e-6)
        c1 = np.asarray(sphere.color, dtype=np.float64)
        c2 = np.asarray(sphere.color2, dtype=np.float64)
        phase = np.stack(
            [
                np.sin(k * pts[..., 0]) * np.sin(k * pts[..., 1] + 0.7),
                np.sin(k * pts[..., 1] + 1.3) * np.sin(k * pts[..., 2]),
                np.sin(k * (pts[..., 0] + pts[..., 2])),
            ],
            axis=-1,
        )
        mix = 0.5 * (1.0 + phase)
        return c1 * mix + c2 * (1.0 - mix)
    raise ValueError(f"unknown albedo kind {sphere.albedo!r}")


def _intersect_sphere(o, d, sphere: Sphere):
    """Smallest positive t with o + t*d on the sphere, inf when missed."""
    oc = o - sphere.center
    a = np.sum(d * d, axis=-1)
    b = 2.0 * np.sum(d * oc, axis=-1)
    c = np.sum(oc * oc, axis=-1) - sphere.radius**2
    disc = b * b - 4.0 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2.0 * a)
    t1 = (-b + sq) / (2.0 * a)
    t = np.where(t0 > 1e-9, t0, t1)
    t = np.where(hit & (t > 1e-9), t, np.inf)
    return t


def trace(camera: Camera, scene: SceneSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render (rgb, depth, mask) at pixel centers.

    depth is camera-space z of the hit (0 where nothing is hit); the ray
    parameter already equals camera z by the direction convention.
    """
    from .geometry import camera_rays, pixel_centers

    uv = pixel_centers(camera.height, camera.width)
    o, d = camera_rays(camera, uv)
    best_t = np.full(uv.shape[:2], np.inf)
    best_idx = np.full(uv.shape[:2], -1)
    for i, sph in enumerate(scene.spheres):
        t = _intersect_sphere(o, d, sph)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_idx = np.where(closer, i, best_idx)

    mask = best_idx >= 0
    rgb = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), uv.shape[:2] + (3,)).copy()
    depth = np.where(mask, best_t, 0.0)
    for i, sph in enumerate(scene.spheres):
        sel = best_idx == i
        if not sel.any():
            continue
        pts = o[sel] + best_t[sel][:, None] * d[sel]
        normal = (pts - sph.center) / sph.radius
        lam = np.clip(normal @ scene.light_dir, 0.0, None)
        shade = scene.ambient + (1.0 - scene.ambient) * lam
        rgb[sel] = np.clip(_albedo(sph, pts) * shade[:, None], 0.0, 1.0)
    return rgb.astype(np.float32), depth.astype(np.float32), mask


def demo_scene() -> SceneSpec:
    """Checkered main sphere plus two flat satellites; the training scene."""
    return SceneSpec(
        spheres=[
            Sphere(np.array([0.0, 0.0, 0.45]), 0.45, "checker",
                   (0.92, 0.28, 0.2), (0.95, 0.85, 0.3), scale=0.22),
            Sphere(np.array([0.55, 0.35, 0.22]), 0.22, "flat", (0.2, 0.45, 0.9)),
            Sphere(np.array([-0.5, 0.4, 0.18]), 0.18, "flat", (0.3, 0.8, 0.35)),
        ]
    )


def waves_scene() -> SceneSpec:
    """One large sphere with smooth sinusoidal albedo; used where warping
    consistency needs a texture without hard edges."""
    return SceneSpec(
        spheres=[
            Sphere(np.array([0.0, 0.0, 0.4]), 0.5, "waves",
                   (0.85, 0.55, 0.3), (0.15, 0.3, 0.6), scale=1.1),
        ],
        ambient=0.45,
    )


SCENES = {"demo": demo_scene, "waves": waves_scene}

SCENE_CENTER = np.array([0.0, 0.0, 0.3])
DOME_RADIUS = 3.0
NEAR = 1.5
FAR = 4.5


@dataclass
class Dataset:
    name: str
    scene: str
    layout: str
    cameras: list[Camera]
    images: np.ndarray  # (V, H, W, 3) float32
    depths: np.ndarray  # (V, H, W) float32, camera z, 0 where empty
    masks: np.ndarray  # (V, H, W) bool
    near: float
    far: float
    center: np.ndarray
    reference: int = 0

    def __len__(self) -> int:
        return len(self.cameras)


def _intrinsics(width: int, height: int) -> Camera:
    # ~53 degree horizontal fov at the dome radius keeps the scene in frame
    f = width * 1.0
    return Camera(fx=f, fy=f, cx=width / 2, cy=height / 2, width=width, height=height)


def make_dataset(
    scene: str = "demo",
    layout: str = "dome",
    n_views: int = 40,
    width: int = 64,
    height: int = 64,
    elevation_deg: float = 35.0,
    name: str | None = None,
) -> Dataset:
    if scene not in SCENES:
        raise DataError("scene-unknown", f"unknown scene {scene!r}, have {sorted(SCENES)}")
    spec = SCENES[scene]()
    intr = _intrinsics(width, height)
    if layout == "dome":
        positions = fibonacci_dome(n_views, DOME_RADIUS, SCENE_CENTER)
    elif layout == "orbit":
        positions = orbit_positions(n_views, DOME_RADIUS, elevation_deg, SCENE_CENTER)
    else:
        raise DataError("layout-unknown", f"unknown layout {layout!r}")
    cams = cameras_at(positions, SCENE_CENTER, intr)
    images = np.empty((n_views, height, width, 3), dtype=np.float32)
    depths = np.empty((n_views, height, width), dtype=np.float32)
    masks = np.empty((n_views, height, width), dtype=bool)
    for i, cam in enumerate(cams):
        images[i], depths[i], masks[i] = trace(cam, spec)
    return Dataset(
        name=name or f"{scene}-{layout}{n_views}",
        scene=scene,
        layout=layout,
        cameras=cams,
        images=images,
        depths=depths,
        masks=masks,
        near=NEAR,
        far=FAR,
        center=SCENE_CENTER.copy(),
    )


def save_dataset(root, ds: Dataset) -> None:
    from pathlib import Path

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": DATASET_FORMAT,
        "name": ds.name,
        "scene": ds.scene,
        "layout": ds.layout,
        "views": len(ds),
        "width": ds.cameras[0].width,
        "height": ds.cameras[0].height,
        "near": ds.near,
        "far": ds.far,
        "center": [float(x) for x in ds.center],
        "reference": ds.reference,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    save_cameras(root / "cameras.txt", ds.cameras)
    save_arrays(
        root / "arrays.prm",
        {"images": ds.images, "depths": ds.depths, "masks": ds.masks.astype(np.int32)},
    )
    preview = root / "preview"
    preview.mkdir(exist_ok=True)
    for i in range(len(ds)):
        img = (np.clip(ds.images[i], 0.0, 1.0) * 255.0).round().astype(np.uint8)
        Image.fromarray(img).save(preview / f"view_{i:03d}.png")


def load_dataset(root) -> Dataset:
    from pathlib import Path

    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DataError("dataset-missing", f"no dataset at {root} (meta.json absent)")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError("dataset-meta", f"unreadable meta.json in {root}: {e}") from e
    if meta.get("format") != DATASET_FORMAT:
        raise DataError(
            "dataset-format", f"dataset format {meta.get('format')!r} unsupported"
        )
    cams = load_cameras(root / "cameras.txt")
    try:
        arrays, _ = load_arrays(root / "arrays.prm")
    except FileNotFoundError as e:
        raise DataError("dataset-arrays", f"array archive missing in {root}") from e
    for key in ("images", "depths", "masks"):
        if key not in arrays:
            raise DataError("dataset-incomplete", f"array '{key}' missing in {root}")
    v = meta["views"]
    if arrays["images"].shape[0] != v or len(cams) != v:
        raise DataError("dataset-incomplete", f"view count mismatch in {root}")
    return Dataset(
        name=meta["name"],
        scene=meta["scene"],
        layout=meta["layout"],
        cameras=cams,
        images=arrays["images"].astype(np.float32),
        depths=arrays["depths"].astype(np.float32),
        masks=arrays["masks"].astype(bool),
        near=float(meta["near"]),
        far=float(meta["far"]),
        center=np.array(meta["center"]),
        reference=int(meta.get("reference", 0)),
    )


def scene_field(scene: SceneSpec, sharpness: float = 400.0):
    """Torch density/color field matching a traced scene, for renderer tests.

    Density is a steep logistic shell inside each sphere; color is the shaded
    surface color of the nearest sphere evaluated at the query point.
    """
    import torch

    centers = torch.tensor(np.stack([s.center for s in scene.spheres]), dtype=torch.float64)
    radii = torch.tensor([s.radius for s in scene.spheres], dtype=torch.float64)

    def field(pts: "torch.Tensor", dirs: "torch.Tensor"):
        d = torch.linalg.norm(pts[:, None, :] - centers[None], dim=-1) - radii[None]
        inside = torch.sigmoid(-sharpness * d)
        sigma = 1e3 * inside.amax(dim=-1)
        nearest = d.argmin(dim=-1)
        pts_np = pts.detach().cpu().numpy()
        rgb_np = np.zeros((pts.shape[0], 3))
        for i, sph in enumerate(scene.spheres):
            sel = (nearest == i).cpu().numpy()
            if not sel.any():
                continue
            p = pts_np[sel]
            normal = (p - sph.center) / np.maximum(
                np.linalg.norm(p - sph.center, axis=-1, keepdims=True), 1e-9
            )
            lam = np.clip(normal @ scene.light_dir, 0.0, None)
            shade = scene.ambient + (1.0 - scene.ambient) * lam
            rgb_np[sel] = np.clip(_albedo(sph, p) * shade[:, None], 0.0, 1.0)
        return {"sigma": sigma, "rgb": torch.as_tensor(rgb_np, dtype=pts.dtype)}

    return field
