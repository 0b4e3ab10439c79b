"""Ray batch construction and depth-sample placement.

All sampled depths are camera-space z values (see geometry ray convention).
Batches are numpy float64; the renderer converts to torch at the field
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, camera_rays, pixel_centers


@dataclass
class RayBatch:
    """A set of rays plus enough metadata to put results back into an image.

    grid_shape is (rows, cols) when the batch tiles a rectangular grid in
    row-major order (full image, low-res grid, or patch); offset is the
    (row, col) of the top-left pixel for patch batches.
    """

    origins: np.ndarray
    dirs: np.ndarray
    uv: np.ndarray
    grid_shape: tuple[int, int] | None = None
    offset: tuple[int, int] = (0, 0)
    pixel_ij: np.ndarray | None = None

    def __len__(self) -> int:
        return self.origins.shape[0]


def _batch_from_uv(camera: Camera, uv: np.ndarray, **kw) -> RayBatch:
    o, d = camera_rays(camera, uv)
    return RayBatch(origins=o.reshape(-1, 3), dirs=d.reshape(-1, 3), uv=uv.reshape(-1, 2), **kw)


def sample_full(camera: Camera) -> RayBatch:
    """One ray per pixel, row-major."""
    uv = pixel_centers(camera.height, camera.width)
    ij = np.stack(np.mgrid[0 : camera.height, 0 : camera.width], axis=-1).reshape(-1, 2)
    return _batch_from_uv(
        camera, uv, grid_shape=(camera.height, camera.width), pixel_ij=ij
    )


def sample_pixelwise(camera: Camera, n: int, rng: np.random.Generator) -> RayBatch:
    """n distinct random pixels."""
    total = camera.height * camera.width
    if n > total:
        raise ValueError(f"asked for {n} pixels out of {total}")
    flat = rng.choice(total, size=n, replace=False)
    i = flat // camera.width
    j = flat % camera.width
    uv = np.stack([j + 0.5, i + 0.5], axis=-1).astype(np.float64)
    return _batch_from_uv(camera, uv, pixel_ij=np.stack([i, j], axis=-1))


def sample_grid(camera: Camera, grid_h: int, grid_w: int) -> RayBatch:
    """One ray through the center of each cell of a grid_h x grid_w partition
    of the image plane, row-major. Cell centers are continuous image coords."""
    if grid_h > camera.height or grid_w > camera.width:
        raise ValueError("grid finer than the pixel grid")
    gi, gj = np.mgrid[0:grid_h, 0:grid_w].astype(np.float64)
    u = (gj + 0.5) * camera.width / grid_w
    v = (gi + 0.5) * camera.height / grid_h
    uv = np.stack([u, v], axis=-1)
    return _batch_from_uv(camera, uv, grid_shape=(grid_h, grid_w))


def sample_patch(
    camera: Camera, patch_h: int, patch_w: int, rng: np.random.Generator
) -> RayBatch:
    """A random axis-aligned patch_h x patch_w pixel block."""
    if patch_h > camera.height or patch_w > camera.width:
        raise ValueError("patch larger than the image")
    i0 = int(rng.integers(0, camera.height - patch_h + 1))
    j0 = int(rng.integers(0, camera.width - patch_w + 1))
    uv = pixel_centers(camera.height, camera.width)[i0 : i0 + patch_h, j0 : j0 + patch_w]
    ij = np.stack(np.mgrid[i0 : i0 + patch_h, j0 : j0 + patch_w], axis=-1).reshape(-1, 2)
    return _batch_from_uv(
        camera, uv, grid_shape=(patch_h, patch_w), offset=(i0, j0), pixel_ij=ij
    )


def stratified_depths(
    n_rays: int,
    n_samples: int,
    near: float,
    far: float,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """(n_rays, n_samples) depths, one uniform draw per equal-width stratum.

    With rng=None every ray gets the deterministic stratum midpoints.
    """
    if far <= near:
        raise ValueError("far must exceed near")
    edges = np.linspace(near, far, n_samples + 1)
    lo = edges[:-1]
    width = (far - near) / n_samples
    if rng is None:
        z = np.broadcast_to(lo + 0.5 * width, (n_rays, n_samples)).copy()
    else:
        z = lo + width * rng.random((n_rays, n_samples))
    return z


def fine_depths(
    coarse_z: np.ndarray,
    weights: np.ndarray,
    n_fine: int,
    near: float,
    far: float,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Importance-sample n_fine extra depths per ray by inverting the CDF of a
    piecewise-constant PDF whose bins are the coarse strata.

    Bin mass is the composite weight of the coarse sample inside the bin, plus
    a small floor so empty regions keep nonzero probability.
    """
    n_rays, n_coarse = coarse_z.shape
    edges = np.linspace(near, far, n_coarse + 1)
    mass = np.asarray(weights, dtype=np.float64) + 1e-5
    cdf = np.concatenate(
        [np.zeros((n_rays, 1)), np.cumsum(mass, axis=-1)], axis=-1
    )
    cdf = cdf / cdf[:, -1:]
    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (n_rays, n_fine)).copy()
    else:
        u = (np.arange(n_fine) + rng.random((n_rays, n_fine))) / n_fine
    z = np.empty((n_rays, n_fine))
    for r in range(n_rays):
        idx = np.clip(np.searchsorted(cdf[r], u[r], side="right") - 1, 0, n_coarse - 1)
        c0 = cdf[r, idx]
        c1 = cdf[r, idx + 1]
        frac = (u[r] - c0) / np.maximum(c1 - c0, 1e-12)
        z[r] = edges[idx] + frac * (edges[idx + 1] - edges[idx])
    return z


def merge_depths(coarse_z: np.ndarray, fine_z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Depth-sort the union of coarse and fine samples per ray.

    Returns (merged_z, order) where order indexes into the concatenation
    [coarse, fine] along the sample axis, so field outputs already computed at
    coarse points can be merged without re-querying.
    """
    both = np.concatenate([coarse_z, fine_z], axis=-1)
    order = np.argsort(both, axis=-1, kind="stable")
    merged = np.take_along_axis(both, order, axis=-1)
    assert np.all(np.diff(merged, axis=-1) >= 0)
    return merged, order
