"""Image quality and cross-view consistency measures.

Everything operates on float arrays in [0, 1], shape (H, W) or (H, W, C).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

from .geometry import Camera

PSNR_CAP = 99.0


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images, capped at 99."""
    m = mse(a, b)
    if m < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / m)))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = (size - 1) / 2
    x = np.arange(size) - r
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k = k / k.sum()
    return np.outer(k, k)


def _ssim_single(x: np.ndarray, y: np.ndarray, k1: float, k2: float) -> float:
    kern = _gaussian_kernel()
    pad = 5

    def filt(im):
        return convolve(im, kern, mode="reflect")

    ux = filt(x)
    uy = filt(y)
    vx = filt(x * x) - ux * ux
    vy = filt(y * y) - uy * uy
    vxy = filt(x * y) - ux * uy
    c1 = k1 * k1
    c2 = k2 * k2
    num = (2 * ux * uy + c1) * (2 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    smap = num / den
    # border pixels lack full filter support; crop them like the reference
    # implementation does before averaging
    return float(smap[pad:-pad, pad:-pad].mean())


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with an 11x11 sigma-1.5 Gaussian window, unit
    data range, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if a.ndim == 2:
        return _ssim_single(a, b, k1, k2)
    return float(np.mean([_ssim_single(a[..., c], b[..., c], k1, k2) for c in range(a.shape[-1])]))


def bilinear_sample(img: np.ndarray, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample an image at continuous (u, v), texel (i, j) centered at
    (j+0.5, i+0.5). Returns (values, support) where support marks samples
    whose four neighbors all lie inside the image."""
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    x = uv[..., 0] - 0.5
    y = uv[..., 1] - 0.5
    j0 = np.floor(x).astype(np.int64)
    i0 = np.floor(y).astype(np.int64)
    support = (j0 >= 0) & (i0 >= 0) & (j0 + 1 <= w - 1) & (i0 + 1 <= h - 1)
    j0c = np.clip(j0, 0, w - 2)
    i0c = np.clip(i0, 0, h - 2)
    fx = (x - j0)[..., None]
    fy = (y - i0)[..., None]
    v00 = img[i0c, j0c]
    v01 = img[i0c, j0c + 1]
    v10 = img[i0c + 1, j0c]
    v11 = img[i0c + 1, j0c + 1]
    out = (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )
    if squeeze:
        out = out[..., 0]
    return out, support


@dataclass
class WarpResult:
    image: np.ndarray  # (H, W, C) src resampled onto dst pixels
    valid: np.ndarray  # (H, W) bool, where the warp is trustworthy


def warp_frame(
    src_img: np.ndarray,
    src_depth: np.ndarray,
    src_mask: np.ndarray,
    src_cam: Camera,
    dst_depth: np.ndarray,
    dst_mask: np.ndarray,
    dst_cam: Camera,
    depth_tol: float = 0.01,
) -> WarpResult:
    """Backward-warp the source frame onto the destination pixel grid.

    Each destination pixel is lifted with the destination depth, projected
    into the source view and sampled bilinearly. A pixel stays valid only if
    the source bilinear footprint is fully on surface and the resampled source
    depth agrees with the projected depth within a relative tolerance, which
    rejects occluded and silhouette-straddling pixels.
    """
    h, w = dst_depth.shape
    from .geometry import pixel_centers

    uv = pixel_centers(h, w)
    world = dst_cam.unproject(uv, dst_depth)
    uv_src, z_src = src_cam.project(world)
    img_s, sup = bilinear_sample(src_img, uv_src)
    depth_s, _ = bilinear_sample(src_depth, uv_src)
    mask_s, _ = bilinear_sample(src_mask.astype(np.float64), uv_src)
    valid = (
        dst_mask
        & sup
        & (z_src > 1e-6)
        & (mask_s > 0.999)
        & (np.abs(depth_s - z_src) <= depth_tol * np.abs(z_src))
    )
    return WarpResult(image=img_s, valid=valid)


@dataclass
class ConsistencyReport:
    pair_mse: list[float]
    valid_fraction: list[float]
    mean_mse: float


def pixel_mse_consistency(
    frames: np.ndarray,
    depths: np.ndarray,
    masks: np.ndarray,
    cams: list[Camera],
    depth_tol: float = 0.01,
) -> ConsistencyReport:
    """Mean squared photometric error between each frame and its predecessor
    warped onto it, averaged over mutually visible pixels, then over pairs."""
    pair_mse = []
    valid_frac = []
    for i in range(len(cams) - 1):
        res = warp_frame(
            frames[i], depths[i], masks[i], cams[i],
            depths[i + 1], masks[i + 1], cams[i + 1], depth_tol,
        )
        v = res.valid
        if not v.any():
            pair_mse.append(float("nan"))
            valid_frac.append(0.0)
            continue
        diff = res.image[v] - np.asarray(frames[i + 1], dtype=np.float64)[v]
        pair_mse.append(float(np.mean(diff**2)))
        valid_frac.append(float(v.mean()))
    clean = [m for m in pair_mse if np.isfinite(m)]
    mean = float(np.mean(clean)) if clean else float("nan")
    return ConsistencyReport(pair_mse, valid_frac, mean)


LAPLACE_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def sharpness(img: np.ndarray) -> float:
    """Mean absolute Laplacian response of the gray image; higher is sharper."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    lap = convolve(img, LAPLACE_KERNEL, mode="reflect")
    return float(np.abs(lap).mean())


def param_count(module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def timing_harness(fn, repeats: int = 3, warmup: int = 1) -> float:
    """Median wall-clock seconds of fn() over several runs."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
