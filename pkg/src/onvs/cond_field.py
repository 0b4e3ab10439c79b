"""Image-conditioned radiance field with a shared-density confidence head.

One reference image conditions everything: a small conv encoder turns it into
a multi-scale feature pyramid, and every 3D query point fetches the features
under its reference-view projection. A shared MLP trunk predicts density plus
a hidden color vector; the visible color is a single affine-plus-sigmoid read
of that hidden vector, so the photometric head and the feature head march the
same geometry. The confidence branch scores each point by how well its depth
in the reference view agrees with a coarse surface-depth estimate and turns
that, together with view direction and the same reference features, into a
per-sample opacity-style confidence that is composited with the shared
density.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Camera

HIDDEN_WIDTH = 128
FEATURE_CHANNELS = 64
POINT_FREQS = 6
DIR_FREQS = 4
SIGMA_BIAS_INIT = -4.5


def positional_encoding(x: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """[x, sin(pi x), cos(pi x), sin(2 pi x), ...] along the last axis."""
    parts = [x]
    for k in range(n_freqs):
        f = math.pi * (2.0**k)
        parts.append(torch.sin(f * x))
        parts.append(torch.cos(f * x))
    return torch.cat(parts, dim=-1)


def pe_dim(d: int, n_freqs: int) -> int:
    return d * (1 + 2 * n_freqs)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = (
            nn.Conv2d(c_in, c_out, 1, stride=stride)
            if (c_in != c_out or stride != 1)
            else nn.Identity()
        )

    def forward(self, x):
        h = F.silu(self.conv1(x))
        h = self.conv2(h)
        return F.silu(h + self.skip(x))


class RefEncoder(nn.Module):
    """Reference image -> feature pyramid at 1/2, 1/4, 1/8 resolution."""

    def __init__(self, channels: int = FEATURE_CHANNELS):
        super().__init__()
        self.stem = nn.Conv2d(3, 32, 3, padding=1)
        self.down1 = ResBlock(32, channels, stride=2)
        self.down2 = ResBlock(channels, channels, stride=2)
        self.down3 = ResBlock(channels, channels, stride=2)

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        h = F.silu(self.stem(img))
        f1 = self.down1(h)
        f2 = self.down2(f1)
        f3 = self.down3(f2)
        return [f1, f2, f3]


def sample_image(feat: torch.Tensor, uv: torch.Tensor, width: int, height: int) -> torch.Tensor:
    """Bilinearly read a (1, C, h, w) map at full-resolution pixel coords.

    uv follows the pixel-center convention; fractional image position is
    uv / (width, height), which maps onto any pyramid level directly.
    """
    gx = 2.0 * uv[:, 0] / width - 1.0
    gy = 2.0 * uv[:, 1] / height - 1.0
    grid = torch.stack([gx, gy], dim=-1).reshape(1, 1, -1, 2).to(feat.dtype)
    out = F.grid_sample(feat, grid, mode="bilinear", align_corners=False, padding_mode="border")
    return out[0, :, 0, :].transpose(0, 1)  # (M, C)


class RefConditioner(nn.Module):
    """Projects query points into the reference view and gathers features."""

    def __init__(self, encoder: RefEncoder | None = None):
        super().__init__()
        self.encoder = encoder or RefEncoder()
        self.pyramid: list[torch.Tensor] | None = None
        self.camera: Camera | None = None
        self._rot = None
        self._tr = None

    @property
    def out_dim(self) -> int:
        return 3 * FEATURE_CHANNELS

    def set_reference(self, image: np.ndarray, camera: Camera) -> None:
        """Encode the reference image once; image is (H, W, 3) in [0, 1]."""
        p = next(self.encoder.parameters())
        img = torch.as_tensor(np.ascontiguousarray(image), dtype=p.dtype)
        img = img.permute(2, 0, 1).unsqueeze(0)
        self.pyramid = self.encoder(img)
        self.camera = camera
        self._rot = torch.as_tensor(camera.rotation, dtype=p.dtype)
        self._tr = torch.as_tensor(camera.translation, dtype=p.dtype)

    def project(self, pts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Reference-view pixel coords and camera depth of world points."""
        if self._rot is None:
            raise RuntimeError("set_reference was not called")
        pc = pts @ self._rot.T.to(pts.dtype) + self._tr.to(pts.dtype)
        z = pc[:, 2]
        safe = z.clamp_min(1e-6)
        u = self.camera.cx + self.camera.fx * pc[:, 0] / safe
        v = self.camera.cy + self.camera.fy * pc[:, 1] / safe
        return torch.stack([u, v], dim=-1), z

    def features_at(self, uv: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Gather pyramid features at reference pixel coords; zero where the
        point sat behind the camera (z <= 0)."""
        if self.pyramid is None:
            raise RuntimeError("set_reference was not called")
        cam = self.camera
        feats = [sample_image(level, uv, cam.width, cam.height) for level in self.pyramid]
        f = torch.cat(feats, dim=-1)
        return f * (z > 1e-6).to(f.dtype).unsqueeze(-1)

    def forward(self, pts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(features (M, 3C), uv (M, 2), z (M,)); features are zero behind
        the reference camera."""
        uv, z = self.project(pts)
        return self.features_at(uv, z), uv, z


class FieldTrunk(nn.Module):
    """Shared MLP over encoded position + reference features.

    Emits density, a hidden color vector, and the visible color, which is a
    single affine map of the hidden vector through a sigmoid.
    """

    def __init__(self, cond_dim: int, width: int = HIDDEN_WIDTH):
        super().__init__()
        in_dim = pe_dim(3, POINT_FREQS) + cond_dim
        self.layers = nn.Sequential(
            nn.Linear(in_dim, width), nn.SiLU(),
            nn.Linear(width, width), nn.SiLU(),
            nn.Linear(width, width), nn.SiLU(),
        )
        self.sigma_head = nn.Linear(width, 1)
        self.hidden_head = nn.Linear(width, width)
        self.rgb_head = nn.Linear(width, 3)
        # start nearly transparent. a dense init fails both ways: background
        # rays can drive density to zero everywhere before the object forms,
        # and the parallel decoder loss can do the reverse and saturate the
        # volume into opaque fog. from a near-empty start the decoder fits
        # the image through its own layers and leaves density to the ray loss
        nn.init.constant_(self.sigma_head.bias, SIGMA_BIAS_INIT)

    def forward(self, pts: torch.Tensor, cond: torch.Tensor):
        h = self.layers(torch.cat([positional_encoding(pts, POINT_FREQS), cond], dim=-1))
        sigma = F.softplus(self.sigma_head(h).squeeze(-1))
        hidden = F.silu(self.hidden_head(h))
        rgb = torch.sigmoid(self.rgb_head(hidden))
        return sigma, hidden, rgb


class CorfNet(nn.Module):
    """Per-sample confidence from (reliability, encoded view dir, features)."""

    def __init__(self, cond_dim: int, width: int = 64):
        super().__init__()
        in_dim = 1 + pe_dim(3, DIR_FREQS) + cond_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, width), nn.SiLU(),
            nn.Linear(width, width), nn.SiLU(),
            nn.Linear(width, 1),
        )

    def forward(self, rel: torch.Tensor, dirs_pe: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        x = torch.cat([rel.unsqueeze(-1), dirs_pe, cond], dim=-1)
        return torch.sigmoid(self.net(x).squeeze(-1))


def reliability(z: torch.Tensor, z_surface: torch.Tensor, sigma_r: float) -> torch.Tensor:
    """Gaussian agreement between a point's reference-view depth and the
    coarse surface depth under its projection; 1 on the surface estimate."""
    return torch.exp(-((z - z_surface) ** 2) / (2.0 * sigma_r**2))


class ConditionedField(nn.Module):
    """The full one-shot field: encoder + trunk + confidence branch."""

    def __init__(
        self, near: float, far: float, sigma_r: float | None = None,
        width: int = HIDDEN_WIDTH,
    ):
        super().__init__()
        self.width = width
        self.conditioner = RefConditioner()
        self.trunk = FieldTrunk(self.conditioner.out_dim, width=width)
        self.corf = CorfNet(self.conditioner.out_dim)
        self.near = near
        self.far = far
        self.sigma_r = sigma_r if sigma_r is not None else 0.1 * (far - near)
        self.ref_depth: torch.Tensor | None = None

    def set_reference(self, image: np.ndarray, camera: Camera) -> None:
        self.conditioner.set_reference(image, camera)

    def set_ref_depth(self, depth: torch.Tensor) -> None:
        """Install the coarse reference-view depth map (any resolution); it is
        resampled bilinearly at projected query points."""
        self.ref_depth = depth.detach().reshape(1, 1, *depth.shape[-2:])

    def surface_depth(self, uv: torch.Tensor) -> torch.Tensor:
        if self.ref_depth is None:
            raise RuntimeError("set_ref_depth was not called")
        cam = self.conditioner.camera
        return sample_image(self.ref_depth, uv, cam.width, cam.height).squeeze(-1)

    def field(self, channels: tuple[str, ...] = ("rgb",)):
        """A renderer-compatible field function emitting the asked channels.

        Density always comes from the shared trunk, so every emitted channel
        is composited with identical weights.
        """
        want_conf = "confidence" in channels

        def fn(pts: torch.Tensor, dirs: torch.Tensor) -> dict[str, torch.Tensor]:
            cond, uv, z_ref = self.conditioner(pts)
            sigma, hidden, rgb = self.trunk(pts, cond)
            out = {"sigma": sigma}
            if "rgb" in channels:
                out["rgb"] = rgb
            if "hidden" in channels:
                out["hidden"] = hidden
            if want_conf:
                z_s = self.surface_depth(uv)
                rel = reliability(z_ref, z_s, self.sigma_r)
                d = dirs / dirs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
                alpha = self.corf(rel, positional_encoding(d, DIR_FREQS), cond)
                out["confidence"] = alpha.unsqueeze(-1)
            return out

        return fn
