"""Parallel training of the radiance field and a generative detail branch,
plus confidence-weighted fusion of the two rendered routes.

The field's hidden color vectors are composited at a coarse grid into a
feature image; a small upsampler decodes that into a full-resolution RGB
image (the generative route). The photometric route volume-renders RGB
directly. Fusion blends them per pixel with the confidence map: fused =
nerf * m + gan * (1 - m).

Three pipelines share one trainer:
  * two_stage_tandem: field first, then the decoder on frozen features,
  * one_stage_tandem: joint steps, but decoder gradients stop at the field,
  * one_stage_parallel: joint steps with gradients merging in the trunk.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cond_field import HIDDEN_WIDTH, ConditionedField
from .dataio import Dataset
from .errors import CheckpointError, DivergenceError
from .geometry import Camera
from .metrics import psnr
from .raysampling import RayBatch, sample_full, sample_grid, sample_patch, sample_pixelwise
from .substrate import SeedBank, load_arrays, make_adam, save_arrays
from .volume_render import render_rays, to_image


class Upsampler(nn.Module):
    """Feature image at grid resolution -> full-resolution RGB in [0, 1]."""

    def __init__(self, in_channels: int = HIDDEN_WIDTH, scale: int = 4, width: int = 48):
        super().__init__()
        if scale < 1 or scale & (scale - 1):
            raise ValueError("scale must be a power of two")
        self.scale = scale
        self.head = nn.Conv2d(in_channels, width, 3, padding=1)
        blocks = []
        for _ in range(int(math.log2(scale))):
            blocks.append(nn.Conv2d(width, width, 3, padding=1))
            blocks.append(nn.Conv2d(width, width, 3, padding=1))
        self.blocks = nn.ModuleList(blocks)
        self.tail = nn.Conv2d(width, 3, 3, padding=1)
        # start the output dark. against mostly-black targets the first steps
        # otherwise slam every logit negative, the sigmoid saturates, and the
        # decoder plateaus as a constant image that ignores its features
        nn.init.constant_(self.tail.bias, -3.5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.head(x))
        for i in range(0, len(self.blocks), 2):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            r = F.silu(self.blocks[i](h))
            h = F.silu(self.blocks[i + 1](r) + h)
        return torch.sigmoid(self.tail(h))


class Discriminator(nn.Module):
    def __init__(self, resolution: int = 64, width: int = 32):
        super().__init__()
        layers = []
        c_in = 3
        c = width
        res = resolution
        while res > 4:
            layers.append(nn.Conv2d(c_in, c, 4, stride=2, padding=1))
            layers.append(nn.LeakyReLU(0.2))
            c_in = c
            c = min(c * 2, 128)
            res //= 2
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(c_in * res * res, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv(x)
        return self.fc(h.flatten(1)).squeeze(-1)


class PerceptualNet(nn.Module):
    """Frozen random conv features used as a stand-in perceptual metric.

    Weights come from a fixed seed so the loss surface is identical across
    runs and checkpoints.
    """

    def __init__(self, seed: int = 714):
        super().__init__()
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(3, 16, 3, stride=2, padding=1),
                nn.Conv2d(16, 32, 3, stride=2, padding=1),
                nn.Conv2d(32, 64, 3, stride=2, padding=1),
            ]
        )
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.weight.shape[1] * 9
                std = math.sqrt(2.0 / fan_in)
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        h = x
        for conv in self.convs:
            h = F.silu(conv(h))
            out.append(h)
        return out


def perceptual_loss(net: PerceptualNet, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    fa = net.features(a)
    fb = net.features(b)
    return sum(F.mse_loss(x, y) for x, y in zip(fa, fb)) / len(fa)


def gan_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return F.softplus(-d_fake).mean()


def gan_d_loss(d_fake: torch.Tensor, d_real: torch.Tensor) -> torch.Tensor:
    return F.softplus(d_fake).mean() + F.softplus(-d_real).mean()


def r1_penalty(disc: Discriminator, real: torch.Tensor, gamma: float) -> torch.Tensor:
    real = real.detach().requires_grad_(True)
    out = disc(real)
    (grad,) = torch.autograd.grad(out.sum(), real, create_graph=True)
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(dim=1).mean()


def dpf_fuse(nerf: torch.Tensor, gan: torch.Tensor, conf: torch.Tensor) -> torch.Tensor:
    """Per-pixel blend: confidence picks the photometric route, its
    complement the generative one."""
    return nerf * conf + gan * (1.0 - conf)


class OppModel(nn.Module):
    """Field + decoder bundle with the rendering entry points."""

    def __init__(
        self,
        near: float,
        far: float,
        image_hw: tuple[int, int] = (64, 64),
        grid_hw: tuple[int, int] = (16, 16),
        sigma_r: float | None = None,
        hidden_width: int = HIDDEN_WIDTH,
    ):
        super().__init__()
        h, w = image_hw
        gh, gw = grid_hw
        if h % gh or w % gw or (h // gh) != (w // gw):
            raise ValueError("image size must be an equal power-of-two multiple of the grid")
        self.image_hw = image_hw
        self.grid_hw = grid_hw
        self.field = ConditionedField(near, far, sigma_r, width=hidden_width)
        self.upsampler = Upsampler(hidden_width, scale=h // gh)
        self._ref_image: np.ndarray | None = None
        self._ref_camera: Camera | None = None

    # -- reference handling -------------------------------------------------

    def set_reference(self, image: np.ndarray, camera: Camera) -> None:
        self._ref_image = np.asarray(image, dtype=np.float32)
        self._ref_camera = camera
        with torch.no_grad():
            self.field.set_reference(self._ref_image, camera)

    def encode_reference(self) -> None:
        """Re-encode the stored reference with gradients (one training step's
        graph); renders afterwards see the fresh feature pyramid."""
        self.field.set_reference(self._ref_image, self._ref_camera)

    @property
    def reference_camera(self) -> Camera:
        return self._ref_camera

    def overhead_modules(self) -> dict[str, nn.Module]:
        """The parts added on top of a plain image-conditioned field."""
        return {
            "color_read": self.field.trunk.rgb_head,
            "confidence": self.field.corf,
            "upsampler": self.upsampler,
        }

    # -- differentiable forwards -------------------------------------------

    def gan_forward(
        self, camera: Camera, n_coarse: int, n_fine: int, rng=None,
        detach_features: bool = False,
    ) -> torch.Tensor:
        """Grid-render hidden features and decode to a full image (1,3,H,W).

        detach_features cuts the gradient path into the field, so the decoder
        trains without feeding back into the trunk (the tandem pipelines).
        """
        gh, gw = self.grid_hw
        batch = sample_grid(camera, gh, gw)
        res = render_rays(
            self.field.field(("hidden",)), batch, self.field.near, self.field.far,
            n_coarse=n_coarse, n_fine=n_fine, rng=rng, chunk=1 << 62,
        )
        feat = to_image(res.channels["hidden"], batch).permute(2, 0, 1).unsqueeze(0)
        if detach_features:
            feat = feat.detach()
        return self.upsampler(feat)

    def nerf_forward(
        self, batch: RayBatch, n_coarse: int, n_fine: int, rng=None,
        channels: tuple[str, ...] = ("rgb",), chunk: int = 1 << 62,
    ):
        return render_rays(
            self.field.field(channels), batch, self.field.near, self.field.far,
            n_coarse=n_coarse, n_fine=n_fine, rng=rng, chunk=chunk,
        )

    # -- inference renders (numpy out) --------------------------------------

    @torch.no_grad()
    def render_gan_image(self, camera: Camera, n_coarse: int = 64, n_fine: int = 96) -> np.ndarray:
        img = self.gan_forward(camera, n_coarse, n_fine)
        return img[0].permute(1, 2, 0).numpy().astype(np.float32)

    def ensure_ref_depth(self, resolution: int = 16, n_coarse: int = 64) -> None:
        """Make sure the confidence branch has a reference-view depth map,
        rendering a coarse one if none was installed yet."""
        if self.field.ref_depth is None:
            self.field.set_ref_depth(self.coarse_reference_depth(resolution, n_coarse))

    @torch.no_grad()
    def render_nerf_image(
        self, camera: Camera, n_coarse: int = 64, n_fine: int = 96,
        with_confidence: bool = False, chunk: int = 2048,
    ):
        batch = sample_full(camera)
        if with_confidence:
            self.ensure_ref_depth()
        channels = ("rgb", "confidence") if with_confidence else ("rgb",)
        res = self.nerf_forward(batch, n_coarse, n_fine, channels=channels, chunk=chunk)
        rgb = to_image(res.channels["rgb"], batch).numpy().astype(np.float32)
        if not with_confidence:
            return rgb
        conf = to_image(res.channels["confidence"], batch).numpy().astype(np.float32)
        return rgb, conf[..., 0]

    @torch.no_grad()
    def render_confidence_fast(self, camera: Camera, n_coarse: int = 64, n_fine: int = 96) -> np.ndarray:
        """Confidence composited at grid resolution, resized to full size."""
        self.ensure_ref_depth()
        gh, gw = self.grid_hw
        batch = sample_grid(camera, gh, gw)
        res = self.nerf_forward(batch, n_coarse, n_fine, channels=("confidence",))
        m = to_image(res.channels["confidence"], batch).permute(2, 0, 1).unsqueeze(0)
        m = F.interpolate(m, size=self.image_hw, mode="bilinear", align_corners=False)
        return m[0, 0].numpy().astype(np.float32)

    @torch.no_grad()
    def render_fast(self, camera: Camera, n_coarse: int = 64, n_fine: int = 96):
        """Decoder image plus confidence map from a single grid render.

        This is the cheap inference path: one ray per grid cell, decoded to
        full size; the confidence map is composited per cell and resized.
        """
        self.ensure_ref_depth()
        gh, gw = self.grid_hw
        batch = sample_grid(camera, gh, gw)
        res = self.nerf_forward(batch, n_coarse, n_fine, channels=("hidden", "confidence"))
        feat = to_image(res.channels["hidden"], batch).permute(2, 0, 1).unsqueeze(0)
        img = self.upsampler(feat)[0].permute(1, 2, 0).numpy().astype(np.float32)
        m = to_image(res.channels["confidence"], batch).permute(2, 0, 1).unsqueeze(0)
        m = F.interpolate(m, size=self.image_hw, mode="bilinear", align_corners=False)
        return img, m[0, 0].numpy().astype(np.float32)

    @torch.no_grad()
    def render_branches(self, camera: Camera, n_coarse: int = 64, n_fine: int = 96) -> dict:
        """All outputs for one view: photometric, generative, confidence,
        the fused image, plus depth and opacity for warping checks."""
        self.ensure_ref_depth()
        batch = sample_full(camera)
        res = self.nerf_forward(
            batch, n_coarse, n_fine, channels=("rgb", "confidence"), chunk=2048
        )
        nerf = to_image(res.channels["rgb"], batch).numpy().astype(np.float32)
        conf = to_image(res.channels["confidence"], batch).numpy().astype(np.float32)[..., 0]
        depth = to_image(res.depth, batch).numpy().astype(np.float32)
        opacity = to_image(res.opacity, batch).numpy().astype(np.float32)
        gan = self.render_gan_image(camera, n_coarse, n_fine)
        fused = dpf_fuse(
            torch.as_tensor(nerf), torch.as_tensor(gan), torch.as_tensor(conf).unsqueeze(-1)
        ).numpy()
        return {
            "nerf": nerf, "gan": gan, "confidence": conf, "fused": fused,
            "depth": depth, "opacity": opacity,
        }

    @torch.no_grad()
    def coarse_reference_depth(self, resolution: int = 16, n_coarse: int = 64) -> torch.Tensor:
        """Low-resolution depth of the reference view from the field itself."""
        batch = sample_grid(self._ref_camera, resolution, resolution)
        res = self.nerf_forward(batch, n_coarse, 0, channels=())
        return to_image(res.depth, batch)


PIPELINES = ("two_stage_tandem", "one_stage_tandem", "one_stage_parallel")


@dataclass
class TrainConfig:
    pipeline: str = "one_stage_parallel"
    steps: int = 1500
    stage1_steps: int = 750  # two_stage_tandem only
    lr: float = 1e-3
    lambda_gan: float = 1e-3
    lambda_per: float = 1e-2
    r1_gamma: float = 10.0
    rays_per_step: int = 256
    sampling: str = "pixelwise"  # pixelwise | patch
    patch: int = 16
    train_coarse: int = 32
    train_fine: int = 32
    seed: int = 0
    log_every: int = 50
    divergence_limit: float = 1e3
    early_stop_psnr: float | None = None
    early_stop_every: int = 100

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"pipeline must be one of {PIPELINES}")
        if self.sampling not in ("pixelwise", "patch"):
            raise ValueError("sampling must be pixelwise or patch")


@dataclass
class TrainReport:
    steps_run: int
    history: dict[str, list[float]] = dc_field(default_factory=dict)
    wall_time: float = 0.0
    stopped_early: bool = False


class OppTrainer:
    def __init__(
        self, model: OppModel, dataset: Dataset, train_views: list[int], cfg: TrainConfig
    ):
        if dataset.reference not in train_views:
            raise ValueError("the reference view must be a training view")
        # transmittance under a formed surface drops into the subnormal float
        # range and x86 handles those in microcode, tripling step cost; warm
        # numpy's float info first so it does not warn about the flushed mode
        np.finfo(np.float32), np.finfo(np.float64)
        torch.set_flush_denormal(True)
        self.model = model
        self.ds = dataset
        self.views = list(train_views)
        self.cfg = cfg
        self.bank = SeedBank(cfg.seed)
        self.rng = self.bank.numpy_rng("trainer")
        self.disc = Discriminator(resolution=model.image_hw[0])
        self.percep = PerceptualNet()
        model.set_reference(dataset.images[dataset.reference], dataset.cameras[dataset.reference])
        self._build_optimizers(stage2=False)

    def _field_params(self):
        return [p for n, p in self.model.field.named_parameters() if not n.startswith("corf.")]

    def _build_optimizers(self, stage2: bool) -> None:
        if self.cfg.pipeline == "two_stage_tandem" and stage2:
            gen_params = list(self.model.upsampler.parameters())
        else:
            gen_params = self._field_params() + list(self.model.upsampler.parameters())
        self.g_opt = make_adam(gen_params, lr=self.cfg.lr)
        self.d_opt = make_adam(self.disc.parameters(), lr=self.cfg.lr)

    def _gt(self, view: int) -> torch.Tensor:
        return torch.as_tensor(self.ds.images[view])

    def _ray_batch(self, view: int) -> RayBatch:
        cam = self.ds.cameras[view]
        if self.cfg.sampling == "patch":
            return sample_patch(cam, self.cfg.patch, self.cfg.patch, self.rng)
        return sample_pixelwise(cam, self.cfg.rays_per_step, self.rng)

    def _gt_for_batch(self, view: int, batch: RayBatch) -> torch.Tensor:
        img = self.ds.images[view]
        ij = batch.pixel_ij
        return torch.as_tensor(img[ij[:, 0], ij[:, 1]])

    def _check_finite(self, value: float, what: str, step: int) -> None:
        if not np.isfinite(value) or abs(value) > self.cfg.divergence_limit:
            raise DivergenceError(f"{what} diverged at step {step}: {value}")

    def train(self) -> TrainReport:
        cfg = self.cfg
        report = TrainReport(steps_run=0, history={})
        t0 = time.perf_counter()
        stage2 = False
        for step in range(cfg.steps):
            if cfg.pipeline == "two_stage_tandem" and not stage2 and step >= cfg.stage1_steps:
                stage2 = True
                for p in self._field_params():
                    p.requires_grad_(False)
                self._build_optimizers(stage2=True)
            losses = self._step(step, stage2)
            report.steps_run = step + 1
            for k, v in losses.items():
                self._check_finite(v, k, step)
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                for k, v in losses.items():
                    report.history.setdefault(k, []).append(v)
            if (
                cfg.early_stop_psnr is not None
                and step > 0
                and step % cfg.early_stop_every == 0
                and self._quick_psnr() >= cfg.early_stop_psnr
            ):
                report.stopped_early = True
                break
        if cfg.pipeline == "two_stage_tandem":
            for p in self._field_params():
                p.requires_grad_(True)
        # the field moved, so any cached reference depth is stale
        self.model.field.ref_depth = None
        report.wall_time = time.perf_counter() - t0
        return report

    def _quick_psnr(self) -> float:
        view = self.views[0]
        img = self.model.render_nerf_image(
            self.ds.cameras[view], self.cfg.train_coarse, self.cfg.train_fine
        )
        return psnr(img, self.ds.images[view])

    def _gan_active(self, step: int, stage2: bool) -> bool:
        if self.cfg.pipeline == "two_stage_tandem":
            return stage2
        return True

    def _step(self, step: int, stage2: bool) -> dict[str, float]:
        cfg = self.cfg
        view = int(self.rng.choice(self.views))
        cam = self.ds.cameras[view]
        gt_img = self._gt(view).permute(2, 0, 1).unsqueeze(0)
        out: dict[str, float] = {}
        gan_on = self._gan_active(step, stage2)

        self.model.encode_reference()
        total = torch.zeros(())
        fake = None
        if not (cfg.pipeline == "two_stage_tandem" and stage2):
            batch = self._ray_batch(view)
            res = self.model.nerf_forward(batch, cfg.train_coarse, cfg.train_fine, rng=self.rng)
            l_nerf = F.mse_loss(res.channels["rgb"], self._gt_for_batch(view, batch))
            total = total + l_nerf
            out["l_nerf"] = float(l_nerf.detach())

        if gan_on:
            fake = self.model.gan_forward(
                cam, cfg.train_coarse, cfg.train_fine,
                detach_features=cfg.pipeline == "one_stage_tandem",
            )
            l_adv = gan_g_loss(self.disc(fake))
            l_per = perceptual_loss(self.percep, fake, gt_img)
            l_mse = F.mse_loss(fake, gt_img)
            l_gan = cfg.lambda_gan * l_adv + cfg.lambda_per * l_per + l_mse
            total = total + l_gan
            out["l_gan"] = float(l_gan.detach())

        self.g_opt.zero_grad()
        total.backward()
        self.g_opt.step()

        if gan_on:
            d_fake = self.disc(fake.detach())
            d_real = self.disc(gt_img)
            d_loss = gan_d_loss(d_fake, d_real) + r1_penalty(self.disc, gt_img, cfg.r1_gamma)
            self.d_opt.zero_grad()
            d_loss.backward()
            self.d_opt.step()
            out["l_d"] = float(d_loss.detach())
        return out

    # -- confidence finetuning ----------------------------------------------

    def finetune_corf(
        self,
        views: list[int] | None = None,
        steps: int = 150,
        lr: float = 1e-3,
        cache_samples: int = 24,
        render_coarse: int = 64,
        render_fine: int = 96,
    ) -> TrainReport:
        """Train the confidence branch against the fused output with the rest
        of the model frozen.

        Per view, everything except the confidence MLP itself is constant, so
        the shared-density weights, reliability inputs, and both branch images
        are computed once and cached.
        """
        model = self.model
        views = views if views is not None else self.views[: min(8, len(self.views))]
        with torch.no_grad():
            model.field.set_reference(model._ref_image, model._ref_camera)
            model.field.set_ref_depth(model.coarse_reference_depth())
        for p in model.parameters():
            p.requires_grad_(False)
        for p in model.field.corf.parameters():
            p.requires_grad_(True)

        from .cond_field import DIR_FREQS, positional_encoding, reliability

        caches = []
        h, w = model.image_hw
        with torch.no_grad():
            for v in views:
                cam = self.ds.cameras[v]
                batch = sample_full(cam)
                res = model.nerf_forward(batch, cache_samples, 0, channels=())
                o = torch.as_tensor(batch.origins, dtype=torch.float32)
                d = torch.as_tensor(batch.dirs, dtype=torch.float32)
                pts = (o.unsqueeze(1) + res.z.unsqueeze(-1) * d.unsqueeze(1)).reshape(-1, 3)
                uv, z_ref = model.field.conditioner.project(pts)
                rel = reliability(z_ref, model.field.surface_depth(uv), model.field.sigma_r)
                du = d / d.norm(dim=-1, keepdim=True)
                nerf = model.render_nerf_image(cam, render_coarse, render_fine)
                gan = model.render_gan_image(cam, render_coarse, render_fine)
                caches.append(
                    {
                        "w": res.weights,
                        "uv": uv,
                        "z_ref": z_ref,
                        "rel": rel,
                        "dirs_pe_ray": positional_encoding(du, DIR_FREQS),
                        "nerf": torch.as_tensor(nerf),
                        "gan": torch.as_tensor(gan),
                        "gt": self._gt(v),
                    }
                )
        opt = make_adam(model.field.corf.parameters(), lr=lr)
        report = TrainReport(steps_run=0, history={"l_corf": []})
        t0 = time.perf_counter()
        for step in range(steps):
            c = caches[step % len(caches)]
            cond = model.field.conditioner.features_at(c["uv"], c["z_ref"])
            dirs_pe = (
                c["dirs_pe_ray"].unsqueeze(1).expand(h * w, cache_samples, -1).reshape(
                    len(c["rel"]), -1
                )
            )
            alpha = model.field.corf(c["rel"], dirs_pe, cond).reshape(h * w, cache_samples)
            m = (c["w"] * alpha).sum(dim=-1).reshape(h, w, 1)
            fused = dpf_fuse(c["nerf"], c["gan"], m)
            fused_nchw = fused.permute(2, 0, 1).unsqueeze(0)
            gt_nchw = c["gt"].permute(2, 0, 1).unsqueeze(0)
            loss = F.mse_loss(fused, c["gt"]) + perceptual_loss(self.percep, fused_nchw, gt_nchw)
            opt.zero_grad()
            loss.backward()
            opt.step()
            lv = float(loss.detach())
            self._check_finite(lv, "l_corf", step)
            report.steps_run = step + 1
            if step % self.cfg.log_every == 0 or step == steps - 1:
                report.history["l_corf"].append(lv)
        for p in model.parameters():
            p.requires_grad_(True)
        report.wall_time = time.perf_counter() - t0
        return report


# -- persistence -------------------------------------------------------------


def save_model(path, model: OppModel, extra: dict | None = None) -> None:
    arrays = {f"model.{n}": p.detach().cpu().numpy() for n, p in model.named_parameters()}
    meta = {
        "near": model.field.near,
        "far": model.field.far,
        "sigma_r": model.field.sigma_r,
        "image_hw": list(model.image_hw),
        "grid_hw": list(model.grid_hw),
        "hidden_width": model.field.width,
    }
    if model._ref_image is not None:
        arrays["ref.image"] = model._ref_image
        arrays["ref.pose"] = model._ref_camera.pose
        cam = model._ref_camera
        meta["ref_intrinsics"] = [cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height]
    if extra:
        meta["extra"] = extra
    save_arrays(path, arrays, extra=meta)


def load_model(path) -> tuple[OppModel, dict]:
    arrays, meta = load_arrays(path)
    try:
        model = OppModel(
            near=meta["near"],
            far=meta["far"],
            image_hw=tuple(meta["image_hw"]),
            grid_hw=tuple(meta["grid_hw"]),
            sigma_r=meta["sigma_r"],
            hidden_width=int(meta.get("hidden_width", HIDDEN_WIDTH)),
        )
    except KeyError as e:
        raise CheckpointError(f"model archive missing metadata field {e}") from e
    own = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in own.items():
            key = f"model.{name}"
            if key not in arrays:
                raise CheckpointError(f"model archive missing parameter {name}")
            arr = arrays[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {name}")
            p.copy_(torch.from_numpy(arr))
    if "ref.image" in arrays:
        fx, fy, cx, cy, w, h = meta["ref_intrinsics"]
        cam = Camera(fx, fy, cx, cy, int(w), int(h), arrays["ref.pose"])
        model.set_reference(arrays["ref.image"], cam)
    return model, meta.get("extra", {})
