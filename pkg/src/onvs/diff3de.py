"""Multi-view consistent enhancement of rendered frames.

A rendered view is pulled into a denoiser's noise space by deterministic
inversion, then denoised again while every self-attention output is replaced
by a blend of tokens propagated from nearby keyframe views. Keyframes are
prepared once per scene: each is inverted (caching its attention-input
activations for correspondence), then denoised jointly with its nearest
keyframes through inflated attention, caching the resulting attention
outputs per (keyframe, step, block). All diffusion arithmetic runs in
float64; the whole path is deterministic, so identical inputs give
bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .denoise_backend import AttnControl, DenoiserBackend, NoiseSchedule
from .errors import DivergenceError
from .geometry import barycentric_weights, select_neighbors
from .substrate import load_arrays, save_arrays


def to_latent(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) image in [0, 1] -> (1, 3, H, W) float64 latent in [-1, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    t = torch.from_numpy(img * 2.0 - 1.0)
    return t.permute(2, 0, 1).unsqueeze(0).contiguous()


def from_latent(latent: torch.Tensor) -> np.ndarray:
    """Inverse of to_latent, clipped back to [0, 1] float32."""
    img = latent.detach()[0].permute(1, 2, 0).cpu().numpy()
    return np.clip((img + 1.0) * 0.5, 0.0, 1.0).astype(np.float32)


def _check_finite(x: torch.Tensor, what: str, t: int) -> None:
    if not torch.isfinite(x).all():
        raise DivergenceError(f"{what} produced non-finite values at step {t}")


def ddim_invert(
    backend: DenoiserBackend,
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    control: AttnControl | None = None,
    refine_iters: int = 3,
) -> list[torch.Tensor]:
    """Deterministically map a clean latent to the noise end of the schedule.

    Each step solves x_t = (a_t/a_{t-1}) (x_{t-1} - b_{t-1} eps(x_t)) + b_t
    eps(x_t)  (a = sqrt(abar), b = sqrt(1 - abar)) by fixed point, starting
    from the usual approximation eps(x_{t-1}). refine_iters=0 keeps that
    approximation. Returns the whole trajectory [x_0, ..., x_T].
    """
    control = control or AttnControl()
    traj = [x0]
    x = x0
    for t in range(1, schedule.n_steps + 1):
        a_t = schedule.abar(t) ** 0.5
        b_t = (1.0 - schedule.abar(t)) ** 0.5
        a_p = schedule.abar(t - 1) ** 0.5
        b_p = (1.0 - schedule.abar(t - 1)) ** 0.5
        control.step = t
        eps = backend.predict_noise(x, t, control)
        x_t = (a_t / a_p) * (x - b_p * eps) + b_t * eps
        for _ in range(refine_iters):
            eps = backend.predict_noise(x_t, t, control)
            x_t = (a_t / a_p) * (x - b_p * eps) + b_t * eps
        _check_finite(x_t, "inversion", t)
        traj.append(x_t)
        x = x_t
    return traj


def ddim_sample(
    backend: DenoiserBackend,
    schedule: NoiseSchedule,
    x_t: torch.Tensor,
    control: AttnControl | None = None,
) -> torch.Tensor:
    """Deterministic (eta = 0) denoising from the noise end back to a clean
    latent."""
    control = control or AttnControl()
    x = x_t
    for t in range(schedule.n_steps, 0, -1):
        a_t = schedule.abar(t) ** 0.5
        b_t = (1.0 - schedule.abar(t)) ** 0.5
        a_p = schedule.abar(t - 1) ** 0.5
        b_p = (1.0 - schedule.abar(t - 1)) ** 0.5
        control.step = t
        eps = backend.predict_noise(x, t, control)
        x0_hat = (x - b_t * eps) / a_t
        x = a_p * x0_hat + b_p * eps
        _check_finite(x, "sampling", t)
    return x


def _ddim_step_back(schedule: NoiseSchedule, x: torch.Tensor, eps: torch.Tensor, t: int) -> torch.Tensor:
    a_t = schedule.abar(t) ** 0.5
    b_t = (1.0 - schedule.abar(t)) ** 0.5
    a_p = schedule.abar(t - 1) ** 0.5
    b_p = (1.0 - schedule.abar(t - 1)) ** 0.5
    x0_hat = (x - b_t * eps) / a_t
    return a_p * x0_hat + b_p * eps


@dataclass
class KeyframeSet:
    """Per-keyframe token caches for view enhancement.

    inv_features[i][(block, step)] holds the attention-input activations
    recorded while inverting keyframe i (the correspondence signal);
    phi[i][(block, step)] holds the attention outputs from the joint
    neighbor-aware denoising pass (the tokens that get propagated).
    """

    locations: np.ndarray
    center: np.ndarray
    n_steps: int
    n_blocks: int
    inv_features: list[dict] = field(default_factory=list)
    phi: list[dict] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.locations)

    @property
    def n_entries(self) -> int:
        return sum(len(d) for d in self.phi)


def build_keyframes(
    backend: DenoiserBackend,
    schedule: NoiseSchedule,
    frames: list[np.ndarray],
    locations: np.ndarray,
    center,
    refine_iters: int = 3,
) -> KeyframeSet:
    """Invert every keyframe, then denoise them jointly with inflated
    attention over each keyframe's 3 nearest keyframes (itself included),
    caching attention outputs per (keyframe, step, block)."""
    locations = np.asarray(locations, dtype=np.float64)
    if len(frames) != len(locations):
        raise ValueError(f"{len(frames)} frames but {len(locations)} locations")
    if len(frames) < 3:
        raise ValueError("need at least 3 keyframes")
    n_blocks = backend.n_attn_blocks
    ks = KeyframeSet(
        locations=locations,
        center=np.asarray(center, dtype=np.float64),
        n_steps=schedule.n_steps,
        n_blocks=n_blocks,
    )

    latents = []
    for img in frames:
        rec = AttnControl("record")
        traj = ddim_invert(backend, schedule, to_latent(img), control=rec, refine_iters=refine_iters)
        ks.inv_features.append({k: v for k, v in rec.records.items()})
        ks.phi.append({})
        latents.append(traj[-1])

    neighbor_sets = [
        select_neighbors(locations, locations[i], center, k=min(3, len(frames)))
        for i in range(len(frames))
    ]

    for t in range(schedule.n_steps, 0, -1):
        # pass 1: record everyone's attention-input tokens at this step
        step_records = []
        for x in latents:
            rec = AttnControl("record")
            rec.step = t
            backend.predict_noise(x, t, rec)
            step_records.append(rec.records)
        # pass 2: denoise with keys/values inflated over each neighbor set
        next_latents = []
        for i, x in enumerate(latents):
            ctl = AttnControl("inject", record_outputs=True)
            ctl.step = t
            for b in range(n_blocks):
                ctl.injected[(b, t)] = [step_records[n][(b, t)] for n in neighbor_sets[i]]
            eps = backend.predict_noise(x, t, ctl)
            ks.phi[i].update(ctl.outputs)
            x_prev = _ddim_step_back(schedule, x, eps, t)
            _check_finite(x_prev, f"keyframe {i} denoising", t)
            next_latents.append(x_prev)
        latents = next_latents
    return ks


def propagate_tokens(
    target_features: torch.Tensor,
    keyframes: KeyframeSet,
    kf_index: int,
    step: int,
    block: int,
) -> torch.Tensor:
    """Carry a keyframe's cached attention-output tokens over to the target's
    token grid.

    Each target position takes the cached output at the keyframe position
    whose inversion features are most cosine-similar to its own; exact ties
    on a shared grid keep the same spatial index.
    """
    key = (block, step)
    try:
        kf_feats = keyframes.inv_features[kf_index][key]
        phi = keyframes.phi[kf_index][key]
    except (IndexError, KeyError):
        raise ValueError(f"no cached tokens for keyframe {kf_index}, block {block}, step {step}")
    if target_features.shape[1] != kf_feats.shape[1]:
        raise ValueError(
            f"feature width mismatch: target {target_features.shape[1]} vs "
            f"keyframe {kf_feats.shape[1]}"
        )
    tf = target_features.to(torch.float64)
    kf = kf_feats.to(torch.float64)
    tf = tf / tf.norm(dim=1, keepdim=True).clamp_min(1e-12)
    kf = kf / kf.norm(dim=1, keepdim=True).clamp_min(1e-12)
    sim = tf @ kf.T
    if sim.shape[0] == sim.shape[1]:
        # nudge ties toward the identity match
        sim = sim + 1e-9 * torch.eye(sim.shape[0], dtype=sim.dtype)
    idx = sim.argmax(dim=1)
    return phi[idx]


@dataclass
class EnhanceResult:
    image: np.ndarray
    neighbor_ids: np.ndarray
    weights: np.ndarray


def enhance_view(
    backend: DenoiserBackend,
    schedule: NoiseSchedule,
    frame: np.ndarray,
    location,
    keyframes: KeyframeSet,
    refine_iters: int = 3,
) -> EnhanceResult:
    """Re-denoise one rendered view with its attention outputs replaced by a
    barycentric blend of tokens propagated from the 3 nearest keyframes."""
    if keyframes.count < 3:
        raise ValueError("keyframe set must hold at least 3 views")
    if keyframes.n_blocks != backend.n_attn_blocks:
        raise ValueError(
            f"keyframes were built for {keyframes.n_blocks} attention blocks, "
            f"backend has {backend.n_attn_blocks}"
        )
    location = np.asarray(location, dtype=np.float64)
    rec = AttnControl("record")
    traj = ddim_invert(backend, schedule, to_latent(frame), control=rec, refine_iters=refine_iters)

    neigh = select_neighbors(keyframes.locations, location, keyframes.center, k=3)
    w = barycentric_weights(location, keyframes.locations[neigh], keyframes.center)

    rep = AttnControl("replace")
    for (b, t), feats in rec.records.items():
        blended = None
        for j, kf_idx in enumerate(neigh):
            prop = propagate_tokens(feats, keyframes, int(kf_idx), t, b).to(torch.float64)
            blended = w[j] * prop if blended is None else blended + w[j] * prop
        rep.replaced[(b, t)] = blended

    out = ddim_sample(backend, schedule, traj[-1], control=rep)
    return EnhanceResult(image=from_latent(out), neighbor_ids=neigh, weights=w)


def save_keyframes(path, ks: KeyframeSet) -> None:
    arrays = {"locations": ks.locations, "center": ks.center}
    for i in range(ks.count):
        for (b, t), v in ks.inv_features[i].items():
            arrays[f"inv.{i}.{b}.{t}"] = v.cpu().numpy()
        for (b, t), v in ks.phi[i].items():
            arrays[f"phi.{i}.{b}.{t}"] = v.cpu().numpy()
    save_arrays(
        path,
        arrays,
        extra={"count": ks.count, "n_steps": ks.n_steps, "n_blocks": ks.n_blocks},
    )


def load_keyframes(path) -> KeyframeSet:
    arrays, extra = load_arrays(path)
    count = int(extra["count"])
    ks = KeyframeSet(
        locations=arrays["locations"],
        center=arrays["center"],
        n_steps=int(extra["n_steps"]),
        n_blocks=int(extra["n_blocks"]),
        inv_features=[{} for _ in range(count)],
        phi=[{} for _ in range(count)],
    )
    for name, arr in arrays.items():
        if name in ("locations", "center"):
            continue
        kind, i, b, t = name.split(".")
        entry = torch.from_numpy(arr)
        if kind == "inv":
            ks.inv_features[int(i)][(int(b), int(t))] = entry
        elif kind == "phi":
            ks.phi[int(i)][(int(b), int(t))] = entry
    return ks


@dataclass
class EnhanceConfig:
    """Settings for the enhancement pass over a rendered sequence."""

    n_keyframes: int = 40
    steps: int = 25
    final_alpha_bar: float = 1e-2
    refine_iters: int = 3
    guidance_scale: float = 7.5  # only consulted by conditioned backends

    def __post_init__(self):
        if self.n_keyframes < 3:
            raise ValueError("n_keyframes must be at least 3")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.refine_iters < 0:
            raise ValueError("refine_iters must be non-negative")

    def make_schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear_for_steps(self.steps, self.final_alpha_bar)
