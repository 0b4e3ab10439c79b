"""Noise schedules, denoiser backends, and the attention tap they expose.

The view enhancer drives any backend through two hooks: predict_noise(x, t,
control) and a count of self-attention blocks. The control object switches
those blocks between plain attention, recording their input tokens, and
attending over injected token sets from other frames (inflated attention).
Two backends ship: an exact zero-noise identity (for invariance tests and a
do-nothing enhancer) and a small trainable U-Net.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class NoiseSchedule:
    """Variance schedule; alpha_bar[t] is the signal fraction kept after t
    noising steps, with alpha_bar[0] = 1."""

    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def abar(self, t: int) -> float:
        return float(self.alpha_bar[t])

    @classmethod
    def linear_for_steps(cls, n_steps: int = 25, final_alpha_bar: float = 1e-2) -> "NoiseSchedule":
        """Linearly increasing betas scaled (by bisection) so that the final
        signal fraction hits final_alpha_bar."""
        if not 0.0 < final_alpha_bar < 1.0:
            raise ValueError("final_alpha_bar must be in (0, 1)")
        profile = np.linspace(1.0, 20.0, n_steps)

        def final(scale: float) -> float:
            return float(np.prod(1.0 - scale * profile))

        lo, hi = 0.0, (1.0 - 1e-9) / profile.max()
        if final(hi) > final_alpha_bar:
            raise ValueError("final_alpha_bar unreachable for this step count")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if final(mid) > final_alpha_bar:
                lo = mid
            else:
                hi = mid
        scale = 0.5 * (lo + hi)
        return cls(betas=scale * profile)


class AttnControl:
    """Shared mutable state steering every attention block in a backend.

    mode: "plain" computes ordinary self-attention; "record" additionally
    stores each block's input tokens under (block_id, step); "inject" makes a
    block attend over externally supplied token sets instead of (only) its
    own input; "replace" substitutes the block's output tokens wholesale.
    Setting record_outputs captures each block's (possibly inflated)
    attention output under the same key, whatever the mode.
    """

    MODES = ("plain", "record", "inject", "replace")

    def __init__(self, mode: str = "plain", record_outputs: bool = False):
        if mode not in self.MODES:
            raise ValueError(f"unknown attention mode {mode!r}")
        self.mode = mode
        self.step: int = 0
        self.record_outputs = record_outputs
        self.records: dict[tuple[int, int], torch.Tensor] = {}
        self.outputs: dict[tuple[int, int], torch.Tensor] = {}
        self.injected: dict[tuple[int, int], list[torch.Tensor]] = {}
        self.replaced: dict[tuple[int, int], torch.Tensor] = {}

    def kv_sets(self, block_id: int, own_tokens: torch.Tensor) -> list[torch.Tensor]:
        if self.mode == "inject":
            sets = self.injected.get((block_id, self.step))
            if sets:
                return sets
        return [own_tokens]

    def replacement(self, block_id: int) -> torch.Tensor | None:
        if self.mode == "replace":
            return self.replaced.get((block_id, self.step))
        return None

    def maybe_record(self, block_id: int, tokens: torch.Tensor) -> None:
        if self.mode == "record":
            self.records[(block_id, self.step)] = tokens.detach().clone()

    def maybe_record_output(self, block_id: int, tokens: torch.Tensor) -> None:
        if self.record_outputs:
            self.outputs[(block_id, self.step)] = tokens.detach().clone()


def inflated_self_attention(
    q_tokens: torch.Tensor,
    kv_sets: list[torch.Tensor],
    wq: nn.Linear,
    wk: nn.Linear,
    wv: nn.Linear,
    wo: nn.Linear | None = None,
) -> torch.Tensor:
    """Queries from one frame attend over the concatenated keys/values of a
    frame set; a single set reduces to standard self-attention."""
    kv = torch.cat(kv_sets, dim=0)
    q = wq(q_tokens)
    k = wk(kv)
    v = wv(kv)
    att = torch.softmax(q @ k.T / math.sqrt(q.shape[-1]), dim=-1)
    out = att @ v
    if wo is not None:
        out = wo(out)
    return out


class SelfAttentionBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.wq = nn.Linear(channels, channels)
        self.wk = nn.Linear(channels, channels)
        self.wv = nn.Linear(channels, channels)
        self.wo = nn.Linear(channels, channels)

    def forward(self, h: torch.Tensor, control: AttnControl, block_id: int) -> torch.Tensor:
        b, c, hh, ww = h.shape
        tokens = self.norm(h)[0].permute(1, 2, 0).reshape(hh * ww, c)
        control.maybe_record(block_id, tokens)
        out = control.replacement(block_id)
        if out is None:
            kv = control.kv_sets(block_id, tokens)
            out = inflated_self_attention(tokens, kv, self.wq, self.wk, self.wv, self.wo)
        else:
            if out.shape != tokens.shape:
                raise ValueError(
                    f"replacement tokens for block {block_id} have shape "
                    f"{tuple(out.shape)}, expected {tuple(tokens.shape)}"
                )
            out = out.to(tokens.dtype)
        control.maybe_record_output(block_id, out)
        return h + out.reshape(hh, ww, c).permute(2, 0, 1).unsqueeze(0)


def time_embedding(t: int, dim: int, n_steps: int) -> torch.Tensor:
    """Sinusoidal embedding of a (1-based) step index."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half))
    ang = t / n_steps * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)])


class CondResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.tproj = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.tproj(t_emb)[None, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserBackend:
    """Interface consumed by the enhancer."""

    channels: int = 3
    n_attn_blocks: int = 0

    def predict_noise(self, x: torch.Tensor, t: int, control: AttnControl) -> torch.Tensor:
        raise NotImplementedError


class IdentityBackend(DenoiserBackend):
    """Predicts zero noise everywhere but still exposes one attention tap, so
    recording and injection paths can be exercised without changing outputs."""

    n_attn_blocks = 1

    def predict_noise(self, x: torch.Tensor, t: int, control: AttnControl) -> torch.Tensor:
        tokens = x[0].permute(1, 2, 0).reshape(-1, x.shape[1])
        control.maybe_record(0, tokens)
        # pass-through tap: the "attention output" is the input itself
        control.maybe_record_output(0, tokens)
        return torch.zeros_like(x)


class ToyDenoiser(nn.Module, DenoiserBackend):
    """Small noise-prediction U-Net with three attention taps (two encoder
    scales and one decoder scale)."""

    n_attn_blocks = 3

    def __init__(self, n_steps: int = 25, base: int = 32, t_dim: int = 64):
        super().__init__()
        self.n_steps = n_steps
        self.t_dim = t_dim
        c1, c2, c3 = base, base * 2, base * 3
        self.t_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.stem = nn.Conv2d(3, c1, 3, padding=1)
        self.enc0 = CondResBlock(c1, c1, t_dim)
        self.down1 = nn.Conv2d(c1, c2, 4, stride=2, padding=1)
        self.enc1 = CondResBlock(c2, c2, t_dim)
        self.attn_a = SelfAttentionBlock(c2)
        self.down2 = nn.Conv2d(c2, c3, 4, stride=2, padding=1)
        self.enc2 = CondResBlock(c3, c3, t_dim)
        self.attn_b = SelfAttentionBlock(c3)
        self.mid = CondResBlock(c3, c3, t_dim)
        self.up1 = nn.Conv2d(c3, c2, 3, padding=1)
        self.dec1 = CondResBlock(c2 + c2, c2, t_dim)
        self.attn_c = SelfAttentionBlock(c2)
        self.up2 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec0 = CondResBlock(c1 + c1, c1, t_dim)
        self.out_norm = nn.GroupNorm(8, c1)
        self.out = nn.Conv2d(c1, 3, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, t: int, control: AttnControl | None = None) -> torch.Tensor:
        control = control or AttnControl()
        t_emb = self.t_mlp(time_embedding(t, self.t_dim, self.n_steps).to(x.dtype))
        h0 = self.enc0(self.stem(x), t_emb)
        h1 = self.enc1(self.down1(h0), t_emb)
        h1 = self.attn_a(h1, control, 0)
        h2 = self.enc2(self.down2(h1), t_emb)
        h2 = self.attn_b(h2, control, 1)
        m = self.mid(h2, t_emb)
        u1 = self.up1(F.interpolate(m, scale_factor=2, mode="nearest"))
        u1 = self.dec1(torch.cat([u1, h1], dim=1), t_emb)
        u1 = self.attn_c(u1, control, 2)
        u0 = self.up2(F.interpolate(u1, scale_factor=2, mode="nearest"))
        u0 = self.dec0(torch.cat([u0, h0], dim=1), t_emb)
        return self.out(F.silu(self.out_norm(u0)))

    def predict_noise(self, x: torch.Tensor, t: int, control: AttnControl) -> torch.Tensor:
        p = next(self.parameters())
        out = self.forward(x.to(p.dtype), t, control)
        return out.to(x.dtype)


def train_toy_denoiser(
    model: ToyDenoiser,
    images: np.ndarray,
    schedule: NoiseSchedule,
    steps: int = 400,
    lr: float = 2e-4,
    seed: int = 0,
    grad_penalty: float = 0.1,
) -> list[float]:
    """Standard noise-prediction training on (V, H, W, 3) images in [0, 1].

    Images are mapped to [-1, 1] inside, matching the enhancer's convention.
    grad_penalty regularizes the predictor's input Jacobian (stochastic
    squared JVP); without it the net memorizes the tiny training set with
    huge local slopes and the deterministic inversion stops converging.
    """
    from .substrate import make_adam

    rng = np.random.default_rng(seed)
    data = torch.as_tensor(images, dtype=torch.float32).permute(0, 3, 1, 2) * 2.0 - 1.0
    opt = make_adam(model.parameters(), lr=lr)
    history = []
    for _ in range(steps):
        idx = int(rng.integers(0, data.shape[0]))
        t = int(rng.integers(1, schedule.n_steps + 1))
        x0 = data[idx : idx + 1]
        eps = torch.as_tensor(
            rng.standard_normal(x0.shape), dtype=torch.float32
        )
        ab = schedule.abar(t)
        x_t = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
        if grad_penalty > 0:
            x_t = x_t.requires_grad_(True)
        pred = model(x_t, t)
        loss = F.mse_loss(pred, eps)
        history.append(float(loss.detach()))
        if grad_penalty > 0:
            v = torch.randn_like(x_t)
            jtv = torch.autograd.grad((pred * v).sum(), x_t, create_graph=True)[0]
            loss = loss + grad_penalty * (jtv ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return history
