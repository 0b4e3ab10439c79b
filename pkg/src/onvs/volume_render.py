"""Differentiable volume rendering along depth-parameterized rays.

The compositor follows the usual emission-absorption quadrature: with depths
z_1 <= ... <= z_S and step delta_i = z_{i+1} - z_i (last step capped at the
far plane), per-step transmittance is exp(-sigma_i * delta_i), weights are
w_i = T_i * (1 - exp(-sigma_i * delta_i)) with T_i the running product of the
previous steps. Because T comes from a cumulative product of the same per-step
factors, sum(w) + T_final telescopes to 1 up to float rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .raysampling import RayBatch, fine_depths, merge_depths, stratified_depths

FieldFn = Callable[[torch.Tensor, torch.Tensor], dict[str, torch.Tensor]]


@dataclass
class Composite:
    channels: dict[str, torch.Tensor]  # name -> (N, C)
    depth: torch.Tensor  # (N,)
    opacity: torch.Tensor  # (N,)
    weights: torch.Tensor  # (N, S)
    trans_final: torch.Tensor  # (N,)


def composite(
    sigma: torch.Tensor,
    z: torch.Tensor,
    z_far: float,
    channels: dict[str, torch.Tensor],
    background: dict[str, torch.Tensor] | None = None,
) -> Composite:
    """Integrate per-sample quantities along each ray.

    sigma, z: (N, S); each channel: (N, S, C). Empty space past the last
    sample contributes the background color (default black) weighted by the
    leftover transmittance; depth gets the far plane there.
    """
    delta = torch.cat([z[:, 1:] - z[:, :-1], z_far - z[:, -1:]], dim=-1)
    step_trans = torch.exp(-sigma * delta)
    alpha = 1.0 - step_trans
    trans = torch.cumprod(step_trans, dim=-1)
    trans_excl = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=-1)
    weights = trans_excl * alpha
    trans_final = trans[:, -1]

    out = {}
    for name, ch in channels.items():
        acc = (weights.unsqueeze(-1) * ch).sum(dim=1)
        if background is not None and name in background:
            bg = background[name].to(acc)
            acc = acc + trans_final.unsqueeze(-1) * bg
        out[name] = acc
    depth = (weights * z).sum(dim=-1) + trans_final * z_far
    opacity = weights.sum(dim=-1)
    return Composite(out, depth, opacity, weights, trans_final)


@dataclass
class RenderResult:
    channels: dict[str, torch.Tensor]  # (N, C)
    depth: torch.Tensor  # (N,)
    opacity: torch.Tensor  # (N,)
    queries: int
    z: torch.Tensor | None = None  # (N, S) merged sample depths
    weights: torch.Tensor | None = None  # (N, S) composite weights


def _eval_field(field: FieldFn, pts: torch.Tensor, dirs: torch.Tensor):
    n, s, _ = pts.shape
    out = field(pts.reshape(-1, 3), dirs.unsqueeze(1).expand(n, s, 3).reshape(-1, 3))
    sigma = out["sigma"].reshape(n, s)
    chans = {k: v.reshape(n, s, -1) for k, v in out.items() if k != "sigma"}
    return sigma, chans


def render_rays(
    field: FieldFn,
    batch: RayBatch,
    near: float,
    far: float,
    n_coarse: int = 64,
    n_fine: int = 96,
    rng: np.random.Generator | None = None,
    dtype: torch.dtype = torch.float32,
    chunk: int = 4096,
    background: dict[str, torch.Tensor] | None = None,
) -> RenderResult:
    """Hierarchical two-pass render of a ray batch.

    The fine pass queries the field only at the newly drawn depths; coarse
    outputs are reused in the merged composite, so each ray costs exactly
    n_coarse + n_fine field queries.
    """
    origins = torch.as_tensor(batch.origins, dtype=dtype)
    dirs = torch.as_tensor(batch.dirs, dtype=dtype)
    n = len(batch)
    pieces: list[Composite] = []
    z_pieces: list[torch.Tensor] = []
    queries = 0
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        o = origins[lo:hi]
        d = dirs[lo:hi]
        z_c_np = stratified_depths(hi - lo, n_coarse, near, far, rng)
        z_c = torch.as_tensor(z_c_np, dtype=dtype)
        pts = o.unsqueeze(1) + z_c.unsqueeze(-1) * d.unsqueeze(1)
        sigma_c, chans_c = _eval_field(field, pts, d)
        queries += (hi - lo) * n_coarse
        if n_fine > 0:
            coarse = composite(sigma_c, z_c, far, {})
            z_f_np = fine_depths(
                z_c_np, coarse.weights.detach().cpu().numpy(), n_fine, near, far, rng
            )
            z_f = torch.as_tensor(z_f_np, dtype=dtype)
            pts_f = o.unsqueeze(1) + z_f.unsqueeze(-1) * d.unsqueeze(1)
            sigma_f, chans_f = _eval_field(field, pts_f, d)
            queries += (hi - lo) * n_fine
            merged_np, order_np = merge_depths(z_c_np, z_f_np)
            order = torch.as_tensor(order_np)
            z_m = torch.as_tensor(merged_np, dtype=dtype)
            sigma_m = torch.gather(torch.cat([sigma_c, sigma_f], dim=-1), 1, order)
            chans_m = {}
            for name in chans_c:
                both = torch.cat([chans_c[name], chans_f[name]], dim=1)
                idx = order.unsqueeze(-1).expand(-1, -1, both.shape[-1])
                chans_m[name] = torch.gather(both, 1, idx)
            pieces.append(composite(sigma_m, z_m, far, chans_m, background))
            z_pieces.append(z_m)
        else:
            pieces.append(composite(sigma_c, z_c, far, chans_c, background))
            z_pieces.append(z_c)

    channels = {
        k: torch.cat([p.channels[k] for p in pieces], dim=0) for k in pieces[0].channels
    }
    depth = torch.cat([p.depth for p in pieces], dim=0)
    opacity = torch.cat([p.opacity for p in pieces], dim=0)
    return RenderResult(
        channels, depth, opacity, queries,
        z=torch.cat(z_pieces, dim=0),
        weights=torch.cat([p.weights for p in pieces], dim=0),
    )


def to_image(values: torch.Tensor, batch: RayBatch) -> torch.Tensor:
    """Reshape per-ray results (N, C) or (N,) back to the batch's grid."""
    if batch.grid_shape is None:
        raise ValueError("batch does not tile a grid")
    h, w = batch.grid_shape
    if values.dim() == 1:
        return values.reshape(h, w)
    return values.reshape(h, w, -1)
