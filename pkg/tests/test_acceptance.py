"""End-to-end acceptance suite.

One test per criterion, each printing a single PASS/FAIL line with the
measured values. The slow system-level runs (toy training, efficiency
timing, the sweep harness) live here rather than in the unit modules.
"""

import sys
import time

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from onvs.cli import main
from onvs.cond_field import ConditionedField, CorfNet, pe_dim
from onvs.dataio import FAR, NEAR, make_dataset
from onvs.denoise_backend import (
    IdentityBackend,
    NoiseSchedule,
    ToyDenoiser,
    inflated_self_attention,
    train_toy_denoiser,
)
from onvs.diff3de import (
    build_keyframes,
    ddim_invert,
    ddim_sample,
    enhance_view,
    to_latent,
)
from onvs.geometry import barycentric_weights, orbit_positions
from onvs.metrics import param_count, pixel_mse_consistency, psnr, sharpness
from onvs.opp_train import (
    Discriminator,
    OppModel,
    OppTrainer,
    TrainConfig,
    Upsampler,
    dpf_fuse,
    save_model,
)
from onvs.raysampling import sample_full, sample_grid
from onvs.substrate import grad_check
from onvs.volume_render import render_rays


def report(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {num:02d} [{name}]: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    if sys.stdout is not sys.__stdout__:  # stay visible under pytest capture
        sys.__stdout__.write(line + "\n")
        sys.__stdout__.flush()
    assert ok, line


def smooth_image(h, w, phase):
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    r = 0.5 + 0.4 * np.sin(4.0 * xx + phase)
    g = 0.5 + 0.4 * np.cos(3.0 * yy + 2.0 * phase)
    b = 0.5 + 0.3 * np.sin(5.0 * (xx + yy) - phase)
    return np.stack([r, g, b], axis=-1).astype(np.float32)


def make_cam(w=8, h=8):
    from onvs.geometry import Camera

    return Camera(fx=float(w), fy=float(w), cx=w / 2, cy=h / 2, width=w, height=h,
                  pose=np.eye(4))


# -- 1: rendering oracle ----------------------------------------------------


def test_criterion_01_rendering_oracle():
    t0 = time.perf_counter()
    sigma_val, rgb = 1.2, [0.8, 0.5, 0.3]
    rgb_t = torch.tensor(rgb, dtype=torch.float64)

    def field(pts, dirs):
        m = pts.shape[0]
        return {
            "sigma": torch.full((m,), sigma_val, dtype=pts.dtype),
            "rgb": rgb_t.expand(m, 3).clone(),
        }

    b = sample_grid(make_cam(), 2, 2)
    expect = np.asarray(rgb) * (1.0 - np.exp(-sigma_val * 2.0))
    errs = {}
    for n_c, n_f in ((64, 96), (128, 192)):
        res = render_rays(field, b, near=0.5, far=2.5, n_coarse=n_c, n_fine=n_f,
                          rng=None, dtype=torch.float64)
        got = res.channels["rgb"].numpy()
        errs[n_c + n_f] = np.max(np.abs(got - expect) / expect)
    dt = time.perf_counter() - t0
    ok = errs[160] < 0.01 and errs[320] <= 0.55 * errs[160] and dt < 1.0
    report(1, "rendering oracle", ok,
           f"rel err 160: {errs[160]:.2e}, 320: {errs[320]:.2e}, {dt:.2f}s")


# -- 2: gradient suite ------------------------------------------------------


def test_criterion_02_gradient_suite():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    errs = {}

    ds = make_dataset("demo", "dome", n_views=2, width=16, height=16)
    field = ConditionedField(NEAR, FAR).double()
    ref_img = ds.images[0].astype(np.float64)
    field.set_ref_depth(torch.full((8, 8), 3.0, dtype=torch.float64))
    batch = sample_grid(ds.cameras[1], 2, 2)

    def render_loss():
        # re-encode inside the loss so encoder perturbations reach the output
        field.set_reference(ref_img, ds.cameras[0])
        res = render_rays(field.field(("rgb", "confidence")), batch, NEAR, FAR,
                          n_coarse=10, n_fine=0, rng=None, dtype=torch.float64)
        return res.channels["rgb"].sum() + res.channels["confidence"].sum()

    errs["field+composite"] = grad_check(render_loss, {
        "rgb_bias": field.trunk.rgb_head.bias,
        "sigma_bias": field.trunk.sigma_head.bias,
        "stem_bias": field.conditioner.encoder.stem.bias,
        "corf_bias": field.corf.net[-1].bias,
    }, eps=1e-5)

    up = Upsampler(in_channels=6, scale=2, width=8).double()
    x_up = torch.randn(1, 6, 4, 4, dtype=torch.float64)
    errs["upsampler"] = grad_check(
        lambda: up(x_up).sum(),
        {"head_bias": up.head.bias, "tail_bias": up.tail.bias}, eps=1e-5)

    disc = Discriminator(resolution=16, width=8).double()
    x_d = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    errs["discriminator"] = grad_check(
        lambda: disc(x_d).sum(),
        {"fc_bias": disc.fc.bias, "conv0_bias": disc.conv[0].bias}, eps=1e-5)

    corf = CorfNet(cond_dim=8, width=8).double()
    rel = torch.rand(5, dtype=torch.float64)
    dpe = torch.randn(5, pe_dim(3, 4), dtype=torch.float64)
    cond = torch.randn(5, 8, dtype=torch.float64)
    errs["corfnet"] = grad_check(
        lambda: corf(rel, dpe, cond).sum(),
        {"l0_bias": corf.net[0].bias, "l2_bias": corf.net[-1].bias}, eps=1e-5)

    dt = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and dt < 60.0
    report(2, "gradient suite", ok,
           "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
           + f", {dt:.1f}s")


# -- 3: fusion identities ---------------------------------------------------


def test_criterion_03_fusion_identities():
    torch.manual_seed(3)
    nerf = torch.rand(7, 9, 3)
    gan = torch.rand(7, 9, 3)
    exact_one = torch.equal(dpf_fuse(nerf, gan, torch.ones(7, 9, 1)), nerf)
    exact_zero = torch.equal(dpf_fuse(nerf, gan, torch.zeros(7, 9, 1)), gan)

    center = np.array([0.0, 0.0, 0.3])
    corners = orbit_positions(3, 2.5, 40.0, center=center)
    sums_ok, vertex_ok = True, True
    rng = np.random.default_rng(0)
    for _ in range(25):
        t = corners.T @ rng.dirichlet([1.0, 1.0, 1.0])
        w = barycentric_weights(t, corners, center)
        sums_ok &= abs(w.sum() - 1.0) < 1e-9
    for i in range(3):
        w = barycentric_weights(corners[i], corners, center)
        e = np.zeros(3)
        e[i] = 1.0
        vertex_ok &= np.max(np.abs(w - e)) < 1e-9
    w_c = barycentric_weights(corners.mean(axis=0), corners, center)
    centroid_ok = np.max(np.abs(w_c - 1.0 / 3.0)) < 1e-9

    ok = exact_one and exact_zero and sums_ok and vertex_ok and centroid_ok
    report(3, "fusion identities", ok,
           f"conf 1/0 bit-exact: {exact_one}/{exact_zero}, "
           f"bary sum/vertex/centroid at 1e-9: {sums_ok}/{vertex_ok}/{centroid_ok}")


# -- 4: shared-attention reductions -----------------------------------------


def test_criterion_04_isa_reductions():
    import torch.nn as nn

    torch.manual_seed(4)
    d = 16
    q = torch.randn(10, d, dtype=torch.float64)
    kv = torch.randn(10, d, dtype=torch.float64)
    wq, wk, wv = (nn.Linear(d, d).double() for _ in range(3))

    single = inflated_self_attention(q, [kv], wq, wk, wv)
    attn = torch.softmax(wq(q) @ wk(kv).T / d ** 0.5, dim=-1)
    manual = attn @ wv(kv)
    k1_exact = torch.equal(single, manual)

    repeated = inflated_self_attention(q, [kv, kv, kv, kv], wq, wk, wv)
    rep_err = torch.max(torch.abs(repeated - single)).item()

    ok = k1_exact and rep_err < 1e-6
    report(4, "attention reductions", ok,
           f"k=1 vs self-attention exact: {k1_exact}, "
           f"identical frames max err {rep_err:.1e}")


# -- 5: inversion round trip ------------------------------------------------


@pytest.fixture(scope="module")
def toy_denoiser():
    torch.manual_seed(0)
    model = ToyDenoiser(n_steps=25, base=8, t_dim=16)
    schedule = NoiseSchedule.linear_for_steps(25, final_alpha_bar=1e-2)
    imgs = np.stack([smooth_image(16, 16, 0.9 * i) for i in range(5)])
    train_toy_denoiser(model, imgs, schedule, steps=200, lr=1e-3, seed=0)
    return model, schedule


def test_criterion_05_ddim_round_trip(toy_denoiser):
    model, schedule = toy_denoiser
    x0 = to_latent(smooth_image(16, 16, 0.4))
    x_t = ddim_invert(model, schedule, x0, refine_iters=3)[-1]
    toy_err = torch.max(torch.abs(ddim_sample(model, schedule, x_t) - x0)).item()

    ident = IdentityBackend()
    x_t0 = ddim_invert(ident, schedule, x0)[-1]
    id_err = torch.max(torch.abs(ddim_sample(ident, schedule, x_t0) - x0)).item()

    ok = toy_err < 1e-3 and id_err < 1e-6
    report(5, "inversion round trip", ok,
           f"toy L-inf {toy_err:.2e} (<1e-3), zero-noise {id_err:.2e} (<1e-6)")


# -- 6: identity enhancer keeps consistency ---------------------------------


def test_criterion_06_identity_enhancer_consistency():
    ds = make_dataset("demo", "orbit", n_views=6, width=32, height=32)
    frames = [ds.images[v] for v in range(6)]
    locs = np.stack([c.center() for c in ds.cameras])
    before = pixel_mse_consistency(
        np.stack(frames), ds.depths, ds.masks, ds.cameras).mean_mse

    backend = IdentityBackend()
    schedule = NoiseSchedule.linear_for_steps(5, final_alpha_bar=0.05)
    ks = build_keyframes(backend, schedule, frames[:3], locs[:3], ds.center)
    out = [
        enhance_view(backend, schedule, frames[v], locs[v], ks).image
        for v in range(6)
    ]
    after = pixel_mse_consistency(
        np.stack(out), ds.depths, ds.masks, ds.cameras).mean_mse
    delta = abs(after - before)
    ok = delta < 1e-6
    report(6, "identity enhancer consistency", ok,
           f"orbit pixel-mse {before:.3e} -> {after:.3e}, |delta| {delta:.1e}")


# -- 7: toy one-pass training run -------------------------------------------


@pytest.fixture(scope="module")
def opp_run():
    ds = make_dataset("demo", "dome", n_views=28, width=64, height=64)
    holdout = [int(v) for v in np.linspace(2, 27, 8).round()]
    train_views = [v for v in range(28) if v not in holdout]
    torch.manual_seed(0)
    model = OppModel(ds.near, ds.far, image_hw=(64, 64), grid_hw=(16, 16))
    cfg = TrainConfig(
        pipeline="one_stage_parallel", steps=1200, lr=1e-3,
        rays_per_step=256, train_coarse=32, train_fine=32, seed=0,
    )
    trainer = OppTrainer(model, ds, train_views, cfg)
    t0 = time.perf_counter()
    trainer.train()
    trainer.finetune_corf(steps=150, lr=1e-3)
    minutes = (time.perf_counter() - t0) / 60
    return ds, model, holdout, minutes


def test_criterion_07_toy_opp_run(opp_run):
    ds, model, holdout, train_minutes = opp_run
    t0 = time.perf_counter()
    scores = {"nerf": [], "gan": [], "fused": [], "sh_n": [], "sh_f": []}
    for v in holdout:
        res = model.render_branches(ds.cameras[v], 64, 96)
        scores["nerf"].append(psnr(res["nerf"], ds.images[v]))
        scores["gan"].append(psnr(res["gan"], ds.images[v]))
        scores["fused"].append(psnr(res["fused"], ds.images[v]))
        scores["sh_n"].append(sharpness(res["nerf"]))
        scores["sh_f"].append(sharpness(res["fused"]))
    minutes = train_minutes + (time.perf_counter() - t0) / 60
    m = {k: float(np.mean(v)) for k, v in scores.items()}
    ok = (
        m["nerf"] >= 25.0
        and m["fused"] >= m["gan"]
        and m["fused"] >= m["nerf"] - 0.3
        and m["sh_f"] >= m["sh_n"]
        and minutes <= 15.0
    )
    report(7, "toy one-pass run", ok,
           f"held-out psnr nerf {m['nerf']:.2f} gan {m['gan']:.2f} "
           f"fused {m['fused']:.2f}, sharpness nerf {m['sh_n']:.5f} "
           f"fused {m['sh_f']:.5f}, {minutes:.1f} min")


# -- 8: grid-render efficiency ----------------------------------------------


def test_criterion_08_grid_efficiency():
    counts = {}
    cam = make_cam(w=128, h=128)

    def make_counting():
        c = {"n": 0}

        def field(pts, dirs):
            c["n"] += pts.shape[0]
            m = pts.shape[0]
            return {"sigma": torch.full((m,), 0.5, dtype=pts.dtype),
                    "rgb": torch.full((m, 3), 0.5, dtype=pts.dtype)}

        return c, field

    for name, batch in (("grid", sample_grid(cam, 16, 16)), ("full", sample_full(cam))):
        c, field = make_counting()
        res = render_rays(field, batch, near=0.5, far=2.5, n_coarse=64, n_fine=96,
                          rng=np.random.default_rng(0))
        assert res.queries == c["n"]
        counts[name] = c["n"]
    ratio_exact = counts["grid"] * 64 == counts["full"]

    ds = make_dataset("demo", "dome", n_views=1, width=128, height=128)
    torch.manual_seed(0)
    model = OppModel(ds.near, ds.far, image_hw=(128, 128), grid_hw=(16, 16))
    model.set_reference(ds.images[0], ds.cameras[0])
    model.ensure_ref_depth()
    cam0 = ds.cameras[0]
    model.render_fast(cam0)  # warm up
    t0 = time.perf_counter()
    model.render_fast(cam0)
    t_fast = time.perf_counter() - t0
    t0 = time.perf_counter()
    model.render_nerf_image(cam0, 64, 96)
    t_full = time.perf_counter() - t0
    speedup = t_full / t_fast

    ok = ratio_exact and speedup >= 5.0
    report(8, "grid efficiency", ok,
           f"queries {counts['grid']} vs {counts['full']} (1/64 exact: {ratio_exact}), "
           f"wall-clock {t_full:.2f}s vs {t_fast:.2f}s = {speedup:.1f}x")


# -- 9: overhead parameter budget -------------------------------------------


def test_criterion_09_parameter_budget(tmp_path, capsys):
    torch.manual_seed(0)
    model = OppModel(NEAR, FAR, image_hw=(128, 128), grid_hw=(16, 16))
    path = tmp_path / "model.prm"
    save_model(path, model)
    assert main(["eval", "--model", str(path)]) == 0
    out = dict(
        line.split(" ", 1) for line in capsys.readouterr().out.strip().splitlines()
    )
    groups = {k: int(v) for k, v in out.items() if k.startswith("params_")}
    total = groups.pop("params_overhead_total")
    itemized = set(groups) == {"params_color_read", "params_confidence", "params_upsampler"}
    direct = sum(param_count(m) for m in model.overhead_modules().values())
    ok = itemized and total == sum(groups.values()) == direct and total <= 500_000
    report(9, "overhead parameter budget", ok,
           ", ".join(f"{k.removeprefix('params_')} {v}" for k, v in groups.items())
           + f", total {total} <= 500000: {total <= 500_000}")


# -- 10: sweep harness ------------------------------------------------------


def test_criterion_10_sweep_harness(tmp_path):
    import json

    t0 = time.perf_counter()
    dsdir = tmp_path / "ds"
    assert main([
        "make-dataset", "--out", str(dsdir),
        "--set", "dataset.n_views=12", "--set", "dataset.width=64",
        "--set", "dataset.height=64",
    ]) == 0
    out = tmp_path / "sweep"
    code = main([
        "sweep", "--dataset", str(dsdir), "--out", str(out),
        "--set", "train.steps=120", "--set", "train.holdout=3,8",
        "--set", "train.train_coarse=16", "--set", "train.train_fine=16",
        "--set", "train.rays_per_step=128",
        "--set", "corf.steps=40", "--set", "corf.views=4",
        "--set", "render.n_coarse=32", "--set", "render.n_fine=48",
    ])
    minutes = (time.perf_counter() - t0) / 60
    rows = json.loads((out / "table.json").read_text()) if code == 0 else []
    shape_ok = (
        code == 0
        and len(rows) == 6
        and [r["sweep"] for r in rows] == ["lambda_gan"] * 3 + ["lambda_per"] * 3
        and [r["lambda_gan"] for r in rows[:3]] == [1e-4, 1e-3, 1e-2]
        and [r["lambda_per"] for r in rows[3:]] == [1e-3, 1e-2, 1e-1]
        and all(set(r) >= {"psnr", "ssim", "sharpness", "pixel_mse"} for r in rows)
    )
    ok = shape_ok and minutes <= 60.0
    report(10, "sweep harness", ok,
           f"6-row protocol shape: {shape_ok}, {minutes:.1f} min (<60)")
