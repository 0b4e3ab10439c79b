import math

import numpy as np
import pytest
import torch

from onvs.dataio import FAR, NEAR, make_dataset
from onvs.errors import CheckpointError, DivergenceError
from onvs.metrics import param_count
from onvs.opp_train import (
    Discriminator,
    OppModel,
    OppTrainer,
    PerceptualNet,
    TrainConfig,
    Upsampler,
    dpf_fuse,
    gan_d_loss,
    gan_g_loss,
    load_model,
    perceptual_loss,
    r1_penalty,
    save_model,
)


@pytest.fixture(scope="module")
def ds():
    return make_dataset("demo", "dome", n_views=6, width=32, height=32)


def small_model():
    torch.manual_seed(0)
    return OppModel(NEAR, FAR, image_hw=(32, 32), grid_hw=(8, 8))


def small_cfg(**kw):
    base = dict(steps=2, train_coarse=12, train_fine=6, rays_per_step=48, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


def test_upsampler_shape_and_budget():
    up = Upsampler(128, scale=4)
    out = up(torch.randn(1, 128, 16, 16))
    assert out.shape == (1, 3, 64, 64)
    assert out.min() >= 0 and out.max() <= 1
    assert param_count(up) <= 200_000
    with pytest.raises(ValueError):
        Upsampler(128, scale=3)


def test_discriminator_outputs_logit():
    d = Discriminator(resolution=64)
    out = d(torch.randn(5, 3, 64, 64))
    assert out.shape == (5,)


def test_perceptual_net_fixed_and_frozen():
    a = PerceptualNet()
    b = PerceptualNet()
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
        assert not pa.requires_grad
    x = torch.rand(1, 3, 32, 32)
    assert float(perceptual_loss(a, x, x)) == 0.0
    assert float(perceptual_loss(a, x, torch.rand(1, 3, 32, 32))) > 0.0


def test_gan_loss_values_and_direction():
    zero = torch.zeros(4)
    assert float(gan_g_loss(zero)) == pytest.approx(math.log(2.0), abs=1e-6)
    assert float(gan_d_loss(zero, zero)) == pytest.approx(2 * math.log(2.0), abs=1e-6)
    # generator loss falls as the critic is fooled harder
    assert float(gan_g_loss(torch.full((4,), 2.0))) < float(gan_g_loss(zero))
    # critic loss falls when real/fake are separated the right way
    sep = gan_d_loss(torch.full((4,), -2.0), torch.full((4,), 2.0))
    assert float(sep) < float(gan_d_loss(zero, zero))


def test_r1_penalty_linear_critic_exact():
    class LinearCritic(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.randn(3, 8, 8, dtype=torch.float64))

        def forward(self, x):
            return (x * self.w).sum(dim=(1, 2, 3))

    torch.manual_seed(1)
    critic = LinearCritic()
    x = torch.randn(4, 3, 8, 8, dtype=torch.float64)
    pen = r1_penalty(critic, x, gamma=10.0)
    expect = 5.0 * critic.w.detach().pow(2).sum()
    assert float(pen.detach()) == pytest.approx(float(expect), rel=1e-12)


def test_dpf_fuse_identities():
    rng = np.random.default_rng(0)
    nerf = torch.as_tensor(rng.random((8, 8, 3), dtype=np.float32))
    gan = torch.as_tensor(rng.random((8, 8, 3), dtype=np.float32))
    ones = torch.ones(8, 8, 1)
    zeros = torch.zeros(8, 8, 1)
    assert torch.equal(dpf_fuse(nerf, gan, ones), nerf)
    assert torch.equal(dpf_fuse(nerf, gan, zeros), gan)
    half = dpf_fuse(nerf, gan, torch.full((8, 8, 1), 0.5))
    assert torch.allclose(half, 0.5 * nerf + 0.5 * gan)


def test_model_render_shapes(ds):
    model = small_model()
    model.set_reference(ds.images[0], ds.cameras[0])
    model.field.set_ref_depth(torch.full((8, 8), 3.0))
    cam = ds.cameras[1]
    gan = model.render_gan_image(cam, n_coarse=8, n_fine=4)
    assert gan.shape == (32, 32, 3) and gan.dtype == np.float32
    assert gan.min() >= 0 and gan.max() <= 1
    nerf, conf = model.render_nerf_image(cam, n_coarse=8, n_fine=4, with_confidence=True)
    assert nerf.shape == (32, 32, 3)
    assert conf.shape == (32, 32)
    fast = model.render_confidence_fast(cam, n_coarse=8, n_fine=4)
    assert fast.shape == (32, 32)
    assert fast.min() >= 0 and fast.max() <= 1

    out = model.render_branches(cam, n_coarse=8, n_fine=4)
    assert set(out) == {"nerf", "gan", "confidence", "fused", "depth", "opacity"}
    assert out["depth"].shape == (32, 32)
    assert out["opacity"].shape == (32, 32)
    manual = out["nerf"] * out["confidence"][..., None] + out["gan"] * (
        1 - out["confidence"][..., None]
    )
    assert np.allclose(out["fused"], manual, atol=1e-6)

    img, m = model.render_fast(cam, n_coarse=8, n_fine=4)
    assert img.shape == (32, 32, 3) and m.shape == (32, 32)
    assert m.min() >= 0 and m.max() <= 1


def test_gan_forward_gradient_routing(ds):
    model = small_model()
    model.set_reference(ds.images[0], ds.cameras[0])
    cam = ds.cameras[1]

    model.encode_reference()
    model.gan_forward(cam, 8, 4).sum().backward()
    trunk_w = model.field.trunk.layers[0].weight
    assert trunk_w.grad is not None and trunk_w.grad.abs().sum() > 0

    model.zero_grad()
    model.encode_reference()
    model.gan_forward(cam, 8, 4, detach_features=True).sum().backward()
    assert trunk_w.grad is None or trunk_w.grad.abs().sum() == 0
    up_w = model.upsampler.tail.weight
    assert up_w.grad is not None and up_w.grad.abs().sum() > 0


def test_overhead_parameter_budget(ds):
    model = OppModel(NEAR, FAR, image_hw=(64, 64), grid_hw=(16, 16))
    overhead = sum(param_count(m) for m in model.overhead_modules().values())
    assert overhead <= 500_000
    assert param_count(model.field.trunk.rgb_head) == 387


def test_trainer_smoke_all_pipelines(ds):
    views = list(range(5))
    for pipeline in ("one_stage_parallel", "one_stage_tandem", "two_stage_tandem"):
        model = small_model()
        cfg = small_cfg(pipeline=pipeline, steps=2, stage1_steps=1)
        tr = OppTrainer(model, ds, views, cfg)
        rep = tr.train()
        assert rep.steps_run == 2
        assert all(np.isfinite(v) for vals in rep.history.values() for v in vals)
    # after two_stage training the field must be unfrozen again
    assert all(p.requires_grad for p in model.field.trunk.parameters())


def test_trainer_divergence_guard(ds):
    model = small_model()
    cfg = small_cfg(divergence_limit=1e-12)
    tr = OppTrainer(model, ds, list(range(5)), cfg)
    with pytest.raises(DivergenceError):
        tr.train()


def test_trainer_requires_reference_in_views(ds):
    model = small_model()
    with pytest.raises(ValueError):
        OppTrainer(model, ds, [1, 2], small_cfg())


def test_finetune_corf_touches_only_corf(ds):
    model = small_model()
    cfg = small_cfg()
    tr = OppTrainer(model, ds, list(range(5)), cfg)
    trunk_before = model.field.trunk.layers[0].weight.detach().clone()
    up_before = model.upsampler.tail.weight.detach().clone()
    corf_before = model.field.corf.net[0].weight.detach().clone()
    rep = tr.finetune_corf(views=[1], steps=2, cache_samples=8, render_coarse=8, render_fine=4)
    assert rep.steps_run == 2
    assert torch.equal(model.field.trunk.layers[0].weight, trunk_before)
    assert torch.equal(model.upsampler.tail.weight, up_before)
    assert not torch.equal(model.field.corf.net[0].weight, corf_before)
    assert all(p.requires_grad for p in model.parameters())


def test_model_save_load_roundtrip(ds, tmp_path):
    model = small_model()
    model.set_reference(ds.images[0], ds.cameras[0])
    model.field.set_ref_depth(torch.full((8, 8), 3.0))
    path = tmp_path / "model.prm"
    save_model(path, model, extra={"step": 7})
    back, extra = load_model(path)
    assert extra == {"step": 7}
    for (na, pa), (nb, pb) in zip(
        model.named_parameters(), back.named_parameters()
    ):
        assert na == nb
        assert torch.equal(pa, pb)
    back.field.set_ref_depth(torch.full((8, 8), 3.0))
    cam = ds.cameras[2]
    a = model.render_gan_image(cam, 8, 4)
    b = back.render_gan_image(cam, 8, 4)
    assert np.array_equal(a, b)


def test_load_model_rejects_garbage(tmp_path):
    p = tmp_path / "bad.prm"
    p.write_bytes(b"PRM0" + b"\x00" * 32)
    with pytest.raises(CheckpointError):
        load_model(p)
