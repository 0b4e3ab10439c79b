"""Command line entry point.

Subcommands cover the full workflow: make-dataset -> train-opp ->
finetune-corf -> render -> enhance, plus eval for metrics and sweep for the
loss-weight study. Every subcommand writes a manifest (config hash, content
hashes of inputs and outputs, seed) so a run can be reproduced exactly from
the manifest alone. Failures exit with a single-line error: 2 config,
3 data, 4 divergence, 5 checkpoint.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import RunConfig, config_hash, load_config, to_dict
from .dataio import load_dataset, make_dataset, save_dataset
from .denoise_backend import IdentityBackend, NoiseSchedule, ToyDenoiser, train_toy_denoiser
from .diff3de import build_keyframes, enhance_view, load_keyframes, save_keyframes
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .geometry import cameras_at, fibonacci_dome, load_cameras, orbit_positions, save_cameras
from .metrics import param_count, pixel_mse_consistency, psnr, sharpness, ssim
from .opp_train import OppModel, OppTrainer, TrainConfig, load_model, save_model
from .substrate import load_arrays, load_module_params, save_arrays, save_module_params

# ---------------------------------------------------------------------------
# plumbing


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_input(path: Path) -> dict:
    path = Path(path)
    if path.is_dir():
        arch = path / "arrays.prm"
        digest = _hash_file(arch) if arch.exists() else "dir"
    else:
        digest = _hash_file(path)
    return {"path": str(path), "sha256": digest}


def _write_manifest(
    out_dir: Path, subcommand: str, cfg: RunConfig,
    inputs: dict, outputs: list[Path], extra: dict | None = None,
) -> None:
    man = {
        "subcommand": subcommand,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "config": to_dict(cfg),
        "inputs": {
            k: v if isinstance(v, dict) else _hash_input(v) for k, v in inputs.items()
        },
        "outputs": {
            str(p.relative_to(out_dir)): _hash_file(p) for p in sorted(outputs)
        },
    }
    if extra:
        man["results"] = extra
    (out_dir / "manifest.json").write_text(json.dumps(man, indent=1, sort_keys=True))


def _save_png(path: Path, img: np.ndarray) -> None:
    arr = np.clip(img, 0.0, 1.0)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def _load_png_dir(path: Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_dir():
        raise DataError("eval-missing", f"image directory not found: {path}")
    out = {}
    for p in sorted(path.glob("*.png")):
        out[p.stem] = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
    if not out:
        raise DataError("eval-empty", f"no PNG images in {path}")
    return out


def _parse_views(spec: str, n: int) -> list[int]:
    if spec.strip().lower() in ("", "all"):
        return list(range(n))
    try:
        views = [int(v) for v in spec.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"bad view list {spec!r}")
    bad = [v for v in views if v < 0 or v >= n]
    if bad:
        raise ConfigError(f"view indices out of range: {bad}")
    return views


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        pipeline=t.pipeline, steps=t.steps, stage1_steps=t.stage1_steps, lr=t.lr,
        lambda_gan=t.lambda_gan, lambda_per=t.lambda_per, r1_gamma=t.r1_gamma,
        rays_per_step=t.rays_per_step, sampling=t.sampling, patch=t.patch,
        train_coarse=t.train_coarse, train_fine=t.train_fine, seed=cfg.seed,
        log_every=t.log_every, divergence_limit=t.divergence_limit,
        early_stop_psnr=t.early_stop_psnr, early_stop_every=t.early_stop_every,
    )


def _split_views(cfg: RunConfig, n: int) -> tuple[list[int], list[int]]:
    holdout = _parse_views(cfg.train.holdout or "none", n) if cfg.train.holdout else []
    train_views = [v for v in range(n) if v not in holdout]
    return train_views, holdout


def _build_model(cfg: RunConfig, ds) -> OppModel:
    h, w = ds.images.shape[1:3]
    return OppModel(
        ds.near, ds.far, image_hw=(h, w),
        grid_hw=(cfg.model.grid_h, cfg.model.grid_w),
        hidden_width=cfg.model.hidden_width,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_dataset(args, cfg: RunConfig) -> int:
    d = cfg.dataset
    out = Path(args.out or Path(cfg.out_dir) / "dataset")
    ds = make_dataset(
        d.scene, d.layout, n_views=d.n_views, width=d.width, height=d.height,
        elevation_deg=d.elevation,
    )
    save_dataset(out, ds)
    outputs = [p for p in out.rglob("*") if p.is_file()]
    _write_manifest(out, "make-dataset", cfg, {}, outputs)
    print(f"dataset {d.scene}/{d.layout}: {d.n_views} views {d.width}x{d.height} -> {out}")
    return 0


def cmd_train_opp(args, cfg: RunConfig) -> int:
    ds = load_dataset(args.dataset)
    train_views, holdout = _split_views(cfg, len(ds))
    model = _build_model(cfg, ds)
    trainer = OppTrainer(model, ds, train_views, _train_config(cfg))
    report = trainer.train()
    out = Path(args.out or Path(cfg.out_dir) / "opp")
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.prm"
    save_model(model_path, model, extra={
        "steps": report.steps_run, "pipeline": cfg.train.pipeline, "holdout": holdout,
    })
    report_path = out / "report.json"
    report_path.write_text(json.dumps({
        "steps_run": report.steps_run,
        "wall_time_s": round(report.wall_time, 2),
        "stopped_early": report.stopped_early,
        "history": report.history,
    }, indent=1))
    _write_manifest(
        out, "train-opp", cfg, {"dataset": Path(args.dataset)},
        [model_path, report_path],
        extra={"steps_run": report.steps_run, "minutes": round(report.wall_time / 60, 2)},
    )
    print(
        f"trained {cfg.train.pipeline} for {report.steps_run} steps "
        f"in {report.wall_time / 60:.1f} min -> {model_path}"
    )
    return 0


def cmd_finetune_corf(args, cfg: RunConfig) -> int:
    # hash the incoming model now: --out defaults to overwriting it in place
    model_input = _hash_input(Path(args.model))
    model, extra = load_model(args.model)
    ds = load_dataset(args.dataset)
    train_views, _ = _split_views(cfg, len(ds))
    trainer = OppTrainer(model, ds, train_views, _train_config(cfg))
    report = trainer.finetune_corf(
        views=train_views[: cfg.corf.views], steps=cfg.corf.steps, lr=cfg.corf.lr,
        cache_samples=cfg.corf.cache_samples,
        render_coarse=cfg.render.n_coarse, render_fine=cfg.render.n_fine,
    )
    out = Path(args.out or args.model)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, model, extra={**extra, "corf_steps": report.steps_run})
    _write_manifest(
        out.parent, "finetune-corf", cfg,
        {"model": model_input, "dataset": Path(args.dataset)}, [out],
        extra={"corf_steps": report.steps_run, "minutes": round(report.wall_time / 60, 2)},
    )
    print(f"confidence branch tuned for {report.steps_run} steps -> {out}")
    return 0


BRANCHES = ("nerf", "gan", "confidence", "fused")


def cmd_render(args, cfg: RunConfig) -> int:
    model, _ = load_model(args.model)
    ds = load_dataset(args.dataset)
    out = Path(args.out or Path(cfg.out_dir) / "render")
    if args.orbit:
        radius = float(np.linalg.norm(ds.cameras[0].center() - ds.center))
        positions = orbit_positions(args.orbit, radius, cfg.dataset.elevation, ds.center)
        cams = cameras_at(positions, ds.center, ds.cameras[0])
        stems = [f"orbit_{i:03d}" for i in range(len(cams))]
    else:
        views = _parse_views(args.views, len(ds))
        cams = [ds.cameras[v] for v in views]
        stems = [f"view_{v:03d}" for v in views]

    for b in BRANCHES:
        (out / b).mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    outputs = []
    for stem, cam in zip(stems, cams):
        res = model.render_branches(cam, cfg.render.n_coarse, cfg.render.n_fine)
        for b in BRANCHES:
            png = out / b / f"{stem}.png"
            _save_png(png, res[b])
            outputs.append(png)
        for key in ("nerf", "gan", "confidence", "fused", "depth", "opacity"):
            arrays[f"{stem}.{key}"] = res[key]
    arr_path = out / "arrays.prm"
    save_arrays(arr_path, arrays, extra={
        "names": stems, "near": model.field.near, "far": model.field.far,
        "center": [float(c) for c in ds.center],
    })
    cam_path = out / "cameras.txt"
    save_cameras(cam_path, cams)
    outputs += [arr_path, cam_path]
    _write_manifest(
        out, "render", cfg, {"model": Path(args.model), "dataset": Path(args.dataset)},
        outputs,
    )
    print(f"rendered {len(cams)} views ({'orbit' if args.orbit else 'dataset'}) -> {out}")
    return 0


def _toy_backend(cfg: RunConfig, frames: list[np.ndarray], schedule: NoiseSchedule,
                 weights_path: Path, rebuild: bool) -> ToyDenoiser:
    torch.manual_seed(cfg.seed)
    model = ToyDenoiser(n_steps=cfg.enhance.steps)
    if weights_path.exists() and not rebuild:
        load_module_params(weights_path, model)
        return model
    train_toy_denoiser(
        model, np.stack(frames), schedule,
        steps=cfg.enhance.train_steps, lr=cfg.enhance.train_lr, seed=cfg.seed,
    )
    save_module_params(weights_path, model)
    return model


def cmd_enhance(args, cfg: RunConfig) -> int:
    rdir = Path(args.render_dir)
    arch = rdir / "arrays.prm"
    if not arch.exists():
        raise DataError("enhance-input", f"no arrays.prm under {rdir}; run `render` first")
    arrays, meta = load_arrays(arch)
    cams = load_cameras(rdir / "cameras.txt")
    names = list(meta["names"])
    frames = [arrays[f"{n}.fused"] for n in names]
    center = np.asarray(meta["center"], dtype=np.float64)

    out = Path(args.out or Path(cfg.out_dir) / "enhance")
    (out / "enhanced").mkdir(parents=True, exist_ok=True)
    schedule = NoiseSchedule.linear_for_steps(cfg.enhance.steps, cfg.enhance.final_alpha_bar)

    kf_path = Path(args.keyframes or out / "keyframes.prm")
    denoiser_path = kf_path.with_name(kf_path.stem + "_denoiser.prm")
    rebuild = args.rebuild_keyframes or not kf_path.exists()

    model = None
    if rebuild:
        if not args.model:
            raise ConfigError("--model is required to build the keyframe cache")
        model, _ = load_model(args.model)
        radius = float(np.linalg.norm(model.reference_camera.center() - center))
        kf_pos = fibonacci_dome(cfg.enhance.n_keyframes, radius, center)
        kf_cams = cameras_at(kf_pos, center, cams[0])
        kf_frames = [
            model.render_branches(c, cfg.render.n_coarse, cfg.render.n_fine)["fused"]
            for c in kf_cams
        ]
    else:
        kf_frames = None

    if cfg.enhance.backend == "identity":
        backend = IdentityBackend()
    elif cfg.enhance.backend == "toy":
        backend = _toy_backend(
            cfg, kf_frames if kf_frames is not None else frames, schedule,
            denoiser_path, rebuild,
        )
    else:
        raise ConfigError(f"unknown enhance backend {cfg.enhance.backend!r}")

    if rebuild:
        keyframes = build_keyframes(
            backend, schedule, kf_frames, kf_pos, center,
            refine_iters=cfg.enhance.refine_iters,
        )
        kf_path.parent.mkdir(parents=True, exist_ok=True)
        save_keyframes(kf_path, keyframes)
    else:
        keyframes = load_keyframes(kf_path)
        if keyframes.n_blocks != backend.n_attn_blocks:
            raise CheckpointError(
                "keyframe cache does not match the backend; pass --rebuild-keyframes"
            )

    outputs = []
    enhanced = {}
    for name, frame, cam in zip(names, frames, cams):
        res = enhance_view(
            backend, schedule, frame, cam.center(), keyframes,
            refine_iters=cfg.enhance.refine_iters,
        )
        enhanced[f"{name}.enhanced"] = res.image
        png = out / "enhanced" / f"{name}.png"
        _save_png(png, res.image)
        outputs.append(png)
    arr_path = out / "arrays.prm"
    save_arrays(arr_path, enhanced, extra={"names": names, "center": meta["center"]})
    outputs += [arr_path, kf_path]
    if denoiser_path.exists():
        outputs.append(denoiser_path)
    inputs = {"render": rdir}
    if args.model:
        inputs["model"] = Path(args.model)
    _write_manifest(out, "enhance", cfg, inputs, [p for p in outputs if p.is_relative_to(out)])
    print(f"enhanced {len(names)} frames with {cfg.enhance.backend} backend -> {out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    lines: list[tuple[str, str]] = []
    pred_dir = Path(args.pred) if args.pred else None
    if pred_dir is not None:
        if not args.ref:
            raise ConfigError("--ref is required when --pred is given")
        pred = _load_png_dir(pred_dir)
        ref = _load_png_dir(Path(args.ref))
        common = sorted(set(pred) & set(ref))
        if not common:
            raise DataError("eval-pairing", "no matching file names between --pred and --ref")
        ps = [psnr(pred[k], ref[k]) for k in common]
        ss = [ssim(pred[k], ref[k]) for k in common]
        sh_p = [sharpness(pred[k]) for k in common]
        sh_r = [sharpness(ref[k]) for k in common]
        lines += [
            ("pairs", str(len(common))),
            ("psnr", f"{np.mean(ps):.4f}"),
            ("ssim", f"{np.mean(ss):.6f}"),
            ("sharpness_pred", f"{np.mean(sh_p):.6f}"),
            ("sharpness_ref", f"{np.mean(sh_r):.6f}"),
        ]
        arch = pred_dir.parent / "arrays.prm"
        cam_file = pred_dir.parent / "cameras.txt"
        if arch.exists() and cam_file.exists():
            arrays, meta = load_arrays(arch)
            cams = load_cameras(cam_file)
            names = list(meta["names"])
            branch = pred_dir.name if f"{names[0]}.{pred_dir.name}" in arrays else "fused"
            frames = np.stack([arrays[f"{n}.{branch}"] for n in names])
            depths = np.stack([arrays[f"{n}.depth"] for n in names])
            masks = np.stack([arrays[f"{n}.opacity"] for n in names]) > 0.5
            rep = pixel_mse_consistency(frames, depths, masks, cams)
            lines += [
                ("pixel_mse", f"{rep.mean_mse:.6e}"),
                ("valid_fraction", f"{np.mean(rep.valid_fraction):.4f}"),
            ]
    if args.model:
        model, _ = load_model(args.model)
        total = 0
        for name, module in model.overhead_modules().items():
            n = param_count(module)
            total += n
            lines.append((f"params_{name}", str(n)))
        lines.append(("params_overhead_total", str(total)))
    if not lines:
        raise ConfigError("nothing to evaluate: pass --pred/--ref and/or --model")
    for key, value in lines:
        print(f"{key} {value}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = out / "eval.json"
        report.write_text(json.dumps(dict(lines), indent=1))
        inputs = {}
        if pred_dir is not None:
            inputs = {"pred": pred_dir, "ref": Path(args.ref)}
        if args.model:
            inputs["model"] = Path(args.model)
        _write_manifest(out, "eval", cfg, inputs, [report])
    return 0


SWEEP_GAN = (1e-4, 1e-3, 1e-2)
SWEEP_PER = (1e-3, 1e-2, 1e-1)


def cmd_sweep(args, cfg: RunConfig) -> int:
    ds = load_dataset(args.dataset)
    train_views, holdout = _split_views(cfg, len(ds))
    eval_views = holdout or [v for v in train_views if v != ds.reference]
    out = Path(args.out or Path(cfg.out_dir) / "sweep")
    out.mkdir(parents=True, exist_ok=True)

    grid = [("lambda_gan", g, cfg.train.lambda_per) for g in SWEEP_GAN]
    grid += [("lambda_per", cfg.train.lambda_gan, p) for p in SWEEP_PER]

    radius = float(np.linalg.norm(ds.cameras[0].center() - ds.center))
    orbit_cams = cameras_at(
        orbit_positions(6, radius, cfg.dataset.elevation, ds.center), ds.center, ds.cameras[0]
    )

    rows = []
    t0 = time.perf_counter()
    for swept, lam_g, lam_p in grid:
        tc = _train_config(cfg)
        tc.lambda_gan = lam_g
        tc.lambda_per = lam_p
        model = _build_model(cfg, ds)
        trainer = OppTrainer(model, ds, train_views, tc)
        trainer.train()
        trainer.finetune_corf(
            views=train_views[: cfg.corf.views], steps=cfg.corf.steps, lr=cfg.corf.lr,
            cache_samples=cfg.corf.cache_samples,
            render_coarse=cfg.render.n_coarse, render_fine=cfg.render.n_fine,
        )
        ps, ss, sh = [], [], []
        for v in eval_views:
            res = model.render_branches(ds.cameras[v], cfg.render.n_coarse, cfg.render.n_fine)
            ps.append(psnr(res["fused"], ds.images[v]))
            ss.append(ssim(res["fused"], ds.images[v]))
            sh.append(sharpness(res["fused"]))
        frames, depths, masks = [], [], []
        for cam in orbit_cams:
            res = model.render_branches(cam, cfg.render.n_coarse, cfg.render.n_fine)
            frames.append(res["fused"])
            depths.append(res["depth"])
            masks.append(res["opacity"] > 0.5)
        rep = pixel_mse_consistency(
            np.stack(frames), np.stack(depths), np.stack(masks), orbit_cams
        )
        rows.append({
            "sweep": swept, "lambda_gan": lam_g, "lambda_per": lam_p,
            "psnr": round(float(np.mean(ps)), 4), "ssim": round(float(np.mean(ss)), 6),
            "sharpness": round(float(np.mean(sh)), 6),
            "pixel_mse": float(f"{rep.mean_mse:.6e}"),
        })

    header = f"{'sweep':<12} {'lambda_gan':>10} {'lambda_per':>10} {'psnr':>8} {'ssim':>8} {'sharpness':>10} {'pixel_mse':>12}"
    table = [header]
    for r in rows:
        table.append(
            f"{r['sweep']:<12} {r['lambda_gan']:>10.0e} {r['lambda_per']:>10.0e} "
            f"{r['psnr']:>8.3f} {r['ssim']:>8.4f} {r['sharpness']:>10.5f} {r['pixel_mse']:>12.3e}"
        )
    text = "\n".join(table)
    print(text)
    table_txt = out / "table.txt"
    table_txt.write_text(text + "\n")
    table_json = out / "table.json"
    table_json.write_text(json.dumps(rows, indent=1))
    _write_manifest(
        out, "sweep", cfg, {"dataset": Path(args.dataset)}, [table_txt, table_json],
        extra={"minutes": round((time.perf_counter() - t0) / 60, 2)},
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML config file")
    common.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    common.add_argument("--out", default=None, help="output directory (or file for finetune-corf)")

    p = argparse.ArgumentParser(prog="onvs", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("make-dataset", parents=[common], help="trace a toy scene to a posed dataset")
    sp.set_defaults(func=cmd_make_dataset)

    sp = sub.add_parser("train-opp", parents=[common], help="train field + decoder on a dataset")
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(func=cmd_train_opp)

    sp = sub.add_parser("finetune-corf", parents=[common], help="tune the confidence branch")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--model", required=True)
    sp.set_defaults(func=cmd_finetune_corf)

    sp = sub.add_parser("render", parents=[common], help="render branch outputs for views")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--views", default="all", help="comma list of dataset view indices, or 'all'")
    sp.add_argument("--orbit", type=int, default=0, help="render N orbit views instead of dataset views")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("enhance", parents=[common], help="multi-view consistent enhancement of renders")
    sp.add_argument("--render-dir", required=True)
    sp.add_argument("--model", default=None, help="model checkpoint (needed to build keyframes)")
    sp.add_argument("--keyframes", default=None, help="keyframe cache archive path")
    sp.add_argument("--rebuild-keyframes", action="store_true")
    sp.set_defaults(func=cmd_enhance)

    sp = sub.add_parser("eval", parents=[common], help="compare image directories / report model budget")
    sp.add_argument("--pred", default=None)
    sp.add_argument("--ref", default=None)
    sp.add_argument("--model", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", parents=[common], help="loss-weight study: vary gan then perceptual weight")
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    np.finfo(np.float32), np.finfo(np.float64)
    torch.set_flush_denormal(True)  # subnormal transmittance stalls the CPU
    try:
        cfg = load_config(args.config, args.set)
        return args.func(args, cfg) or 0
    except ConfigError as e:
        return _fail(2, "config", str(e))
    except DataError as e:
        return _fail(3, f"data:{e.code}", str(e))
    except DivergenceError as e:
        return _fail(4, "divergence", str(e))
    except CheckpointError as e:
        return _fail(5, "checkpoint", str(e))
    except ValueError as e:
        return _fail(2, "config", str(e))


def _fail(code: int, kind: str, msg: str) -> int:
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
