"""Command-line entry points wiring the pipeline end to end.

Subcommands: synth, train-static, train-dynamic, render, eval. Every run
writes a run.json manifest (resolved config, versions, timings) into its
output directory so results are reproducible from the manifest alone.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__, io_formats, losses, synth
from .motion import build_motion_field
from .rasterizer import render
from .scene import TrainConfig, init_from_points
from .trainer import train_dynamic, train_static


def _load_config(args) -> TrainConfig:
    config = TrainConfig()
    if getattr(args, "config", None):
        overrides = {}
        for ln, line in enumerate(Path(args.config).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{args.config}:{ln}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            overrides[key] = value
        config.apply_overrides(overrides)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "iters", None) is not None:
        config.static_iters = args.iters
        config.dynamic_iters = args.iters
    return config.validate()


def _write_manifest(out_dir, command, args, config=None, outputs=(), elapsed=0.0):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": {k: v for k, v in vars(args).items() if k != "func"},
        "config": asdict(config) if config is not None else None,
        "versions": {
            "dctsplat": __version__,
            "python": sys.version.split()[0],
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
        "elapsed_seconds": elapsed,
        "outputs": [str(o) for o in outputs],
    }
    with open(out_dir / "run.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)


def cmd_synth(args):
    t0 = time.time()
    spec = synth.SynthSpec(
        seed=args.seed if args.seed is not None else 0,
        frames=args.frames,
        n_foreground=args.n_foreground,
        n_background=args.n_background,
        image_height=args.size,
        image_width=args.size,
        amplitude=args.amplitude,
        noise_level=args.noise,
    )
    gt, phi, dataset = synth.generate(spec)
    out = Path(args.out)
    io_formats.save_dataset(dataset, out)
    gt_dir = out / "gt"
    gt_dir.mkdir(parents=True, exist_ok=True)
    io_formats.save_gaussians(gt, gt_dir / "gaussians.ply")
    np.save(gt_dir / "phi.npy", phi)
    with open(gt_dir / "meta.json", "w", encoding="utf-8") as f:
        json.dump({"n_foreground": spec.n_foreground, "frames": spec.frames,
                   "k_fraction": spec.k_fraction, "seed": spec.seed}, f, indent=1)
    _write_manifest(out, "synth", args, outputs=[out / "cameras.json", gt_dir],
                    elapsed=time.time() - t0)
    print(f"dataset: {out}")
    print(f"ground truth: {gt_dir / 'gaussians.ply'} {gt_dir / 'phi.npy'}")
    return 0


def cmd_train_static(args):
    t0 = time.time()
    config = _load_config(args)
    dataset = io_formats.load_dataset(args.dataset)
    if args.resume:
        gaussians = io_formats.load_gaussians(args.resume)
    else:
        gaussians = init_from_points(dataset.init_points, dataset.init_colors, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gaussians = train_static(dataset, gaussians, config, out_dir=out,
                             start_iter=args.start_iter)
    ckpt = out / "gaussians.ply"
    io_formats.save_gaussians(gaussians, ckpt)
    _write_manifest(out, "train-static", args, config=config, outputs=[ckpt],
                    elapsed=time.time() - t0)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_train_dynamic(args):
    t0 = time.time()
    config = _load_config(args)
    dataset = io_formats.load_dataset(args.dataset)
    gaussians = io_formats.load_gaussians(args.gaussians)
    field = build_motion_field(dataset.cameras, dataset.total_frames, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gaussians, field = train_dynamic(dataset, gaussians, field, config, out_dir=out)
    ckpt = out / "gaussians.ply"
    field_ckpt = out / "motion_field.amsf"
    io_formats.save_gaussians(gaussians, ckpt)
    io_formats.save_motion_field(field, field_ckpt)
    _write_manifest(out, "train-dynamic", args, config=config,
                    outputs=[ckpt, field_ckpt], elapsed=time.time() - t0)
    print(f"checkpoint: {ckpt}")
    print(f"motion field: {field_ckpt}")
    return 0


def _parse_times(spec_str):
    parts = [float(v) for v in spec_str.split(":")]
    if len(parts) == 1:
        return [parts[0]]
    start, stop = parts[0], parts[1]
    step = parts[2] if len(parts) > 2 else 1.0
    out = []
    t = start
    while t < stop - 1e-9:
        out.append(t)
        t += step
    return out


def cmd_render(args):
    t0 = time.time()
    config = _load_config(args)
    dataset = io_formats.load_dataset(args.dataset)
    gaussians = io_formats.load_gaussians(args.gaussians)
    field = io_formats.load_motion_field(args.field) if args.field else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.mode == "replay":
        jobs = [(cam, float(cam.time_index)) for cam in dataset.cameras]
    elif args.mode == "fixed-time":
        jobs = [(cam, args.time) for cam in dataset.cameras]
    elif args.mode == "fixed-view":
        cam = dataset.cameras[args.view_index]
        jobs = [(cam, t) for t in _parse_times(args.times)]
    else:
        raise ValueError(f"unknown render mode {args.mode}")

    paths = []
    with torch.no_grad():
        for i, (cam, t) in enumerate(jobs):
            overrides = field.deformed_pose(gaussians, t) if field else None
            image = render(gaussians, cam, overrides=overrides,
                           background=config.background).color.clamp(0, 1)
            path = out / f"{i:05d}.png"
            io_formats.save_image(path, image.numpy())
            paths.append(path)
    _write_manifest(out, "render", args, config=config, outputs=paths[:1],
                    elapsed=time.time() - t0)
    print(f"wrote {len(paths)} frames to {out}")
    return 0


SPLITS = {"paper": (3, 30), "desk": (2, 4)}


def cmd_eval(args):
    t0 = time.time()
    config = _load_config(args)
    dataset = io_formats.load_dataset(args.dataset)
    gaussians = io_formats.load_gaussians(args.gaussians)
    field = io_formats.load_motion_field(args.field) if args.field else None

    if args.split == "all":
        test = dataset
    else:
        n_segments, seg_len = SPLITS[args.split]
        _, test = synth.held_out_split(dataset, n_segments, seg_len)

    rows = []
    with torch.no_grad():
        for frame, cam in zip(test.frames, test.cameras):
            overrides = field.deformed_pose(gaussians, frame.time_index) if field else None
            image = render(gaussians, cam, overrides=overrides,
                           background=config.background).color.clamp(0, 1)
            rows.append({
                "index": frame.time_index,
                "time": float(frame.time_index),
                "psnr": losses.psnr(image, frame.image),
                "ssim": losses.ssim_metric(image, frame.image),
            })
    metrics = {
        "frames": rows,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])) if rows else 0.0,
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])) if rows else 0.0,
        "lpips": None,
        "lpips_reason": "LPIPS requires a pretrained perceptual network; out of scope",
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.json"
    with open(metrics_path, "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=1)
    _write_manifest(out, "eval", args, config=config, outputs=[metrics_path],
                    elapsed=time.time() - t0)
    if args.json:
        print(json.dumps(metrics))
    else:
        print(f"frames: {len(rows)}  mean PSNR: {metrics['mean_psnr']:.2f}  "
              f"mean SSIM: {metrics['mean_ssim']:.4f}")
        print(f"metrics: {metrics_path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="dctsplat",
                                     description="Dynamic Gaussian splatting pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--json", action="store_true", help="machine-readable stdout")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--n-foreground", type=int, default=200)
    p.add_argument("--n-background", type=int, default=300)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--amplitude", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-static", help="static reconstruction stage")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--iters", type=int, default=None, help="override iteration count")
    p.add_argument("--resume", help="resume from a Gaussian PLY checkpoint")
    p.add_argument("--start-iter", type=int, default=0)
    p.set_defaults(func=cmd_train_static)

    p = sub.add_parser("train-dynamic", help="dynamic motion stage")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--gaussians", required=True, help="static checkpoint PLY")
    p.add_argument("--iters", type=int, default=None)
    p.set_defaults(func=cmd_train_dynamic)

    p = sub.add_parser("render", help="render novel views / times")
    common(p)
    p.add_argument("--dataset", required=True, help="provides the cameras")
    p.add_argument("--gaussians", required=True)
    p.add_argument("--field", help="motion field checkpoint (optional)")
    p.add_argument("--mode", choices=["replay", "fixed-time", "fixed-view"],
                   default="replay")
    p.add_argument("--time", type=float, default=0.0, help="time for fixed-time mode")
    p.add_argument("--view-index", type=int, default=0)
    p.add_argument("--times", default="0:1", help="start:stop[:step] for fixed-view")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="held-out metrics")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--gaussians", required=True)
    p.add_argument("--field")
    p.add_argument("--split", choices=["paper", "desk", "all"], default="paper")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args) or 0
    except Exception as exc:  # runtime failure -> exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
