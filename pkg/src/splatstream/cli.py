"""Command-line entry point: dataset generation, training, rendering,
evaluation, and the backward-pass benchmark.

Every run directory receives a manifest (resolved config, seed, git
revision, timestamps, output paths) written before work begins, plus the
command's CSV output. Exit codes: 0 success, 1 runtime failure, 2 usage
or validation error. Flags override values from a plain-text key=value
config file passed with --config.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def _load_config_file(path) -> dict:
    values = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, val = stripped.split("=", 1)
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def _resolve(args, defaults: dict, config_path) -> dict:
    """Precedence: explicit flag > config file entry > default."""
    file_vals = _load_config_file(config_path) if config_path else {}
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_vals:
            resolved[key] = _coerce(file_vals[key], default)
        else:
            resolved[key] = default
    return resolved


def _start_manifest(outdir: Path, command: str, config: dict, seed, outputs: dict):
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "git": _git_describe(),
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "finished_at": None,
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path, manifest


def _finish_manifest(path: Path, manifest: dict):
    manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen(args, parser) -> int:
    if args.gaussians < 1 or args.frames < 1:
        parser.error("--gaussians and --frames must be >= 1")
    if args.size < 16:
        parser.error("--size must be >= 16")
    from splatstream.dataio import gen_synthetic

    out = gen_synthetic(args.gaussians, args.frames, args.size, args.seed,
                        args.out, n_points_per_frame=args.points_per_frame)
    print(out)
    return 0


TRAIN_DEFAULTS = {
    "backward": "splat",
    "scheduler": "adaptive",
    "lambda_o": 0.001,
    "lambda_ssim": 0.2,
    "d": 4,
    "r0": 8,
    "budget_iters": 0,
    "budget_ms": 0.0,
    "total_iters": 0,
    "refine_iters": 0,
    "seed": 0,
    "sh_degree": 3,
    "workers": 1,
    "deterministic": False,
    "densify_interval": 500,
    "grad_threshold": 0.001,
    "prune_opacity": 0.02,
}


def _cmd_train(args, parser) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS, args.config)
    if cfg["backward"] not in ("pixel", "splat"):
        parser.error("--backward must be 'pixel' or 'splat'")
    if cfg["scheduler"] not in ("adaptive", "uniform"):
        parser.error("--scheduler must be 'adaptive' or 'uniform'")
    if (cfg["budget_iters"] > 0) == (cfg["budget_ms"] > 0):
        parser.error("set exactly one of --budget-iters / --budget-ms")
    if cfg["deterministic"] and cfg["budget_ms"] > 0:
        parser.error("--deterministic requires --budget-iters")

    from splatstream.dataio import load_posed_dataset, save_map
    from splatstream.densify import DensifyConfig
    from splatstream.trainer import TrainConfig, run_stream

    outdir = Path(args.out)
    mpath, manifest = _start_manifest(
        outdir, "train", cfg, cfg["seed"],
        {"report": outdir / "report.csv", "map": outdir / "map.ply"})

    dataset = load_posed_dataset(args.data)
    if dataset.n_skipped:
        print(f"warning: skipped {dataset.n_skipped} frames without a "
              f"synchronized image", file=sys.stderr)
    config = TrainConfig(
        backward_mode=cfg["backward"],
        scheduler_mode=cfg["scheduler"],
        lambda_ssim=cfg["lambda_ssim"],
        lambda_o=cfg["lambda_o"],
        d=cfg["d"], r0=cfg["r0"],
        densify=DensifyConfig(interval=cfg["densify_interval"],
                              grad_threshold=cfg["grad_threshold"],
                              prune_opacity=cfg["prune_opacity"]),
        budget_iters=cfg["budget_iters"] or None,
        budget_ms=cfg["budget_ms"] or None,
        total_iter_cap=cfg["total_iters"] or None,
        refine_iters=cfg["refine_iters"],
        seed=cfg["seed"], sh_degree=cfg["sh_degree"],
        deterministic=cfg["deterministic"], n_workers=cfg["workers"])
    report, gmap = run_stream(dataset, config)
    report.to_csv(outdir / "report.csv")
    save_map(gmap, outdir / "map.ply")
    _finish_manifest(mpath, manifest)
    print(f"trained {report.total_iterations} iterations, "
          f"{report.final_primitive_count} primitives, "
          f"mean psnr {np.nanmean(report.psnr):.2f} dB -> {outdir}")
    return 0


def _cmd_render(args, parser) -> int:
    from splatstream.dataio import load_map, load_posed_dataset, save_ppm
    from splatstream.rasterizer import RasterOpts, rasterize_forward

    dataset = load_posed_dataset(args.data)
    frames = list(dataset)
    if not frames:
        parser.error("dataset contains no usable poses")
    outdir = Path(args.out)
    mpath, manifest = _start_manifest(
        outdir, "render", {"map": str(args.map)}, None,
        {"renders": outdir / "renders"})
    gmap = load_map(args.map)
    rdir = outdir / "renders"
    rdir.mkdir(exist_ok=True)
    opts = RasterOpts(with_checkpoints=False, n_workers=args.workers)
    for kf in frames:
        image = rasterize_forward(gmap, kf.camera, opts).image
        save_ppm(rdir / f"{kf.timestamp:.6f}.ppm", image, bits=16)
    _finish_manifest(mpath, manifest)
    print(rdir)
    return 0


def _cmd_eval(args, parser) -> int:
    from splatstream.dataio import load_map, load_posed_dataset
    from splatstream.losses import psnr, ssim_metric
    from splatstream.rasterizer import RasterOpts, rasterize_forward

    dataset = load_posed_dataset(args.data)
    frames = list(dataset)
    if not frames:
        parser.error("dataset contains no usable poses")
    outdir = Path(args.out)
    mpath, manifest = _start_manifest(
        outdir, "eval", {"map": str(args.map)}, None,
        {"eval": outdir / "eval.csv"})
    gmap = load_map(args.map)
    opts = RasterOpts(with_checkpoints=False, n_workers=args.workers)
    rows = []
    for kf in frames:
        image = rasterize_forward(gmap, kf.camera, opts).image
        rows.append((kf.frame_id, psnr(image, kf.image),
                     ssim_metric(image, kf.image)))
    lines = ["frame_id,psnr,ssim,n_points"]
    for fid, ps, ss in rows:
        lines.append(f"{fid},{ps:.10g},{ss:.10g},{len(gmap)}")
    mean_ps = float(np.mean([r[1] for r in rows]))
    mean_ss = float(np.mean([r[2] for r in rows]))
    lines.append(f"mean,{mean_ps:.10g},{mean_ss:.10g},{len(gmap)}")
    (outdir / "eval.csv").write_text("\n".join(lines) + "\n")
    _finish_manifest(mpath, manifest)
    print(f"mean psnr {mean_ps:.2f} dB, mean ssim {mean_ss:.4f}, "
          f"{len(gmap)} points -> {outdir / 'eval.csv'}")
    return 0


def build_bench_scene(n_splats: int, image_size: int, seed: int):
    """A translucent clutter of splats stacked over the image center, deep
    enough that hundreds blend per pixel."""
    from splatstream.core import Camera, GaussianMap
    from splatstream.sh import SH_C0

    rng = np.random.default_rng(seed)
    n = n_splats
    positions = np.empty((n, 3))
    positions[:, 0] = rng.normal(0.0, 0.22, n)
    positions[:, 1] = rng.normal(0.0, 0.22, n)
    positions[:, 2] = rng.uniform(2.0, 4.0, n)
    rotations = rng.standard_normal((n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    log_scales = np.log(rng.uniform(0.15, 0.45, (n, 3)))
    op = rng.uniform(0.02, 0.08, n)
    logits = np.log(op) - np.log1p(-op)
    sh = rng.standard_normal((n, 16, 3)) * 0.02
    sh[:, 0, :] = (rng.uniform(0.2, 0.8, (n, 3)) - 0.5) / SH_C0
    gmap = GaussianMap.from_arrays(positions, rotations, log_scales, logits, sh)
    fx = image_size / (2.0 * np.tan(np.deg2rad(30.0)))
    cam = Camera(fx=fx, fy=fx, cx=image_size / 2, cy=image_size / 2,
                 width=image_size, height=image_size)
    return gmap, cam


def _cmd_bench(args, parser) -> int:
    if args.reps < 1:
        parser.error("--reps must be >= 1")
    if args.splats < 1:
        parser.error("--splats must be >= 1")
    from splatstream.numcheck import grads_max_rel_diff
    from splatstream.rasterizer import (RasterOpts, backward_pixelwise,
                                        backward_splatwise, rasterize_forward)

    outdir = Path(args.out)
    cfg = {"splats": args.splats, "size": args.size, "reps": args.reps,
           "workers": args.workers, "seed": args.seed}
    mpath, manifest = _start_manifest(outdir, "bench", cfg, args.seed,
                                      {"bench": outdir / "bench.csv"})
    gmap, cam = build_bench_scene(args.splats, args.size, args.seed)
    opts = RasterOpts(n_workers=args.workers, with_checkpoints=True)
    grad_image = None

    # warmup compiles every kernel and checks gradient agreement
    out = rasterize_forward(gmap, cam, opts)
    grad_image = np.full_like(out.image, 1.0 / out.image.size)
    gp = backward_pixelwise(out, grad_image)
    gs = backward_splatwise(out, grad_image)
    diff = grads_max_rel_diff(gp, gs)

    def _time(fn):
        times = []
        for _ in range(args.reps):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1000.0)
        return float(np.mean(times)), float(np.std(times))

    fwd_mean, fwd_std = _time(lambda: rasterize_forward(gmap, cam, opts))
    px_mean, px_std = _time(lambda: backward_pixelwise(out, grad_image))
    sp_mean, sp_std = _time(lambda: backward_splatwise(out, grad_image))

    lines = ["mode,n_splats,image,mean_ms,std_ms,max_grad_rel_diff"]
    img = f"{args.size}x{args.size}"
    lines.append(f"forward,{args.splats},{img},{fwd_mean:.4f},{fwd_std:.4f},")
    lines.append(f"backward_pixel,{args.splats},{img},{px_mean:.4f},{px_std:.4f},{diff:.3e}")
    lines.append(f"backward_splat,{args.splats},{img},{sp_mean:.4f},{sp_std:.4f},{diff:.3e}")
    (outdir / "bench.csv").write_text("\n".join(lines) + "\n")
    _finish_manifest(mpath, manifest)
    print(f"forward {fwd_mean:.1f} ms | pixel backward {px_mean:.1f} ms | "
          f"splat backward {sp_mean:.1f} ms | speedup "
          f"{px_mean / sp_mean:.2f}x | max grad rel diff {diff:.2e}")
    if diff > 1e-5:
        print("error: backward modes disagree beyond 1e-5", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatstream",
        description="Streaming Gaussian-splatting training engine")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="generate a synthetic dataset")
    g.add_argument("--gaussians", type=int, required=True)
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--points-per-frame", type=int, default=250)
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(fn=_cmd_gen)

    t = sub.add_parser("train", help="train a map from a posed dataset")
    t.add_argument("data")
    t.add_argument("-o", "--out", required=True)
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--backward", choices=["pixel", "splat"], default=None)
    t.add_argument("--scheduler", choices=["adaptive", "uniform"], default=None)
    t.add_argument("--lambda-o", dest="lambda_o", type=float, default=None)
    t.add_argument("--lambda-ssim", dest="lambda_ssim", type=float, default=None)
    t.add_argument("--d", type=int, default=None)
    t.add_argument("--r0", type=int, default=None)
    t.add_argument("--budget-iters", dest="budget_iters", type=int, default=None)
    t.add_argument("--budget-ms", dest="budget_ms", type=float, default=None)
    t.add_argument("--total-iters", dest="total_iters", type=int, default=None)
    t.add_argument("--refine-iters", dest="refine_iters", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--sh-degree", dest="sh_degree", type=int, default=None)
    t.add_argument("--workers", type=int, default=None)
    t.add_argument("--deterministic", action="store_const", const=True, default=None)
    t.add_argument("--densify-interval", dest="densify_interval", type=int, default=None)
    t.add_argument("--grad-threshold", dest="grad_threshold", type=float, default=None)
    t.add_argument("--prune-opacity", dest="prune_opacity", type=float, default=None)
    t.set_defaults(fn=_cmd_train)

    r = sub.add_parser("render", help="render a dataset's poses from a saved map")
    r.add_argument("data")
    r.add_argument("--map", required=True)
    r.add_argument("-o", "--out", required=True)
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(fn=_cmd_render)

    e = sub.add_parser("eval", help="compare renders against dataset images")
    e.add_argument("data")
    e.add_argument("--map", required=True)
    e.add_argument("-o", "--out", required=True)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(fn=_cmd_eval)

    b = sub.add_parser("bench", help="time forward and both backward passes "
                                     "on a high-overlap scene")
    b.add_argument("--splats", type=int, default=10000)
    b.add_argument("--size", type=int, default=256)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--workers", type=int, default=8)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("-o", "--out", required=True)
    b.set_defaults(fn=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args, parser)
    except SystemExit as exc:  # parser.error inside a command
        return int(exc.code or 0)
    except (ValueError, FileNotFoundError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
