"""Command-line surface.

Seven subcommands: synth, train, eval, infer, train-video, train-texture,
plot. Exit codes: 0 success, 1 usage error, 2 runtime error. Every run
writes its resolved config next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import arrayio, config
from .errors import ConfigError, ResposeError


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _load_config(path: Optional[str]) -> config.RunConfig:
    return config.parse_config(path) if path else config.from_dict({})


def _runconfig_from_checkpoint(extra: dict, manifest=None) -> config.RunConfig:
    """Reconstruct the effective run config from checkpoint metadata so eval
    and downstream runs can write an honest provenance file."""
    raw: dict = {
        "backbone": dict(extra["backbone"]),
        "loss": dict(extra["loss"]),
        "train": dict(extra["train"]),
    }
    dataset = {
        "canonical_size": extra["camera"]["canonical_size"],
        "focal": extra["camera"]["focal"],
        "body_seed": extra["body"]["body_seed"],
        "num_vertices": extra["body"]["num_vertices"],
        "num_joints": extra["body"]["num_joints"],
    }
    if manifest is not None:
        dataset["count"] = manifest.count
        dataset["seed"] = manifest.seed
        dataset["fraction3d"] = manifest.fraction3d
    raw["dataset"] = dataset
    return config.from_dict(raw)


# ------------------------------------------------------------- subcommands


def _cmd_synth(args) -> int:
    from .dataset import DatasetManifest, generate_dataset

    cfg = _load_config(args.config)
    d = cfg.dataset
    if args.count is not None:
        d = dataclasses.replace(d, count=args.count)
    if args.seed is not None:
        d = dataclasses.replace(d, seed=args.seed)
    cfg = dataclasses.replace(cfg, dataset=d)
    manifest = DatasetManifest(
        count=d.count,
        seed=d.seed,
        fraction3d=d.fraction3d,
        canonical_size=d.canonical_size,
        focal=d.focal,
        body_seed=d.body_seed,
        num_vertices=d.num_vertices,
        num_joints=d.num_joints,
    )
    generate_dataset(manifest, args.out)
    config.write_resolved(cfg, args.out)
    print(f"wrote {d.count} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .dataset import SyntheticDataset
    from .training import Trainer, restore_trainer

    cfg = _load_config(args.config)
    data = SyntheticDataset(args.data)
    if cfg.backbone.canonical_size != data.manifest.canonical_size:
        # an untouched default should follow the data instead of fighting it
        if cfg.backbone.canonical_size == config.BackboneConfig().canonical_size:
            cfg = dataclasses.replace(
                cfg,
                backbone=dataclasses.replace(
                    cfg.backbone, canonical_size=data.manifest.canonical_size
                ),
                dataset=dataclasses.replace(
                    cfg.dataset, canonical_size=data.manifest.canonical_size
                ),
            )
        else:
            raise ConfigError(
                f"backbone.canonical_size {cfg.backbone.canonical_size} does not match "
                f"the dataset's {data.manifest.canonical_size}"
            )
    os.makedirs(args.out, exist_ok=True)
    trainer = Trainer(data, cfg.train, cfg.loss, cfg.backbone, out_dir=args.out)
    if args.resume:
        restore_trainer(trainer, args.resume)
    config.write_resolved(cfg, args.out)
    trainer.train(log_path=os.path.join(args.out, "train_log.csv"))
    print(f"trained to step {trainer.step_idx}; checkpoint in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .dataset import SyntheticDataset
    from .evaluation import evaluate, load_pose_bundle, write_report_csv

    bundle = load_pose_bundle(args.ckpt)
    data = SyntheticDataset(args.data)
    report = evaluate(bundle, data, max_samples=args.max_samples)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "report.csv")
    write_report_csv(report, path)
    config.write_resolved(_runconfig_from_checkpoint(bundle.meta, data.manifest), args.out)
    for p in sorted(report.per_range):
        m = report.per_range[p]
        print(f"range {p}: mpjpe {m['mpjpe']:.4f}  mpjpe_pa {m['mpjpe_pa']:.4f}  (n={m['n']})")
    print(f"wrote {path}")
    return 0


def _load_image(path: str, size: int) -> tuple[np.ndarray, int]:
    """Load a PNG/JPG or .npy image as (3, size, size) float32 in [0, 1];
    returns the image and the resolution it arrived at."""
    from .resample import resample_cubic

    if path.endswith(".npy"):
        arr = np.load(path).astype(np.float32)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ConfigError(f"expected a (3, H, W) array in {path}, got {arr.shape}")
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        arr = arr.transpose(2, 0, 1)
    src = min(arr.shape[1], arr.shape[2])
    if arr.shape[1:] != (size, size):
        arr = resample_cubic(np.ascontiguousarray(arr), size)
    return np.clip(arr, 0.0, 1.0), src


def _cmd_infer(args) -> int:
    import torch

    from .backbone import select_range
    from .evaluation import load_pose_bundle, predict_joints
    from .rendering import render_overlay

    bundle = load_pose_bundle(args.ckpt)
    size = bundle.backbone_cfg.canonical_size
    image, src_res = _load_image(args.image, size)
    range_index = select_range(src_res, bundle.backbone_cfg.range_bounds)
    params, x3d = predict_joints(bundle, image[None], range_index)
    beta, theta, delta = bundle.posenet.split(torch.from_numpy(params))
    beta, theta, delta = beta[0].numpy(), theta[0].numpy(), delta[0].numpy()

    os.makedirs(args.out, exist_ok=True)
    shifted = x3d[0] + delta
    f, pp = bundle.cam.focal_length, bundle.cam.principal_point
    kp2d = f * shifted[:, :2] / np.maximum(shifted[:, 2:3], 0.5) + np.asarray(pp)
    overlay = os.path.join(args.out, "overlay.png")
    render_overlay(image, kp2d, bundle.model.parent, overlay)
    arrayio.dump_json(
        {
            "beta": [float(v) for v in beta],
            "theta": [float(v) for v in theta],
            "delta": [float(v) for v in delta],
            "source_resolution": src_res,
            "range": range_index,
        },
        os.path.join(args.out, "params.json"),
    )

    np.set_printoptions(precision=4, suppress=True)
    print(f"range {range_index} (source resolution {src_res})")
    print("beta ", beta)
    print("theta", theta.reshape(-1, 3))
    print("delta", delta)
    print(f"wrote {overlay}")
    return 0


def _cmd_train_video(args) -> int:
    from .evaluation import load_pose_bundle
    from .temporal import train_temporal

    cfg = _load_config(args.config)
    bundle = load_pose_bundle(args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    config.write_resolved(cfg, args.out)
    metrics = train_temporal(bundle, cfg.temporal, out_dir=args.out)
    arrayio.dump_json(metrics, os.path.join(args.out, "temporal_metrics.json"))
    for k in sorted(metrics):
        print(f"{k}: {metrics[k]:.6f}")
    return 0


def _cmd_train_texture(args) -> int:
    from .dataset import SyntheticDataset
    from .evaluation import load_pose_bundle
    from .texture import train_texture

    cfg = _load_config(args.config)
    bundle = load_pose_bundle(args.ckpt)
    data = SyntheticDataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    config.write_resolved(cfg, args.out)
    summary = train_texture(bundle, data, cfg.texture, out_dir=args.out)
    arrayio.dump_json(summary, os.path.join(args.out, "texture_summary.json"))
    print(f"loss {summary['first_loss']:.4f} -> {summary['last_loss']:.4f} over {summary['steps']} steps")
    return 0


def _cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "respose"
    import matplotlib.pyplot as plt

    from .evaluation import read_report_csv

    report = read_report_csv(args.report)
    ranges = sorted(report.per_range)
    mpjpe_vals = [report.per_range[p]["mpjpe"] for p in ranges]
    pa_vals = [report.per_range[p]["mpjpe_pa"] for p in ranges]
    xs = np.arange(len(ranges))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(xs - 0.2, mpjpe_vals, width=0.4, label="MPJPE")
    ax.bar(xs + 0.2, pa_vals, width=0.4, label="PA-MPJPE")
    ax.set_xticks(xs)
    ax.set_xticklabels([f"range {p}" for p in ranges])
    ax.set_ylabel("error (body units)")
    ax.set_title("per-range joint error")
    ax.legend()
    fig.tight_layout()
    out = args.out
    if os.path.isdir(out) or not out.endswith(".svg"):
        os.makedirs(out, exist_ok=True)
        out = os.path.join(out, "report.svg")
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {out}")
    return 0


# ------------------------------------------------------------------ driver


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="respose", description="resolution-aware pose, shape, and texture toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON config path")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="train the pose network")
    p.add_argument("--config", help="JSON config path")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint across resolutions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-samples", type=int, default=0)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("infer", help="predict parameters for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("train-video", help="train the temporal refiner")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", help="JSON config path")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train_video)

    p = sub.add_parser("train-texture", help="train the texture network")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON config path")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train_texture)

    p = sub.add_parser("plot", help="plot a report CSV as an SVG bar chart")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_plot)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ResposeError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except (OSError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
