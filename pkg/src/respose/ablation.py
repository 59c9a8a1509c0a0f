"""Ablation harness: baseline vs self-supervision vs the full model.

Three variants share data, budget, and seeds; only the loss weights and the
gating differ:

  ba       frozen gains, basic loss only
  ba_ss    frozen gains, basic + directional self-supervision
  full     learned gains, all losses

The comparison statistic is the median over seeds of the final lowest-range
MPJPE on a held-out set drawn from a disjoint seed.
"""

from __future__ import annotations

import csv
import dataclasses
import os
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backbone import BackboneConfig
from .dataset import DatasetManifest, SyntheticDataset, generate_dataset
from .errors import InvalidArgumentError
from .losses import LossConfig
from .temporal import TemporalConfig, train_temporal
from .training import AugmentConfig, TrainConfig, Trainer, validate_stages

VARIANTS = ("ba", "ba_ss", "full")


@dataclass(frozen=True)
class AblationConfig:
    """Budgeted comparison setup.

    The harness trains at a reduced resolution ladder with the slow rotation
    augmentation off so every arm gets a useful number of steps on one CPU
    core; package defaults elsewhere are unaffected.
    """

    data_count: int = 2000
    data_seed: int = 101
    eval_count: int = 200
    eval_seed: int = 707
    fraction3d: float = 0.3
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    # teacher-first: a long full-resolution stage so the top range is worth
    # distilling from before the low ranges come online
    stages: tuple[tuple[int, int], ...] = ((1, 700), (3, 500), (5, 900))
    batch_size: int = 4
    learning_rate: float = 1e-3
    queue_capacity: int = 512
    canonical_size: int = 112
    # bottom range sources from [12, 20): low enough that downsampling
    # destroys pose detail instead of merely blurring it
    range_bounds: tuple[int, ...] = (112, 56, 32, 20, 12)
    # short focal keeps the depth offset the same order as the shape and pose
    # coordinates, so the distillation MSE is not dominated by one channel
    focal: float = 112.0
    noise_sigma: float = 0.02
    flip_prob: float = 0.5

    def validate(self) -> None:
        if self.data_seed == self.eval_seed:
            raise InvalidArgumentError("eval_seed must differ from data_seed")
        if not self.seeds:
            raise InvalidArgumentError("need at least one seed")
        if self.range_bounds[0] != self.canonical_size:
            raise InvalidArgumentError("range_bounds must start at canonical_size")
        if self.focal <= 0:
            raise InvalidArgumentError("focal must be > 0")
        validate_stages(self.stages, len(self.range_bounds))


def variant_configs(
    name: str, abl: AblationConfig, seed: int
) -> tuple[TrainConfig, LossConfig, BackboneConfig]:
    """Training, loss, and backbone configs for one ablation arm."""
    if name not in VARIANTS:
        raise InvalidArgumentError(f"unknown variant {name!r}")
    train = TrainConfig(
        total_steps=sum(s for _, s in abl.stages),
        batch_size=abl.batch_size,
        learning_rate=abl.learning_rate,
        seed=seed,
        stages=abl.stages,
        freeze_alpha=name != "full",
        augment=AugmentConfig(
            noise_sigma=abl.noise_sigma,
            jitter=0.1,
            rotation_deg=0.0,
            flip_prob=abl.flip_prob,
        ),
    )
    loss = LossConfig(queue_capacity=abl.queue_capacity)
    if name == "ba":
        loss = dataclasses.replace(loss, lambda_s=0.0, lambda_f=0.0)
    elif name == "ba_ss":
        loss = dataclasses.replace(loss, lambda_f=0.0)
    backbone = BackboneConfig(
        canonical_size=abl.canonical_size, range_bounds=abl.range_bounds
    )
    return train, loss, backbone


def lowest_range_mpjpe(trainer: Trainer, data: SyntheticDataset, count: int = 0) -> float:
    """Mean MPJPE of the final (lowest-resolution) range on a dataset,
    evaluated at that range's midpoint resolution."""
    import torch

    from .body_model import joints3d, smpl_forward
    from .evaluation import eval_resolutions, mpjpe
    from .resample import resample_cubic

    bounds = trainer.backbone_cfg.range_bounds
    res = eval_resolutions(bounds)[-1]
    p = len(bounds)
    n = len(data) if count <= 0 else min(count, len(data))
    errs = []
    trainer.posenet.eval()
    try:
        for start in range(0, n, 32):
            idx = range(start, min(start + 32, n))
            imgs, gts = [], []
            for i in idx:
                rec = data.sample(i)
                imgs.append(resample_cubic(resample_cubic(rec["image"], res), bounds[0]))
                gts.append(rec["joints3d"].astype(np.float64))
            x = torch.from_numpy(np.stack(imgs))
            ranges = torch.full((x.shape[0],), p, dtype=torch.long)
            with torch.no_grad():
                params, _ = trainer.posenet(x, ranges)
                beta, theta, _ = trainer.posenet.split(params)
                x3d = joints3d(trainer.model, smpl_forward(trainer.model, beta, theta)).numpy()
            errs.extend(mpjpe(x3d[b], gts[b]) for b in range(len(gts)))
    finally:
        trainer.posenet.train()
    return float(np.mean(errs))


def _ensure_dataset(
    root: str, count: int, seed: int, fraction3d: float, canonical_size: int, focal: float
) -> SyntheticDataset:
    if not os.path.exists(os.path.join(root, "manifest.json")):
        generate_dataset(
            DatasetManifest(
                count=count,
                seed=seed,
                fraction3d=fraction3d,
                canonical_size=canonical_size,
                focal=focal,
            ),
            root,
        )
    return SyntheticDataset(root)


def run_ablation(
    out_dir: str,
    cfg: Optional[AblationConfig] = None,
    log=print,
) -> dict:
    """Train every (variant, seed) pair and summarize the medians.

    Datasets are generated once under ``out_dir`` and reused. Appends one CSV
    row per finished run to ``ablation.csv`` so partial progress is visible.
    """
    cfg = cfg or AblationConfig()
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    train_data = _ensure_dataset(
        os.path.join(out_dir, "data_train"),
        cfg.data_count, cfg.data_seed, cfg.fraction3d, cfg.canonical_size, cfg.focal,
    )
    eval_data = _ensure_dataset(
        os.path.join(out_dir, "data_eval"),
        cfg.eval_count, cfg.eval_seed, cfg.fraction3d, cfg.canonical_size, cfg.focal,
    )

    csv_path = os.path.join(out_dir, "ablation.csv")
    fresh = not os.path.exists(csv_path)
    results: dict[str, list[float]] = {v: [] for v in VARIANTS}
    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["variant", "seed", "mpjpe_low", "seconds"])
        for seed in cfg.seeds:
            for name in VARIANTS:
                t0 = time.time()
                train_cfg, loss_cfg, backbone_cfg = variant_configs(name, cfg, seed)
                trainer = Trainer(train_data, train_cfg, loss_cfg, backbone_cfg)
                trainer.train()
                err = lowest_range_mpjpe(trainer, eval_data)
                dt = time.time() - t0
                results[name].append(err)
                writer.writerow([name, seed, f"{err:.10g}", f"{dt:.1f}"])
                fh.flush()
                log(f"  {name} seed {seed}: mpjpe {err:.4f} ({dt:.0f}s)")

    medians = {v: float(np.median(results[v])) for v in VARIANTS}
    summary = {
        "per_seed": results,
        "median": medians,
        "improvement_over_ba": 1.0 - medians["full"] / medians["ba"],
        "ordered": medians["full"] < medians["ba_ss"] < medians["ba"],
    }
    return summary


def temporal_trend(bundle, base_cfg: Optional[TemporalConfig], seeds=(0, 1, 2, 3, 4)) -> dict:
    """Refined vs per-frame ACC-ERR across seeds; the trend statistic is the
    median of each column."""
    base_cfg = base_cfg or TemporalConfig()
    per_frame, refined = [], []
    for s in seeds:
        cfg = dataclasses.replace(base_cfg, seed=s)
        metrics = train_temporal(bundle, cfg)
        per_frame.append(metrics["acc_err"])
        refined.append(metrics["acc_err_refined"])
    return {
        "acc_err": per_frame,
        "acc_err_refined": refined,
        "median_acc_err": float(np.median(per_frame)),
        "median_acc_err_refined": float(np.median(refined)),
    }
