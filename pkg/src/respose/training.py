"""Progressive multi-resolution training.

Each step draws a batch, augments it (noise, per-channel jitter, in-plane
rotation, horizontal flip, with 2D and 3D labels co-transformed exactly),
builds the active pyramid levels, and pushes every (sample, range) pair
through the gated backbone in a single fused forward. The combined loss is
optimized with Adam; detached top-resolution embeddings feed the FIFO queue
after the update.

All randomness is keyed by (seed, purpose, step) so resuming from a
checkpoint replays the exact remaining stream with no RNG state on disk.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.ndimage
import torch
from scipy.spatial.transform import Rotation

from . import arrayio
from .backbone import BackboneConfig, PoseNet, make_pose_net
from .body_model import BodyModelDefinition, joints3d, rodrigues, smpl_forward
from .dataset import SyntheticDataset, build_pyramid, sample_rng
from .errors import CheckpointError, InvalidArgumentError, TrainingComplete, TrainingDiverged
from .geometry import CameraIntrinsics, project_clamped
from .losses import (
    FeatureQueue,
    GroundTruthBatch,
    LossConfig,
    ProjectionHead,
    ResolutionOutputs,
    queue_update,
    total_loss,
)

_TAG_STEP = 11
_TAG_INIT = 12

LOG_COLUMNS = ("step", "stage", "L_b", "L_s", "L_f", "total")
CHECKPOINT_KIND = "pose_checkpoint"


@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.02
    jitter: float = 0.1
    rotation_deg: float = 15.0
    flip_prob: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 900
    batch_size: int = 4
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # list of (active range count, step budget); None = thirds of the budget
    # over {1,2}, {1..4}, then all ranges
    stages: Optional[tuple[tuple[int, int], ...]] = None
    freeze_alpha: bool = False
    checkpoint_every: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)


def default_stages(total_steps: int, num_ranges: int = 5) -> tuple[tuple[int, int], ...]:
    third = total_steps // 3
    return (
        (min(2, num_ranges), third),
        (min(4, num_ranges), third),
        (num_ranges, total_steps - 2 * third),
    )


def validate_stages(stages: Sequence[tuple[int, int]], num_ranges: int) -> None:
    if not stages:
        raise InvalidArgumentError("stages must be non-empty")
    prev = 0
    for count, steps in stages:
        if not 1 <= count <= num_ranges:
            raise InvalidArgumentError(f"stage range count {count} outside [1, {num_ranges}]")
        if count < prev:
            raise InvalidArgumentError("stage range counts must be nondecreasing")
        if steps < 0:
            raise InvalidArgumentError("stage step budgets must be >= 0")
        prev = count


def progressive_schedule(step: int, stages: Sequence[tuple[int, int]]) -> tuple[int, ...]:
    """Active 1-based range indices for a step; raises TrainingComplete past
    the configured budget."""
    if step < 0:
        raise InvalidArgumentError("step must be >= 0")
    cum = 0
    for count, steps in stages:
        cum += steps
        if step < cum:
            return tuple(range(1, count + 1))
    raise TrainingComplete(f"step {step} is past the configured budget of {cum}")


def stage_of(step: int, stages: Sequence[tuple[int, int]]) -> int:
    cum = 0
    for idx, (_, steps) in enumerate(stages):
        cum += steps
        if step < cum:
            return idx + 1
    raise TrainingComplete(f"step {step} is past the configured budget of {cum}")


@dataclass
class AugmentDraw:
    noise: Optional[np.ndarray]
    jitter: np.ndarray
    angle_deg: float
    flip: bool


def draw_augment(rng: np.random.Generator, cfg: AugmentConfig, image_shape) -> AugmentDraw:
    noise = rng.normal(0.0, 1.0, size=image_shape) if cfg.noise_sigma > 0 else None
    jitter = rng.uniform(-cfg.jitter, cfg.jitter, size=3)
    angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    flip = bool(rng.uniform() < cfg.flip_prob)
    return AugmentDraw(noise=noise, jitter=jitter, angle_deg=angle, flip=flip)


def _rotate_image(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate image content so that a point at p maps to R(p - c) + c in
    (x, y) pixel coordinates, c the canvas center."""
    size = image.shape[-1]
    c = (size - 1) / 2.0
    rad = np.deg2rad(angle_deg)
    cs, sn = np.cos(rad), np.sin(rad)
    # inverse map in (row=y, col=x) order for scipy's pull-based resampling
    inv_yx = np.array([[cs, -sn], [sn, cs]])
    mat = np.zeros((3, 3))
    mat[0, 0] = 1.0
    mat[1:, 1:] = inv_yx
    center = np.array([0.0, c, c])
    offset = center - mat @ center
    return scipy.ndimage.affine_transform(
        image, mat, offset=offset, order=1, mode="constant", cval=0.0, prefilter=False
    ).astype(np.float32)


def _rotate_points(points: np.ndarray, angle_deg: float, size: int) -> np.ndarray:
    c = (size - 1) / 2.0
    rad = np.deg2rad(angle_deg)
    cs, sn = np.cos(rad), np.sin(rad)
    rot = np.array([[cs, -sn], [sn, cs]])
    return (points - c) @ rot.T + c


def augment(
    image: np.ndarray,
    gt_2d: np.ndarray,
    rng: np.random.Generator,
    cfg: AugmentConfig,
    mirror_map: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Photometric + geometric augmentation of one sample.

    Applies, in order: additive Gaussian noise, per-channel multiplicative
    jitter, in-plane rotation about the canvas center, horizontal flip (with
    the left/right joint swap from mirror_map). With all magnitudes zero and
    flip probability zero this is the identity.
    """
    draw = draw_augment(rng, cfg, image.shape)
    out_img, out_kp = _apply_augment(image, gt_2d, draw, cfg, mirror_map)
    return out_img, out_kp


def _apply_augment(image, gt_2d, draw: AugmentDraw, cfg: AugmentConfig, mirror_map):
    img = np.asarray(image, dtype=np.float32)
    kp = np.asarray(gt_2d, dtype=np.float64).copy()
    size = img.shape[-1]
    touched = False
    if draw.noise is not None:
        img = img + cfg.noise_sigma * draw.noise.astype(np.float32)
        touched = True
    if cfg.jitter > 0:
        img = img * (1.0 + draw.jitter.astype(np.float32))[:, None, None]
        touched = True
    if touched:
        img = np.clip(img, 0.0, 1.0)
    if draw.angle_deg != 0.0:
        img = _rotate_image(img, draw.angle_deg)
        kp = _rotate_points(kp, draw.angle_deg, size)
    if draw.flip:
        img = img[:, :, ::-1].copy()
        kp = kp[mirror_map]
        kp[:, 0] = (size - 1) - kp[:, 0]
    return img.astype(np.float32), kp


_MIRROR_X = np.array([-1.0, 1.0, 1.0])
_AA_FLIP = np.array([1.0, -1.0, -1.0])


def _apply_augment_3d(
    x3d: np.ndarray,
    theta: np.ndarray,
    delta: np.ndarray,
    draw: AugmentDraw,
    mirror_map: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Co-transform 3D labels so they match the augmented pixels exactly.

    In-plane image rotation about the principal point equals a camera-frame
    roll; a horizontal flip equals the world mirror x -> -x combined with the
    left/right joint swap.
    """
    x3d = np.asarray(x3d, dtype=np.float64).copy()
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3).copy()
    delta = np.asarray(delta, dtype=np.float64).copy()
    if draw.angle_deg != 0.0:
        rad = np.deg2rad(draw.angle_deg)
        cs, sn = np.cos(rad), np.sin(rad)
        rz = np.array([[cs, -sn, 0.0], [sn, cs, 0.0], [0.0, 0.0, 1.0]])
        x3d = x3d @ rz.T
        delta = rz @ delta
        root = rodrigues(theta[0])
        theta[0] = Rotation.from_matrix(rz @ root).as_rotvec()
    if draw.flip:
        x3d = x3d[mirror_map] * _MIRROR_X
        delta = delta * _MIRROR_X
        theta = theta[mirror_map] * _AA_FLIP
    return x3d, theta.reshape(-1), delta


def augment_record(
    record: dict[str, np.ndarray],
    draw: AugmentDraw,
    cfg: AugmentConfig,
    mirror_map: np.ndarray,
) -> dict[str, np.ndarray]:
    img, kp = _apply_augment(record["image"], record["keypoints2d"], draw, cfg, mirror_map)
    x3d, theta, delta = _apply_augment_3d(
        record["joints3d"], record["theta"], record["delta"], draw, mirror_map
    )
    return {
        "image": img,
        "keypoints2d": kp,
        "joints3d": x3d,
        "beta": record["beta"],
        "theta": theta,
        "delta": delta,
        "has3d": record["has3d"],
    }


class Trainer:
    """Owns the networks, optimizer, queue, and the step loop."""

    def __init__(
        self,
        data: SyntheticDataset,
        train_cfg: TrainConfig,
        loss_cfg: LossConfig,
        backbone_cfg: Optional[BackboneConfig] = None,
        out_dir: Optional[str] = None,
    ):
        self.data = data
        self.train_cfg = train_cfg
        self.loss_cfg = loss_cfg
        self.backbone_cfg = backbone_cfg or BackboneConfig(
            canonical_size=data.manifest.canonical_size
        )
        if self.backbone_cfg.canonical_size != data.manifest.canonical_size:
            raise InvalidArgumentError("backbone canonical size must match the dataset")
        self.stages = train_cfg.stages or default_stages(
            train_cfg.total_steps, self.backbone_cfg.num_ranges
        )
        validate_stages(self.stages, self.backbone_cfg.num_ranges)
        self.out_dir = out_dir
        self.model = data.model
        self.cam = data.cam

        torch.manual_seed(train_cfg.seed)
        self.posenet = make_pose_net(self.model, self.backbone_cfg, self.cam)
        self.proj = ProjectionHead(self.backbone_cfg.feature_dim)
        if train_cfg.freeze_alpha:
            self.posenet.backbone.alpha.requires_grad_(False)
        self.trainable = [
            p
            for p in list(self.posenet.parameters()) + list(self.proj.parameters())
            if p.requires_grad
        ]
        self.optim = torch.optim.Adam(
            self.trainable,
            lr=train_cfg.learning_rate,
            betas=(train_cfg.beta1, train_cfg.beta2),
            eps=train_cfg.adam_eps,
        )
        self.queue = FeatureQueue(loss_cfg.queue_capacity, self.backbone_cfg.feature_dim)
        self.step_idx = 0

    # ---------------------------------------------------------------- steps

    def _make_batch(self, ranges: tuple[int, ...], rng: np.random.Generator):
        cfg = self.train_cfg
        bounds = self.backbone_cfg.range_bounds
        idx = rng.integers(0, len(self.data), size=cfg.batch_size)
        per_range_images = {r: [] for r in ranges}
        gt_kp, gt_x3d, gt_beta, gt_theta, gt_has3d = [], [], [], [], []
        for i in idx:
            rec = self.data.sample(int(i))
            draw = draw_augment(rng, cfg.augment, rec["image"].shape)
            rec = augment_record(rec, draw, cfg.augment, self.model.mirror_map)
            pyramid, _ = _active_pyramid(rec["image"], bounds, rng, ranges)
            for r in ranges:
                per_range_images[r].append(pyramid[r])
            gt_kp.append(rec["keypoints2d"])
            gt_x3d.append(rec["joints3d"])
            gt_beta.append(rec["beta"])
            gt_theta.append(rec["theta"])
            gt_has3d.append(float(rec["has3d"]))
        images = {
            r: torch.from_numpy(np.stack(per_range_images[r])) for r in ranges
        }
        # keypoints are compared in canvas-fraction units so the 2D term does
        # not drown the parameter and 3D-joint terms
        size = float(self.backbone_cfg.canonical_size)
        gt = GroundTruthBatch(
            keypoints2d=torch.as_tensor(np.stack(gt_kp) / size, dtype=torch.float32),
            joints3d=torch.as_tensor(np.stack(gt_x3d), dtype=torch.float32),
            beta=torch.as_tensor(np.stack(gt_beta), dtype=torch.float32),
            theta=torch.as_tensor(np.stack(gt_theta), dtype=torch.float32),
            has3d=torch.as_tensor(gt_has3d, dtype=torch.float32),
        )
        return images, gt

    def forward_ranges(
        self, images: dict[int, torch.Tensor], ranges: tuple[int, ...]
    ) -> ResolutionOutputs:
        """One fused backbone pass over every (sample, range) pair."""
        batch = images[ranges[0]].shape[0]
        big = torch.cat([images[r] for r in ranges], dim=0)
        range_vec = torch.cat(
            [torch.full((batch,), r, dtype=torch.long) for r in ranges]
        )
        params_all, phi_all = self.posenet(big, range_vec)
        embed_all = self.proj(phi_all)
        beta, theta, delta = self.posenet.split(params_all)
        verts = smpl_forward(self.model, beta, theta)
        x3d = joints3d(self.model, verts)
        kp = project_clamped(x3d, delta, self.cam) / self.backbone_cfg.canonical_size
        params_d, joints_d, kp_d, phi_d, emb_d = {}, {}, {}, {}, {}
        for n, r in enumerate(ranges):
            sl = slice(n * batch, (n + 1) * batch)
            params_d[r] = params_all[sl]
            joints_d[r] = x3d[sl]
            kp_d[r] = kp[sl]
            phi_d[r] = phi_all[sl]
            emb_d[r] = embed_all[sl]
        return ResolutionOutputs(
            ranges=ranges,
            params=params_d,
            joints=joints_d,
            keypoints=kp_d,
            features=phi_d,
            embeddings=emb_d,
        )

    def run_step(self) -> dict[str, float]:
        ranges = progressive_schedule(self.step_idx, self.stages)
        rng = sample_rng(self.train_cfg.seed, _TAG_STEP, self.step_idx)
        images, gt = self._make_batch(ranges, rng)
        outputs = self.forward_ranges(images, ranges)
        loss, breakdown = total_loss(outputs, gt, self.queue, self.loss_cfg)
        for name, value in breakdown.items():
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss component {name} became non-finite at step {self.step_idx}")
        self.optim.zero_grad(set_to_none=True)
        loss.backward()
        self.optim.step()
        queue_update(self.queue, outputs.embeddings[ranges[0]].detach())
        breakdown["step"] = self.step_idx
        breakdown["stage"] = stage_of(self.step_idx, self.stages)
        self.step_idx += 1
        return breakdown

    def train(self, log_path: Optional[str] = None) -> None:
        """Run from the current step to the configured budget, appending one
        CSV row per step and checkpointing per config."""
        total = sum(s for _, s in self.stages)
        writer = None
        fh = None
        if log_path:
            exists = os.path.exists(log_path) and os.path.getsize(log_path) > 0
            fh = open(log_path, "a", newline="")
            writer = csv.writer(fh)
            if not exists:
                writer.writerow(LOG_COLUMNS)
        try:
            while self.step_idx < total:
                row = self.run_step()
                if writer:
                    writer.writerow(
                        [
                            row["step"],
                            row["stage"],
                            _fmt(row["L_b"]),
                            _fmt(row["L_s"]),
                            _fmt(row["L_f"]),
                            _fmt(row["total"]),
                        ]
                    )
                every = self.train_cfg.checkpoint_every
                if self.out_dir and every and self.step_idx % every == 0 and self.step_idx < total:
                    save_checkpoint(os.path.join(self.out_dir, "checkpoint"), self)
            if self.out_dir:
                save_checkpoint(os.path.join(self.out_dir, "checkpoint"), self)
        finally:
            if fh:
                fh.close()

    # ------------------------------------------------------------- metadata

    def metadata(self) -> dict:
        return {
            "kind": CHECKPOINT_KIND,
            "step": self.step_idx,
            "body": {
                "body_seed": self.data.manifest.body_seed,
                "num_vertices": self.data.manifest.num_vertices,
                "num_joints": self.data.manifest.num_joints,
            },
            "camera": {
                "focal": self.data.manifest.focal,
                "canonical_size": self.data.manifest.canonical_size,
            },
            "backbone": {
                "widths": list(self.backbone_cfg.widths),
                "blocks_per_stage": self.backbone_cfg.blocks_per_stage,
                "canonical_size": self.backbone_cfg.canonical_size,
                "range_bounds": list(self.backbone_cfg.range_bounds),
            },
            "loss": asdict(self.loss_cfg),
            "train": _train_cfg_dict(self.train_cfg),
            "stages": [list(s) for s in self.stages],
        }


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _train_cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    if d.get("stages") is not None:
        d["stages"] = [list(s) for s in d["stages"]]
    return d


def _active_pyramid(image, bounds, rng, ranges):
    """Like build_pyramid but only resamples the requested levels; the random
    source draws still cover every level so streams stay aligned."""
    from .resample import resample_cubic

    size = image.shape[-1]
    images = {1: np.asarray(image, dtype=np.float32)}
    sources = {1: size}
    want = set(ranges)
    for p in range(2, len(bounds) + 1):
        lo, hi = bounds[p - 1], bounds[p - 2]
        src = int(rng.integers(lo, hi))
        sources[p] = src
        if p in want:
            images[p] = resample_cubic(resample_cubic(image, src), size)
    return images, sources


# ------------------------------------------------------------- checkpointing


def _collect_tensors(trainer: Trainer) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    for name, p in trainer.posenet.named_parameters():
        key = "fusion.alpha" if name == "backbone.alpha" else f"net.{name}"
        out[key] = p
    for name, b in trainer.posenet.named_buffers():
        out[f"net.{name}"] = b
    for name, p in trainer.proj.named_parameters():
        out[f"proj.{name}"] = p
    return out


def _param_names(trainer: Trainer) -> list[tuple[str, torch.Tensor]]:
    names = []
    for name, p in trainer.posenet.named_parameters():
        key = "fusion.alpha" if name == "backbone.alpha" else f"net.{name}"
        names.append((key, p))
    for name, p in trainer.proj.named_parameters():
        names.append((f"proj.{name}", p))
    return names


def save_checkpoint(path: str, trainer: Trainer) -> None:
    arrays: dict[str, np.ndarray] = {}
    for key, t in _collect_tensors(trainer).items():
        arrays[key] = t.detach().numpy()
    for key, p in _param_names(trainer):
        state = trainer.optim.state.get(p)
        if state:
            arrays[f"optim.{key}.exp_avg"] = state["exp_avg"].numpy()
            arrays[f"optim.{key}.exp_avg_sq"] = state["exp_avg_sq"].numpy()
            arrays[f"optim.{key}.step"] = np.asarray(state["step"], dtype=np.float32)
    arrays["queue.entries"] = trainer.queue.state().numpy()
    arrayio.write_packed(path, arrays, extra=trainer.metadata())


def load_checkpoint_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    arrays, extra = arrayio.read_packed(path)
    if extra.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"not a pose checkpoint: kind={extra.get('kind')!r}")
    return arrays, extra


def restore_trainer(trainer: Trainer, path: str) -> None:
    """Load a checkpoint into a freshly built trainer; bit-exact resume."""
    arrays, extra = load_checkpoint_arrays(path)
    with torch.no_grad():
        for key, t in _collect_tensors(trainer).items():
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing tensor {key}")
            src = arrays[key]
            if tuple(src.shape) != tuple(t.shape):
                raise CheckpointError(
                    f"tensor {key} shape mismatch: {src.shape} vs {tuple(t.shape)}"
                )
            t.copy_(torch.from_numpy(src))
    for key, p in _param_names(trainer):
        k = f"optim.{key}.exp_avg"
        if k in arrays:
            trainer.optim.state[p] = {
                "step": torch.as_tensor(arrays[f"optim.{key}.step"], dtype=torch.float32).reshape(()),
                "exp_avg": torch.from_numpy(arrays[k]).clone(),
                "exp_avg_sq": torch.from_numpy(arrays[f"optim.{key}.exp_avg_sq"]).clone(),
            }
    trainer.queue.load_state(torch.from_numpy(arrays["queue.entries"]))
    trainer.step_idx = int(extra["step"])
