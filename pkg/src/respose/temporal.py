"""Temporal refinement over frozen per-frame predictions.

A causal 2-layer GRU reads per-frame backbone features; a 3-layer MLP maps
its hidden states to parameter residuals added to the per-frame estimates.
The MLP's final layer starts at zero, so refinement begins as the identity.
A GRU motion discriminator scores pose (theta) sequences and trains with the
least-squares GAN objective; the refiner receives its generator term on top
of supervised parameter error.

Sequences are synthesized: two sampled poses sharing a shape are eased into
each other over T frames and rendered at a drawn low resolution.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import arrayio
from .backbone import select_range
from .body_model import BodyModelDefinition, BodyParams, joints3d, smpl_forward
from .dataset import sample_params, sample_rng
from .errors import CheckpointError, GenerationError, InvalidArgumentError
from .evaluation import PoseBundle, acceleration_metrics
from .rendering import render_pose_image
from .resample import resample_cubic

_TAG_SEQ = 21

TEMPORAL_KIND = "temporal_checkpoint"


@dataclass(frozen=True)
class TemporalConfig:
    seq_length: int = 16
    num_sequences: int = 40
    holdout_sequences: int = 10
    hidden: int = 128
    layers: int = 2
    mlp_hidden: int = 128
    disc_hidden: int = 64
    total_steps: int = 300
    batch_size: int = 8
    learning_rate: float = 1e-3
    adv_weight: float = 0.05
    min_res: int = 28
    max_res: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.seq_length < 3:
            raise InvalidArgumentError("seq_length must be >= 3")
        if self.holdout_sequences >= self.num_sequences:
            raise InvalidArgumentError("holdout must be smaller than num_sequences")
        if not 4 <= self.min_res <= self.max_res:
            raise InvalidArgumentError("bad sequence resolution bounds")


class TemporalRefiner(nn.Module):
    """GRU + MLP residual head over per-frame features; identity at init."""

    def __init__(self, feature_dim: int, param_dim: int, cfg: TemporalConfig):
        super().__init__()
        self.gru = nn.GRU(feature_dim, cfg.hidden, num_layers=cfg.layers, batch_first=True)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.hidden, cfg.mlp_hidden),
            nn.ReLU(),
            nn.Linear(cfg.mlp_hidden, cfg.mlp_hidden),
            nn.ReLU(),
            nn.Linear(cfg.mlp_hidden, param_dim),
        )
        last = self.mlp[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    def forward(self, features: torch.Tensor, base_params: torch.Tensor) -> torch.Tensor:
        """features (B, T, D) or (T, D); base_params matching (B, T, P)."""
        single = features.ndim == 2
        if single:
            features = features[None]
            base_params = base_params[None]
        hidden, _ = self.gru(features)
        refined = base_params + self.mlp(hidden)
        return refined[0] if single else refined


class MotionDiscriminator(nn.Module):
    """GRU over theta sequences; final hidden state scores realism."""

    def __init__(self, theta_dim: int, hidden: int = 64):
        super().__init__()
        self.gru = nn.GRU(theta_dim, hidden, batch_first=True)
        self.head = nn.Linear(hidden, 1)

    def forward(self, theta_seq: torch.Tensor) -> torch.Tensor:
        _, h = self.gru(theta_seq)
        return self.head(h[-1]).squeeze(-1)


def lsgan_disc_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """(mean (D(real) - 1)^2 + mean D(fake)^2) / 2; fake must be detached by
    the caller if it should not backprop into the generator."""
    return 0.5 * ((real_scores - 1.0).pow(2).mean() + fake_scores.pow(2).mean())


def lsgan_gen_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return (fake_scores - 1.0).pow(2).mean()


@dataclass
class SequenceSample:
    frames: np.ndarray        # (T, 3, S, S) canonical-size images
    gt_params: np.ndarray     # (T, Dp)
    gt_joints: np.ndarray     # (T, K, 3)
    source_res: int


def _smoothstep(u: np.ndarray) -> np.ndarray:
    return 3.0 * u**2 - 2.0 * u**3


def make_sequence(
    model: BodyModelDefinition,
    cam,
    size: int,
    cfg: TemporalConfig,
    rng: np.random.Generator,
    max_tries: int = 100,
) -> SequenceSample:
    """Ease between two sampled poses (shared shape) and render each frame at
    a low native resolution, then upsample to the canonical size."""
    t_frames = cfg.seq_length
    for _ in range(max_tries):
        a = sample_params(model, cam, size, rng)
        b = sample_params(model, cam, size, rng)
        beta = a.beta
        s = _smoothstep(np.linspace(0.0, 1.0, t_frames))
        theta = (1 - s)[:, None] * a.theta[None] + s[:, None] * b.theta[None]
        delta = (1 - s)[:, None] * a.delta[None] + s[:, None] * b.delta[None]
        verts = smpl_forward(model, np.repeat(beta[None], t_frames, 0), theta)
        if (verts[..., 2] + delta[:, None, 2]).min() <= 0.1:
            continue
        joints = joints3d(model, verts)
        res = int(rng.integers(cfg.min_res, cfg.max_res + 1))
        frames = np.empty((t_frames, 3, size, size), dtype=np.float32)
        for t in range(t_frames):
            params_t = BodyParams(beta=beta, theta=theta[t], delta=delta[t])
            low = render_pose_image(model, params_t, res, _scaled_cam(cam, size, res))
            frames[t] = resample_cubic(low, size)
        gt_params = np.concatenate(
            [np.repeat(beta[None], t_frames, 0), theta, delta], axis=1
        )
        return SequenceSample(frames, gt_params.astype(np.float32), joints, res)
    raise GenerationError(f"no valid sequence after {max_tries} tries")


def _scaled_cam(cam, size: int, res: int):
    from .geometry import CameraIntrinsics

    scale = res / size
    return CameraIntrinsics(
        focal_length=cam.focal_length * scale,
        principal_point=((res - 1) / 2.0, (res - 1) / 2.0),
    )


def extract_features(
    bundle: PoseBundle, seq: SequenceSample
) -> tuple[np.ndarray, np.ndarray]:
    """Frozen per-frame forward: (features (T, D), base params (T, Dp))."""
    rng_index = select_range(seq.source_res, bundle.backbone_cfg.range_bounds)
    with torch.no_grad():
        x = torch.from_numpy(seq.frames)
        ranges = torch.full((x.shape[0],), rng_index, dtype=torch.long)
        phi = bundle.posenet.backbone(x, ranges)
        params = bundle.posenet.regressor(phi)
    return phi.numpy(), params.numpy()


FEATURES_DIR = "features"


def build_sequence_cache(
    bundle: PoseBundle, cfg: TemporalConfig, out_dir: Optional[str] = None
) -> list[dict[str, np.ndarray]]:
    """Synthesize sequences and extract frozen features, optionally caching
    each to disk in the array-directory format."""
    size = bundle.backbone_cfg.canonical_size
    cache = []
    for i in range(cfg.num_sequences):
        rng = sample_rng(cfg.seed, _TAG_SEQ, i)
        seq = make_sequence(bundle.model, bundle.cam, size, cfg, rng)
        phi, base = extract_features(bundle, seq)
        entry = {
            "features": phi,
            "base_params": base,
            "gt_params": seq.gt_params,
            "gt_joints": seq.gt_joints.astype(np.float32),
            "source_res": np.array([seq.source_res], dtype=np.float32),
        }
        if out_dir:
            arrayio.write_array_dir(os.path.join(out_dir, FEATURES_DIR, f"{i:03d}"), entry)
        cache.append(entry)
    return cache


def joints_from_params(model: BodyModelDefinition, params: np.ndarray) -> np.ndarray:
    """(T, Dp) parameter rows to (T, K, 3) body-frame joints."""
    beta = params[:, :10].astype(np.float64)
    theta = params[:, 10 : 10 + 3 * model.num_joints].astype(np.float64)
    return joints3d(model, smpl_forward(model, beta, theta))


def evaluate_sequences(
    model: BodyModelDefinition,
    refiner: Optional[TemporalRefiner],
    entries: list[dict[str, np.ndarray]],
) -> dict[str, float]:
    """Mean ACC / ACC-ERR of per-frame (and, if given, refined) predictions."""
    accs, acc_errs = [], []
    r_accs, r_acc_errs = [], []
    for e in entries:
        gt_j = e["gt_joints"].astype(np.float64)
        base_j = joints_from_params(model, e["base_params"])
        acc, acc_err = acceleration_metrics(base_j, gt_j)
        accs.append(acc)
        acc_errs.append(acc_err)
        if refiner is not None:
            with torch.no_grad():
                refined = refiner(
                    torch.from_numpy(e["features"]), torch.from_numpy(e["base_params"])
                ).numpy()
            ref_j = joints_from_params(model, refined)
            acc, acc_err = acceleration_metrics(ref_j, gt_j)
            r_accs.append(acc)
            r_acc_errs.append(acc_err)
    out = {
        "acc": float(np.mean(accs)),
        "acc_err": float(np.mean(acc_errs)),
        "n": len(entries),
    }
    if refiner is not None:
        out["acc_refined"] = float(np.mean(r_accs))
        out["acc_err_refined"] = float(np.mean(r_acc_errs))
    return out


def train_temporal(
    bundle: PoseBundle,
    cfg: TemporalConfig,
    out_dir: Optional[str] = None,
    cache: Optional[list[dict[str, np.ndarray]]] = None,
) -> dict[str, float]:
    """Train the refiner + discriminator on cached sequences; returns holdout
    ACC metrics before/after refinement. The pose net is never touched."""
    cfg.validate()
    if cache is None:
        cache = build_sequence_cache(bundle, cfg, out_dir)
    train_set = cache[: cfg.num_sequences - cfg.holdout_sequences]
    holdout = cache[cfg.num_sequences - cfg.holdout_sequences :]

    feature_dim = train_set[0]["features"].shape[1]
    param_dim = train_set[0]["base_params"].shape[1]
    theta_dim = 3 * bundle.model.num_joints

    torch.manual_seed(cfg.seed)
    refiner = TemporalRefiner(feature_dim, param_dim, cfg)
    disc = MotionDiscriminator(theta_dim, cfg.disc_hidden)
    opt_g = torch.optim.Adam(refiner.parameters(), lr=cfg.learning_rate)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.learning_rate)

    feats = torch.from_numpy(np.stack([e["features"] for e in train_set]))
    base = torch.from_numpy(np.stack([e["base_params"] for e in train_set]))
    gt = torch.from_numpy(np.stack([e["gt_params"] for e in train_set]))
    theta_slice = slice(10, 10 + theta_dim)

    for step in range(cfg.total_steps):
        rng = sample_rng(cfg.seed, _TAG_SEQ + 1, step)
        idx = torch.from_numpy(rng.integers(0, feats.shape[0], size=cfg.batch_size))
        f, b, g = feats[idx], base[idx], gt[idx]
        refined = refiner(f, b)

        # discriminator sees real smooth motion vs refined motion
        real = g[..., theta_slice]
        fake = refined[..., theta_slice]
        d_loss = lsgan_disc_loss(disc(real), disc(fake.detach()))
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()

        g_loss = (refined - g).pow(2).mean() + cfg.adv_weight * lsgan_gen_loss(disc(fake))
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()

    metrics = evaluate_sequences(bundle.model, refiner, holdout)
    if out_dir:
        save_temporal(os.path.join(out_dir, "temporal_checkpoint"), refiner, disc, cfg, bundle, metrics)
    return metrics


def save_temporal(
    path: str,
    refiner: TemporalRefiner,
    disc: MotionDiscriminator,
    cfg: TemporalConfig,
    bundle: PoseBundle,
    metrics: dict[str, float],
) -> None:
    arrays = {}
    for name, p in refiner.named_parameters():
        arrays[f"refiner.{name}"] = p.detach().numpy()
    for name, p in disc.named_parameters():
        arrays[f"disc.{name}"] = p.detach().numpy()
    arrayio.write_packed(
        path,
        arrays,
        extra={
            "kind": TEMPORAL_KIND,
            "temporal": asdict(cfg),
            "body": bundle.meta["body"],
            "metrics": metrics,
        },
    )


def load_temporal(path: str, feature_dim: int, param_dim: int, theta_dim: int):
    arrays, extra = arrayio.read_packed(path)
    if extra.get("kind") != TEMPORAL_KIND:
        raise CheckpointError(f"not a temporal checkpoint: kind={extra.get('kind')!r}")
    cfg = TemporalConfig(**extra["temporal"])
    refiner = TemporalRefiner(feature_dim, param_dim, cfg)
    disc = MotionDiscriminator(theta_dim, cfg.disc_hidden)
    with torch.no_grad():
        for name, p in refiner.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"refiner.{name}"]))
        for name, p in disc.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"disc.{name}"]))
    return refiner, disc, cfg, extra
