"""Training objectives.

Three components, combined as total = L_b + lambda_s * L_s + lambda_f * L_f:

* basic loss L_b: squared parameter/joint error on 3D-labeled samples plus
  squared reprojection error on everything, per resolution range.
* self-supervision L_s: for every active range pair (i, j) with j lower
  resolution than i, pull the j-branch outputs toward the detached i-branch
  outputs, weighted by the range gap (j - i). Gradients flow only into the
  lower-resolution branch.
* feature loss L_f: same directional pairing on projected embeddings, scored
  by an InfoNCE term against a FIFO queue of past embeddings.

All per-term reductions are means over elements (and over the batch), so
magnitudes are comparable across joint counts and batch sizes; range terms
are summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and contrastive settings.

    queue_capacity defaults to the desk scale (512); the reference large-scale
    configuration uses 8192.
    """

    lambda1: float = 5.0
    lambda2: float = 5.0
    lambda_s: float = 0.1
    lambda_f: float = 0.1
    tau: float = 0.1
    queue_capacity: int = 512


@dataclass
class ResolutionOutputs:
    """Per-range network outputs for one batch.

    ranges: active 1-based range indices, ascending (1 = highest resolution).
    Each dict maps a range index to a batched tensor.
    """

    ranges: tuple[int, ...]
    params: dict[int, torch.Tensor]
    joints: dict[int, torch.Tensor]
    keypoints: dict[int, torch.Tensor]
    features: dict[int, torch.Tensor]
    embeddings: dict[int, torch.Tensor]

    def __post_init__(self):
        if tuple(sorted(self.ranges)) != tuple(self.ranges):
            raise InvalidArgumentError("ranges must be sorted ascending")
        for r in self.ranges:
            if r not in self.params:
                raise InvalidArgumentError(f"missing outputs for range {r}")


@dataclass
class GroundTruthBatch:
    keypoints2d: torch.Tensor                 # (B, K, 2)
    joints3d: Optional[torch.Tensor] = None   # (B, K, 3)
    beta: Optional[torch.Tensor] = None       # (B, 10)
    theta: Optional[torch.Tensor] = None      # (B, 3K)
    has3d: Optional[torch.Tensor] = None      # (B,) float mask


def ss_weight(i: int, j: int, num_ranges: int = 5) -> float:
    """Directional pair weight: (j - i) when j is a lower-resolution range
    than i, else 0."""
    if not (1 <= i <= num_ranges and 1 <= j <= num_ranges):
        raise InvalidArgumentError(f"range indices must lie in [1, {num_ranges}], got ({i}, {j})")
    return float(j - i) if j > i else 0.0


def _mean_sq(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sample mean over all non-batch elements of (a - b)^2."""
    return (a - b).pow(2).flatten(start_dim=1).mean(dim=1)


def basic_loss(
    outputs: ResolutionOutputs,
    gt: GroundTruthBatch,
    cfg: LossConfig,
) -> torch.Tensor:
    """Supervised loss summed over active ranges.

    3D terms (parameters and joints) are masked per sample by has3d; the 2D
    reprojection term applies to every sample.
    """
    some = outputs.keypoints[outputs.ranges[0]]
    batch = some.shape[0]
    if gt.has3d is None:
        has3d = torch.zeros(batch, dtype=some.dtype)
    else:
        has3d = torch.as_tensor(gt.has3d, dtype=some.dtype)
    use3d = gt.joints3d is not None and gt.beta is not None and gt.theta is not None
    gt_params = torch.cat([gt.beta, gt.theta], dim=-1) if use3d else None

    total = some.new_zeros(())
    for r in outputs.ranges:
        term = cfg.lambda2 * _mean_sq(outputs.keypoints[r], gt.keypoints2d)
        if use3d:
            k3 = gt.theta.shape[-1]
            pred_params = outputs.params[r][..., : 10 + k3]
            term = term + has3d * (
                _mean_sq(pred_params, gt_params)
                + cfg.lambda1 * _mean_sq(outputs.joints[r], gt.joints3d)
            )
        total = total + term.mean()
    return total


def self_supervision_loss(outputs: ResolutionOutputs) -> torch.Tensor:
    """Directional output-consistency loss over active range pairs.

    The higher-resolution side is detached, so each pair only trains the
    lower-resolution branch.
    """
    ranges = outputs.ranges
    anchor = outputs.params[ranges[0]]
    total = anchor.new_zeros(())
    for a, i in enumerate(ranges):
        for j in ranges[a + 1 :]:
            w = ss_weight(i, j, num_ranges=max(ranges))
            diff = outputs.params[i].detach() - outputs.params[j]
            total = total + w * diff.pow(2).mean()
    return total


class ProjectionHead(nn.Module):
    """Two-layer MLP mapping backbone features to unit-norm embeddings.

    A zero pre-normalization vector maps to the first basis vector instead of
    dividing by zero.
    """

    def __init__(self, feature_dim: int, embed_dim: int | None = None, hidden: int | None = None):
        super().__init__()
        embed_dim = embed_dim or feature_dim
        hidden = hidden or feature_dim
        self.net = nn.Sequential(
            nn.Linear(feature_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, embed_dim),
        )
        basis = torch.zeros(embed_dim)
        basis[0] = 1.0
        self.register_buffer("fallback", basis)

    def forward(self, phi: torch.Tensor) -> torch.Tensor:
        h = self.net(phi)
        norm = h.norm(dim=-1, keepdim=True)
        unit = h / norm.clamp_min(1e-12)
        return torch.where(norm > 1e-12, unit, self.fallback.to(h.dtype))


class FeatureQueue:
    """Fixed-capacity FIFO of detached unit-norm embeddings.

    Pushing a batch appends in order and evicts the oldest entries beyond
    capacity. Entries never carry gradients.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 0:
            raise InvalidArgumentError("capacity must be >= 0")
        self.capacity = capacity
        self.dim = dim
        self._entries: list[torch.Tensor] = []

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, batch: torch.Tensor) -> None:
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise InvalidArgumentError(f"expected (B, {self.dim}) batch, got {tuple(batch.shape)}")
        if batch.shape[0] > self.capacity:
            raise InvalidArgumentError(
                f"batch of {batch.shape[0]} exceeds queue capacity {self.capacity}"
            )
        norms = batch.norm(dim=-1)
        if (norms - 1.0).abs().max() > 1e-5:
            raise InvalidArgumentError("queue entries must be unit norm")
        for row in batch.detach():
            self._entries.append(row.clone())
        if len(self._entries) > self.capacity:
            del self._entries[: len(self._entries) - self.capacity]

    def matrix(self, dtype: torch.dtype = torch.float32) -> Optional[torch.Tensor]:
        if not self._entries:
            return None
        return torch.stack(self._entries).to(dtype)

    def state(self) -> torch.Tensor:
        """Entries as an (L, dim) tensor for checkpointing (L may be 0)."""
        if not self._entries:
            return torch.zeros(0, self.dim)
        return torch.stack(self._entries)

    def load_state(self, entries: torch.Tensor) -> None:
        if entries.ndim != 2 or entries.shape[1] != self.dim or entries.shape[0] > self.capacity:
            raise InvalidArgumentError("bad queue state shape")
        self._entries = [row.clone() for row in entries]


def queue_update(queue: FeatureQueue, embeddings: torch.Tensor) -> FeatureQueue:
    """Enqueue a detached batch of embeddings, evicting FIFO-style."""
    queue.push(embeddings.detach())
    return queue


def contrastive_g(
    e_fixed: torch.Tensor,
    e_train: torch.Tensor,
    queue: FeatureQueue,
    tau: float,
) -> torch.Tensor:
    """InfoNCE score of e_train against the detached anchor e_fixed, with the
    queue as negatives: the (|Q|+1)-way softmax cross entropy whose positive
    logit is cos(e_fixed, e_train)/tau. Empty queue gives exactly 0.

    Accepts single vectors (D,) or batches (B, D); returns per-sample values
    reduced to the input's batch shape.
    """
    if tau <= 0:
        raise InvalidArgumentError(f"tau must be positive, got {tau}")
    e_fixed = e_fixed.detach()
    single = e_train.ndim == 1
    if single:
        e_fixed = e_fixed[None]
        e_train = e_train[None]
    pos = torch.cosine_similarity(e_fixed, e_train, dim=-1) / tau  # (B,)
    neg = queue.matrix(e_train.dtype)
    if neg is None:
        logits = pos[:, None]
    else:
        sim = torch.cosine_similarity(e_train[:, None, :], neg[None, :, :], dim=-1) / tau
        logits = torch.cat([pos[:, None], sim], dim=1)
    loss = torch.logsumexp(logits, dim=1) - logits[:, 0]
    return loss[0] if single else loss


def feature_loss(
    outputs: ResolutionOutputs, queue: FeatureQueue, cfg: LossConfig
) -> torch.Tensor:
    """Directional contrastive loss over active range pairs (batch mean)."""
    ranges = outputs.ranges
    anchor = outputs.embeddings[ranges[0]]
    total = anchor.new_zeros(())
    for a, i in enumerate(ranges):
        for j in ranges[a + 1 :]:
            w = ss_weight(i, j, num_ranges=max(ranges))
            g = contrastive_g(outputs.embeddings[i], outputs.embeddings[j], queue, cfg.tau)
            total = total + w * g.mean()
    return total


def total_loss(
    outputs: ResolutionOutputs,
    gt: GroundTruthBatch,
    queue: FeatureQueue,
    cfg: LossConfig,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Combined objective and a float breakdown for logging."""
    lb = basic_loss(outputs, gt, cfg)
    ls = self_supervision_loss(outputs)
    lf = feature_loss(outputs, queue, cfg)
    total = lb + cfg.lambda_s * ls + cfg.lambda_f * lf
    breakdown = {
        "L_b": float(lb.detach()),
        "L_s": float(ls.detach()),
        "L_f": float(lf.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown
