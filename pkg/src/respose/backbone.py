"""Resolution-aware feature extractor and iterative parameter regressor.

The backbone is a small residual conv net whose residual branches are scaled
by trainable per-resolution-range gains alpha[p, k] (one row per range, one
column per block). With alpha fixed at 1 the network is exactly the plain
residual baseline; rows are selected per sample, so a single forward can mix
samples assigned to different ranges.

Two fixed coordinate channels are stacked onto the input before the stem so
that the globally pooled features can carry positions (pooled products of a
coordinate map and a part activation are centroids); without them pooling
keeps only presence, which is useless for localization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .body_model import BodyModelDefinition
from .errors import InvalidArgumentError
from .geometry import CameraIntrinsics, unit_depth

DEFAULT_RANGE_BOUNDS = (224, 128, 64, 40, 24)


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    canonical_size: int = 224
    range_bounds: tuple[int, ...] = DEFAULT_RANGE_BOUNDS

    @property
    def num_ranges(self) -> int:
        return len(self.range_bounds)

    @property
    def num_blocks(self) -> int:
        return len(self.widths) * self.blocks_per_stage

    @property
    def feature_dim(self) -> int:
        # global average pooling over the last stage
        return self.widths[-1]


def select_range(resolution: int, bounds: tuple[int, ...] = DEFAULT_RANGE_BOUNDS) -> int:
    """Map a source resolution to its 1-based range index.

    bounds are descending; range 1 is resolutions at or above bounds[0], range
    i covers [bounds[i-1], bounds[i-2]). Resolutions below the last bound
    clamp to the last range with a warning.
    """
    if resolution <= 0:
        raise InvalidArgumentError(f"resolution must be positive, got {resolution}")
    if any(b2 >= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise InvalidArgumentError(f"range bounds must be strictly descending: {bounds}")
    if resolution >= bounds[0]:
        return 1
    for i in range(1, len(bounds)):
        if resolution >= bounds[i]:
            return i + 1
    warnings.warn(
        f"resolution {resolution} below the lowest range bound {bounds[-1]}; "
        f"clamping to range {len(bounds)}",
        stacklevel=2,
    )
    return len(bounds)


def _group_norm(channels: int) -> nn.GroupNorm:
    # per-sample normalization keeps eval independent of batch composition
    return nn.GroupNorm(4 if channels % 4 == 0 else 1, channels)


class GatedResidualBlock(nn.Module):
    """Two 3x3 convs (each group-normalized) with a residual connection; the
    residual branch is multiplied by a per-sample gain. Downsampling blocks
    use a strided 1x1 projection shortcut (also gated, see config decision in
    the model docs)."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm1 = _group_norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _group_norm(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor, gain: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm2(self.conv2(torch.relu(self.norm1(self.conv1(x)))))
        if gain is not None:
            h = gain.view(-1, 1, 1, 1) * h
        return self.shortcut(x) + h


class GatedBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.stem = nn.Sequential(
            nn.Conv2d(5, w[0], 7, stride=4, padding=3),
            _group_norm(w[0]),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        line = torch.linspace(-1.0, 1.0, cfg.canonical_size)
        ys, xs = torch.meshgrid(line, line, indexing="ij")
        self.register_buffer("coords", torch.stack([xs, ys]))
        blocks = []
        cin = w[0]
        for s, cout in enumerate(w):
            for b in range(cfg.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(GatedResidualBlock(cin, cout, stride))
                cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.alpha = nn.Parameter(torch.ones(cfg.num_ranges, cfg.num_blocks))

    def forward(self, images: torch.Tensor, ranges: torch.Tensor | None = None) -> torch.Tensor:
        """images: (B, 3, S, S) at the canonical size; ranges: (B,) 1-based
        range indices, or None for the ungated baseline path. Returns (B, D).
        """
        if images.shape[-1] != self.cfg.canonical_size or images.shape[-2] != self.cfg.canonical_size:
            raise InvalidArgumentError(
                f"expected canonical size {self.cfg.canonical_size}, got {tuple(images.shape[-2:])}"
            )
        gains = None
        if ranges is not None:
            if ranges.min() < 1 or ranges.max() > self.cfg.num_ranges:
                raise InvalidArgumentError("range indices must be 1-based in [1, P]")
            gains = self.alpha[ranges - 1]  # (B, num_blocks)
        coords = self.coords.to(images.dtype).expand(images.shape[0], -1, -1, -1)
        x = self.stem(torch.cat([images, coords], dim=1))
        for k, block in enumerate(self.blocks):
            x = block(x, None if gains is None else gains[:, k])
        return x.mean(dim=(2, 3))


class IterativeRegressor(nn.Module):
    """Shared 3-layer MLP applied T times; each pass maps [features, current
    params] to an additive parameter increment (iterative error feedback)."""

    def __init__(
        self,
        feature_dim: int,
        param_dim: int,
        init_params: np.ndarray,
        hidden: int = 256,
        iterations: int = 3,
    ):
        super().__init__()
        if init_params.shape != (param_dim,):
            raise InvalidArgumentError("init_params must match param_dim")
        self.iterations = iterations
        self.mlp = nn.Sequential(
            nn.Linear(feature_dim + param_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, param_dim),
        )
        self.register_buffer("init_params", torch.as_tensor(init_params, dtype=torch.float32))

    def forward(self, phi: torch.Tensor, init: torch.Tensor | None = None) -> torch.Tensor:
        params = self.init_params.to(phi.dtype).expand(phi.shape[0], -1) if init is None else init
        for _ in range(self.iterations):
            params = params + self.mlp(torch.cat([phi, params], dim=-1))
        return params


class PoseNet(nn.Module):
    """Backbone + regressor producing [beta, theta, delta] per image."""

    def __init__(self, backbone: GatedBackbone, regressor: IterativeRegressor, num_joints: int):
        super().__init__()
        self.backbone = backbone
        self.regressor = regressor
        self.num_joints = num_joints

    def forward(
        self, images: torch.Tensor, ranges: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (params (B, 13 + 3K), features (B, D))."""
        phi = self.backbone(images, ranges)
        return self.regressor(phi), phi

    def split(self, params: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        k3 = 3 * self.num_joints
        return params[..., :10], params[..., 10 : 10 + k3], params[..., 10 + k3 :]


def make_pose_net(
    model: BodyModelDefinition,
    cfg: BackboneConfig,
    cam: CameraIntrinsics | None = None,
    regressor_hidden: int = 256,
    regressor_iterations: int = 3,
) -> PoseNet:
    """Build a PoseNet whose initial estimate is the rest pose at twice the
    canvas-filling depth."""
    if cam is None:
        cam = CameraIntrinsics.default(cfg.canonical_size)
    param_dim = model.param_dim
    init = np.zeros(param_dim, dtype=np.float64)
    init[-1] = 2.0 * unit_depth(model.height(), cam, cfg.canonical_size)
    backbone = GatedBackbone(cfg)
    regressor = IterativeRegressor(
        cfg.feature_dim,
        param_dim,
        init,
        hidden=regressor_hidden,
        iterations=regressor_iterations,
    )
    return PoseNet(backbone, regressor, model.num_joints)
