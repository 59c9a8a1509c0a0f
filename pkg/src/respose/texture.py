"""Texture estimation: UV prediction net, global context block, and a toy
differentiable point-splat renderer.

The texture net is a small encoder-decoder with skip connections whose
bottleneck is a global context block (identity at init); an extra upsampling
stage doubles the UV map beyond the baseline decoder resolution. Rendering
splats each vertex's sampled texture color as an isotropic Gaussian weighted
by a soft depth term; the image is the weight-normalized color sum, which is
differentiable in the texture, vertices, and camera offset.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import arrayio
from .body_model import BodyModelDefinition, joints3d, smpl_forward
from .dataset import SyntheticDataset, sample_rng
from .errors import CheckpointError, DegenerateGeometryError, InvalidArgumentError
from .evaluation import PoseBundle
from .geometry import CameraIntrinsics

_TAG_TEX = 31

TEXTURE_KIND = "texture_checkpoint"
SPLAT_EPS = 1e-6


@dataclass(frozen=True)
class TextureConfig:
    internal_size: int = 64      # encoder input grid
    uv_size: int = 64            # baseline decoder output; doubled by the extra stage
    widths: tuple[int, ...] = (16, 32, 64, 128)
    context_reduce: int = 8
    context_hidden: int = 256
    render_size: int = 64
    low_res_min: int = 28
    low_res_max: int = 64
    total_steps: int = 200
    batch_size: int = 2
    learning_rate: float = 1e-3
    seed: int = 0


def vertex_uv(model: BodyModelDefinition) -> np.ndarray:
    """Cylindrical unwrap of the template: u from the angle around the body's
    vertical axis, v from normalized height. Values in [0, 1]."""
    v = model.template_vertices
    u_coord = (np.arctan2(v[:, 2], v[:, 0]) + np.pi) / (2.0 * np.pi)
    ys = v[:, 1]
    v_coord = (ys - ys.min()) / max(ys.max() - ys.min(), 1e-9)
    return np.stack([u_coord, v_coord], axis=1)


class GlobalContext(nn.Module):
    """Two-branch global context over a fixed spatial grid.

    Branch A: global average pooling (B, C). Branch B: 1x1 reduction to Cr
    channels, flattened (B, Cr*H*W). The concatenation passes through two FC
    layers, is unflattened back to (B, Cr, H, W), recovered to C channels by a
    1x1 conv, and added to the input. Zeroing the recovery conv makes the
    block the bit-exact identity; it is constructed that way.
    """

    def __init__(self, channels: int, spatial: int, reduce_channels: int, hidden: int):
        super().__init__()
        self.spatial = spatial
        self.reduce = nn.Conv2d(channels, reduce_channels, 1)
        flat = reduce_channels * spatial * spatial
        self.fc = nn.Sequential(
            nn.Linear(channels + flat, hidden),
            nn.ReLU(),
            nn.Linear(hidden, flat),
        )
        self.recover = nn.Conv2d(reduce_channels, channels, 1)
        self.reduce_channels = reduce_channels
        nn.init.zeros_(self.recover.weight)
        nn.init.zeros_(self.recover.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.spatial or x.shape[-2] != self.spatial:
            raise InvalidArgumentError(
                f"global context built for {self.spatial}x{self.spatial}, got {tuple(x.shape[-2:])}"
            )
        gap = x.mean(dim=(2, 3))
        red = self.reduce(x).flatten(start_dim=1)
        ctx = self.fc(torch.cat([gap, red], dim=1))
        ctx = ctx.reshape(x.shape[0], self.reduce_channels, self.spatial, self.spatial)
        return x + self.recover(ctx)


class ConvBlock(nn.Module):
    """Two (conv, batch norm, ReLU) units."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(),
        )

    def forward(self, x):
        return self.net(x)


class TextureNet(nn.Module):
    """Encoder-decoder with skips, a global context bottleneck, and an extra
    upsampling stage giving a UV map at twice the baseline decoder size."""

    def __init__(self, cfg: TextureConfig, extra_upsample: bool = True):
        super().__init__()
        self.cfg = cfg
        self.extra_upsample = extra_upsample
        w = cfg.widths
        s = cfg.internal_size
        self.stem = ConvBlock(3, w[0])
        self.down = nn.ModuleList(
            [
                nn.Sequential(nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1), nn.ReLU())
                for i in range(len(w) - 1)
            ]
        )
        self.enc = nn.ModuleList([ConvBlock(w[i + 1], w[i + 1]) for i in range(len(w) - 1)])
        bottleneck_spatial = s // 2 ** (len(w) - 1)
        self.context = GlobalContext(
            w[-1], bottleneck_spatial, cfg.context_reduce, cfg.context_hidden
        )
        self.dec = nn.ModuleList(
            [ConvBlock(w[i + 1] + w[i], w[i]) for i in reversed(range(len(w) - 1))]
        )
        self.head = nn.Conv2d(w[0], 3, 3, padding=1)
        self.extra = nn.Conv2d(3, 3, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, 3, S, S) image at any square size; returns UV texture maps
        (B, 3, U, U) clamped to [0, 1]."""
        if x.ndim != 4:
            raise InvalidArgumentError("expected a batched (B, 3, S, S) image")
        if x.shape[-1] != self.cfg.internal_size:
            x = F.interpolate(
                x, size=(self.cfg.internal_size, self.cfg.internal_size),
                mode="bicubic", align_corners=False,
            )
        h = self.stem(x)
        skips = [h]
        for down, enc in zip(self.down, self.enc):
            h = enc(down(h))
            skips.append(h)
        h = self.context(h)
        for i, dec in enumerate(self.dec):
            skip = skips[-(i + 2)]
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = dec(torch.cat([h, skip], dim=1))
        uv = self.head(h)
        if uv.shape[-1] != self.cfg.uv_size:
            uv = F.interpolate(uv, size=(self.cfg.uv_size, self.cfg.uv_size), mode="bilinear", align_corners=False)
        if self.extra_upsample:
            uv = self.extra(F.interpolate(uv, scale_factor=2, mode="nearest"))
        return uv.clamp(0.0, 1.0)


def bilinear_sample(texture: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Sample a (3, H, W) texture at (N, 2) uv coordinates in [0, 1].

    Differentiable in both the texture and the coordinates; coordinates clamp
    to the valid border.
    """
    if texture.ndim != 3 or uv.ndim != 2 or uv.shape[1] != 2:
        raise InvalidArgumentError("texture must be (3, H, W), uv (N, 2)")
    _, h, w = texture.shape
    x = uv[:, 0].clamp(0.0, 1.0) * (w - 1)
    y = uv[:, 1].clamp(0.0, 1.0) * (h - 1)
    x0 = x.floor().long().clamp(0, w - 2)
    y0 = y.floor().long().clamp(0, h - 2)
    fx = (x - x0.to(x.dtype)).unsqueeze(0)
    fy = (y - y0.to(y.dtype)).unsqueeze(0)
    t00 = texture[:, y0, x0]
    t01 = texture[:, y0, x0 + 1]
    t10 = texture[:, y0 + 1, x0]
    t11 = texture[:, y0 + 1, x0 + 1]
    top = t00 * (1 - fx) + t01 * fx
    bot = t10 * (1 - fx) + t11 * fx
    return (top * (1 - fy) + bot * fy).transpose(0, 1)  # (N, 3)


def splat_render(
    vertices: torch.Tensor,
    delta: torch.Tensor,
    texture: torch.Tensor,
    uv: torch.Tensor,
    size: int,
    cam: CameraIntrinsics,
    z0: Optional[float] = None,
) -> torch.Tensor:
    """Gaussian point-splat rendering of textured vertices.

    Each vertex contributes its sampled color with weight
    exp(-d^2 / (2 sigma^2)) * exp(-z / z0), sigma = size / 64; the image is
    sum(w c) / (sum w + 1e-6). Returns (3, size, size).
    """
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise InvalidArgumentError("vertices must be (N, 3)")
    shifted = vertices + delta
    z = shifted[:, 2]
    if (z <= 0).any():
        raise DegenerateGeometryError("non-positive vertex depth in splat_render")
    pp = torch.as_tensor(cam.principal_point, dtype=vertices.dtype)
    px = cam.focal_length * shifted[:, :2] / z[:, None] + pp  # (N, 2)
    colors = bilinear_sample(texture, uv)  # (N, 3)
    if z0 is None:
        z0 = float(z.detach().mean())
    sigma = size / 64.0
    ys, xs = torch.meshgrid(
        torch.arange(size, dtype=vertices.dtype),
        torch.arange(size, dtype=vertices.dtype),
        indexing="ij",
    )
    dx = xs[None] - px[:, 0, None, None]
    dy = ys[None] - px[:, 1, None, None]
    weight = torch.exp(-(dx**2 + dy**2) / (2.0 * sigma**2)) * torch.exp(-z / z0)[:, None, None]
    num = torch.einsum("nhw,nc->chw", weight, colors)
    den = weight.sum(dim=0) + SPLAT_EPS
    return num / den[None]


class RandomDescriptor(nn.Module):
    """Frozen random conv stack used as the default appearance embedding."""

    def __init__(self, seed: int = 0, out_dim: int = 128):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(3, 8, 5, stride=2, padding=2)
        self.conv2 = nn.Conv2d(8, 16, 5, stride=2, padding=2)
        with torch.no_grad():
            for m in (self.conv1, self.conv2):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.2)
                m.bias.zero_()
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.out_dim = 16 * 16
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        single = image.ndim == 3
        if single:
            image = image[None]
        h = torch.relu(self.conv1(image))
        h = torch.relu(self.conv2(h))
        h = self.pool(h).flatten(start_dim=1)
        return h[0] if single else h


def reid_loss(rendered: torch.Tensor, reference: torch.Tensor, embed: nn.Module) -> torch.Tensor:
    """L2 distance between embeddings of the rendered and reference images."""
    return (embed(rendered) - embed(reference)).norm(dim=-1).mean()


def train_texture(
    bundle: PoseBundle,
    data: SyntheticDataset,
    cfg: TextureConfig,
    out_dir: Optional[str] = None,
) -> dict[str, float]:
    """Fit the texture net: geometry comes from the frozen pose net on the
    high-resolution image, the UV map from a degraded copy, and the loss is
    the embedding distance between the splat render and the high-res image.
    """
    from .resample import resample_cubic

    torch.manual_seed(cfg.seed)
    net = TextureNet(cfg)
    embed = RandomDescriptor()
    uv = torch.from_numpy(vertex_uv(bundle.model).astype(np.float32))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    render_cam = _render_cam(bundle.cam, bundle.backbone_cfg.canonical_size, cfg.render_size)

    first_loss = None
    last_loss = None
    for step in range(cfg.total_steps):
        rng = sample_rng(cfg.seed, _TAG_TEX, step)
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        losses = []
        for i in idx:
            rec = data.sample(int(i))
            x_h = rec["image"]
            low = int(rng.integers(cfg.low_res_min, cfg.low_res_max + 1))
            x_l = resample_cubic(resample_cubic(x_h, low), x_h.shape[-1])
            with torch.no_grad():
                params, _ = bundle.posenet(
                    torch.from_numpy(x_h[None].copy()), torch.ones(1, dtype=torch.long)
                )
                beta, theta, delta = bundle.posenet.split(params)
                verts = smpl_forward(bundle.model, beta, theta)[0]
                delta = delta[0]
                # keep the mesh renderable even from a rough pose estimate
                delta = torch.cat([delta[:2], delta[2:].clamp_min(1.0)])
            texture = net(torch.from_numpy(x_l[None]))[0]
            rendered = splat_render(verts, delta, texture, uv, cfg.render_size, render_cam)
            target = torch.from_numpy(resample_cubic(x_h, cfg.render_size))
            losses.append(reid_loss(rendered, target, embed))
        loss = torch.stack(losses).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if first_loss is None:
            first_loss = float(loss.detach())
        last_loss = float(loss.detach())

    summary = {"first_loss": first_loss or 0.0, "last_loss": last_loss or 0.0, "steps": cfg.total_steps}
    if out_dir:
        save_texture(os.path.join(out_dir, "texture_checkpoint"), net, cfg, bundle, summary)
    return summary


def _render_cam(cam: CameraIntrinsics, canonical: int, render_size: int) -> CameraIntrinsics:
    scale = render_size / canonical
    return CameraIntrinsics(
        focal_length=cam.focal_length * scale,
        principal_point=((render_size - 1) / 2.0, (render_size - 1) / 2.0),
    )


def save_texture(
    path: str, net: TextureNet, cfg: TextureConfig, bundle: PoseBundle, summary: dict
) -> None:
    arrays = {}
    for name, p in net.named_parameters():
        arrays[f"texnet.{name}"] = p.detach().numpy()
    for name, b in net.named_buffers():
        arrays[f"texnet.{name}"] = b.detach().numpy().astype(np.float32)
    arrays["vertex_uv"] = vertex_uv(bundle.model).astype(np.float32)
    extra = {
        "kind": TEXTURE_KIND,
        "texture": {**asdict(cfg), "widths": list(cfg.widths)},
        "body": bundle.meta["body"],
        "summary": summary,
    }
    arrayio.write_packed(path, arrays, extra=extra)


def load_texture(path: str) -> tuple[TextureNet, TextureConfig, dict]:
    arrays, extra = arrayio.read_packed(path)
    if extra.get("kind") != TEXTURE_KIND:
        raise CheckpointError(f"not a texture checkpoint: kind={extra.get('kind')!r}")
    raw = dict(extra["texture"])
    raw["widths"] = tuple(raw["widths"])
    cfg = TextureConfig(**raw)
    net = TextureNet(cfg)
    with torch.no_grad():
        for name, p in net.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"texnet.{name}"]))
        for name, b in net.named_buffers():
            b.copy_(torch.from_numpy(arrays[f"texnet.{name}"]).to(b.dtype))
    return net, cfg, extra
