"""Deterministic synthetic pose images.

A body is drawn as one small Gaussian blob per joint, colored by a fixed
hue-wheel palette so joints are identifiable by color, plus anti-aliased bone
strokes between each joint and its parent. Strokes are gray (all channels),
taper to zero at both endpoints so blob centroids stay unbiased, and
everything is clamped to [0, 1].

Blobs are deliberately small relative to the canvas: at the canonical size
neighboring joints stay separable, while aggressive downsampling mixes their
colors and genuinely destroys identity information.
"""

from __future__ import annotations

import numpy as np

from .body_model import BodyModelDefinition, BodyParams, joints3d, smpl_forward
from .geometry import CameraIntrinsics, project

BLOB_SIGMA_FRACTION = 1.0 / 40.0
BONE_SIGMA_FRACTION = 1.0 / 112.0
BONE_GAIN = 0.3


def joint_palette(num_joints: int) -> np.ndarray:
    """(K, 3) fully saturated hue-wheel colors, hue k/K."""
    k = (np.arange(num_joints) / float(num_joints)) * 6.0
    f = k - np.floor(k)
    sector = np.floor(k).astype(int) % 6
    rgb = np.zeros((num_joints, 3))
    for i, (s, fr) in enumerate(zip(sector, f)):
        if s == 0:
            rgb[i] = (1.0, fr, 0.0)
        elif s == 1:
            rgb[i] = (1.0 - fr, 1.0, 0.0)
        elif s == 2:
            rgb[i] = (0.0, 1.0, fr)
        elif s == 3:
            rgb[i] = (0.0, 1.0 - fr, 1.0)
        elif s == 4:
            rgb[i] = (fr, 0.0, 1.0)
        else:
            rgb[i] = (1.0, 0.0, 1.0 - fr)
    return rgb


def render_joints(
    model: BodyModelDefinition, params: BodyParams, cam: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Posed 3D joints (body frame) and their 2D projections."""
    verts = smpl_forward(model, params.beta, params.theta)
    x3d = joints3d(model, verts)
    uv = project(x3d, params.delta, cam)
    return x3d, uv


def render_pose_image(
    model: BodyModelDefinition,
    params: BodyParams,
    size: int,
    cam: CameraIntrinsics | None = None,
) -> np.ndarray:
    """Render a (3, size, size) float32 image of the posed body in [0, 1]."""
    if cam is None:
        cam = CameraIntrinsics.default(size)
    _, uv = render_joints(model, params, cam)
    canvas = np.zeros((3, size, size), dtype=np.float64)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)

    sigma_b = size * BLOB_SIGMA_FRACTION
    palette = joint_palette(model.num_joints)
    for k in range(model.num_joints):
        u, v = uv[k]
        blob = np.exp(-((xs - u) ** 2 + (ys - v) ** 2) / (2.0 * sigma_b**2))
        canvas += palette[k][:, None, None] * blob[None]

    sigma_l = size * BONE_SIGMA_FRACTION
    for j in range(1, model.num_joints):
        a = uv[int(model.parent[j])]
        b = uv[j]
        seg = b - a
        seg_len2 = float(seg @ seg)
        if seg_len2 < 1e-12:
            continue
        t = ((xs - a[0]) * seg[0] + (ys - a[1]) * seg[1]) / seg_len2
        t = np.clip(t, 0.0, 1.0)
        dx = xs - (a[0] + t * seg[0])
        dy = ys - (a[1] + t * seg[1])
        taper = (4.0 * t * (1.0 - t)) ** 2
        stroke = BONE_GAIN * taper * np.exp(-(dx**2 + dy**2) / (2.0 * sigma_l**2))
        canvas += stroke[None]

    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


def render_overlay(
    image: np.ndarray, keypoints: np.ndarray, parent: np.ndarray, path: str
) -> None:
    """Write a PNG of the image with the projected skeleton drawn on top."""
    from PIL import Image, ImageDraw

    arr = np.clip(np.asarray(image), 0.0, 1.0)
    rgb = (arr.transpose(1, 2, 0) * 255).astype(np.uint8)
    img = Image.fromarray(rgb)
    draw = ImageDraw.Draw(img)
    for j in range(1, len(parent)):
        p = int(parent[j])
        if p < 0:
            continue
        draw.line(
            [tuple(keypoints[p].tolist()), tuple(keypoints[j].tolist())],
            fill=(0, 255, 0),
            width=1,
        )
    for k in range(keypoints.shape[0]):
        u, v = keypoints[k]
        draw.ellipse([u - 2, v - 2, u + 2, v + 2], fill=(255, 64, 64))
    img.save(path, format="PNG")
