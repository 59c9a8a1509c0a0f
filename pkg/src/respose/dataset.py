"""Deterministic synthetic dataset generation and loading.

A dataset directory holds a top-level JSON manifest, the serialized body
model, an index of sample ids, and one array directory per sample (image,
2D keypoints, 3D joints, parameter labels, 3D-label flag). Generation is a
pure function of the manifest: rerunning it reproduces every byte.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np

from . import arrayio
from .body_model import BodyModelDefinition, BodyParams, make_synthetic_model, save_model
from .errors import GenerationError, InvalidArgumentError
from .geometry import CameraIntrinsics, unit_depth
from .rendering import render_joints, render_pose_image
from .resample import resample_cubic

MANIFEST_NAME = "manifest.json"
MODEL_DIR = "body_model"

# stream tags separating independent random purposes under one dataset seed
_TAG_SAMPLE = 1
_TAG_LABELS = 2


@dataclass(frozen=True)
class DatasetManifest:
    count: int
    seed: int
    fraction3d: float = 0.3
    canonical_size: int = 224
    focal: float = 1000.0
    body_seed: int = 0
    num_vertices: int = 128
    num_joints: int = 8

    def validate(self) -> None:
        if self.count < 1:
            raise InvalidArgumentError("count must be >= 1")
        if not 0.0 <= self.fraction3d <= 1.0:
            raise InvalidArgumentError("fraction3d must lie in [0, 1]")
        if self.canonical_size < 32:
            raise InvalidArgumentError("canonical_size must be >= 32")


def sample_rng(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    """Stateless RNG keyed by (seed, purpose, index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tag, index])))


def sample_params(
    model: BodyModelDefinition,
    cam: CameraIntrinsics,
    size: int,
    rng: np.random.Generator,
    max_tries: int = 100,
) -> BodyParams:
    """Draw a random body configuration with every vertex strictly in front
    of the camera. Rejections past max_tries raise GenerationError."""
    from .body_model import smpl_forward

    scale = unit_depth(model.height(), cam, size)
    k = model.num_joints
    for _ in range(max_tries):
        beta = rng.uniform(-2.0, 2.0, size=10)
        theta = np.empty((k, 3))
        for j in range(k):
            axis = rng.normal(size=3)
            axis /= max(np.linalg.norm(axis), 1e-12)
            limit = np.pi if j == 0 else np.pi / 3.0
            theta[j] = axis * rng.uniform(0.0, limit)
        depth = rng.uniform(1.5, 3.0) * scale
        delta = np.array(
            [rng.uniform(-0.03, 0.03) * depth, rng.uniform(-0.03, 0.03) * depth, depth]
        )
        verts = smpl_forward(model, beta, theta.reshape(-1))
        if verts[:, 2].min() + depth > 0.2 * scale:
            return BodyParams(beta=beta, theta=theta.reshape(-1), delta=delta)
    raise GenerationError(f"no valid configuration after {max_tries} tries")


def build_pyramid(
    image_hr: np.ndarray,
    bounds: tuple[int, ...],
    rng: np.random.Generator,
) -> tuple[list[np.ndarray], list[int]]:
    """Multi-resolution views of one canonical image.

    Level 1 is the original; level p >= 2 resamples down to a resolution drawn
    from range p's interval and back up to canonical. Source resolutions are
    strictly decreasing across levels by construction.
    """
    size = image_hr.shape[-1]
    if size != bounds[0]:
        raise InvalidArgumentError(f"image size {size} != canonical bound {bounds[0]}")
    images = [np.asarray(image_hr, dtype=np.float32)]
    sources = [size]
    for p in range(1, len(bounds)):
        lo, hi = bounds[p], bounds[p - 1]
        src = int(rng.integers(lo, hi))
        images.append(resample_cubic(resample_cubic(image_hr, src), size))
        sources.append(src)
    return images, sources


def _sample_id(i: int) -> str:
    return f"{i:05d}"


def generate_dataset(manifest: DatasetManifest, out_dir: str) -> None:
    """Write a full dataset; byte-identical across reruns of the same manifest."""
    manifest.validate()
    model = make_synthetic_model(manifest.body_seed, manifest.num_vertices, manifest.num_joints)
    cam = CameraIntrinsics.default(manifest.canonical_size, manifest.focal)
    os.makedirs(out_dir, exist_ok=True)
    save_model(model, os.path.join(out_dir, MODEL_DIR))

    n3d = int(np.floor(manifest.fraction3d * manifest.count))
    perm = sample_rng(manifest.seed, _TAG_LABELS).permutation(manifest.count)
    labeled = set(int(x) for x in perm[:n3d])

    index = []
    for i in range(manifest.count):
        rng = sample_rng(manifest.seed, _TAG_SAMPLE, i)
        params = sample_params(model, cam, manifest.canonical_size, rng)
        x3d, uv = render_joints(model, params, cam)
        image = render_pose_image(model, params, manifest.canonical_size, cam)
        has3d = i in labeled
        sid = _sample_id(i)
        arrayio.write_array_dir(
            os.path.join(out_dir, "data", sid),
            {
                "image": image,
                "keypoints2d": uv,
                "joints3d": x3d,
                "beta": params.beta,
                "theta": params.theta,
                "delta": params.delta,
                "has3d": np.array([1.0 if has3d else 0.0], dtype=np.float32),
            },
        )
        index.append({"id": sid, "has3d": has3d})
    arrayio.dump_json({"samples": index}, os.path.join(out_dir, "index.json"))
    arrayio.dump_json(asdict(manifest), os.path.join(out_dir, MANIFEST_NAME))


class SyntheticDataset:
    """Lazy reader over a generated dataset directory."""

    def __init__(self, root: str):
        self.root = root
        raw = arrayio.load_json(os.path.join(root, MANIFEST_NAME))
        self.manifest = DatasetManifest(**raw)
        self.index = arrayio.load_json(os.path.join(root, "index.json"))["samples"]
        # the generating model is a pure function of its seed, so rebuild it
        # in float64 rather than reading the float32 serialized copy
        self.model = make_synthetic_model(
            self.manifest.body_seed, self.manifest.num_vertices, self.manifest.num_joints
        )
        self.cam = CameraIntrinsics.default(self.manifest.canonical_size, self.manifest.focal)

    def __len__(self) -> int:
        return len(self.index)

    def sample(self, i: int) -> dict[str, np.ndarray]:
        sid = self.index[i]["id"]
        arrays, _ = arrayio.read_array_dir(os.path.join(self.root, "data", sid))
        arrays["has3d"] = arrays["has3d"].reshape(())
        return arrays
