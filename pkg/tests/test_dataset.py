"""Dataset generation, pyramids, augmentation, and the stateless RNG."""

import filecmp
import os

import numpy as np
import pytest

from respose.dataset import (
    DatasetManifest,
    SyntheticDataset,
    build_pyramid,
    generate_dataset,
    sample_params,
    sample_rng,
)
from respose.errors import InvalidArgumentError
from respose.geometry import CameraIntrinsics, project
from respose.rendering import render_pose_image
from respose.training import (
    AugmentConfig,
    AugmentDraw,
    augment,
    augment_record,
    draw_augment,
)

MANIFEST = DatasetManifest(count=12, seed=3, fraction3d=0.5, canonical_size=64)


def _compare_trees(a: str, b: str):
    cmp = filecmp.dircmp(a, b)
    assert not cmp.left_only and not cmp.right_only and not cmp.diff_files
    match, mismatch, errors = filecmp.cmpfiles(
        a, b, cmp.common_files, shallow=False
    )
    assert not mismatch and not errors
    for d in cmp.common_dirs:
        _compare_trees(os.path.join(a, d), os.path.join(b, d))


def test_regeneration_is_byte_identical(tmp_path):
    d1, d2 = str(tmp_path / "a"), str(tmp_path / "b")
    generate_dataset(MANIFEST, d1)
    generate_dataset(MANIFEST, d2)
    _compare_trees(d1, d2)


def test_manifest_round_trip(tmp_path):
    root = str(tmp_path / "ds")
    generate_dataset(MANIFEST, root)
    data = SyntheticDataset(root)
    assert data.manifest == MANIFEST
    assert len(data) == MANIFEST.count


def test_label_fraction_exact(tmp_path):
    root = str(tmp_path / "ds")
    generate_dataset(MANIFEST, root)
    data = SyntheticDataset(root)
    flags = [float(data.sample(i)["has3d"]) for i in range(len(data))]
    assert sum(flags) == int(np.floor(MANIFEST.fraction3d * MANIFEST.count))
    # every sample still carries its 3D arrays; the flag gates the loss
    rec = data.sample(0)
    for key in ("image", "keypoints2d", "joints3d", "beta", "theta", "delta"):
        assert key in rec


def test_sample_contents(tmp_path):
    root = str(tmp_path / "ds")
    generate_dataset(MANIFEST, root)
    data = SyntheticDataset(root)
    rec = data.sample(3)
    s = MANIFEST.canonical_size
    k = MANIFEST.num_joints
    assert rec["image"].shape == (3, s, s)
    assert rec["image"].dtype == np.float32
    assert rec["image"].min() >= 0.0 and rec["image"].max() <= 1.0
    assert rec["keypoints2d"].shape == (k, 2)
    assert rec["joints3d"].shape == (k, 3)
    assert rec["beta"].shape == (10,)
    assert rec["theta"].shape == (3 * k,)
    # stored projections match re-projecting the stored 3D labels
    uv = project(rec["joints3d"], rec["delta"], data.cam)
    assert np.abs(uv - rec["keypoints2d"]).max() < 1e-4


def test_sample_params_in_front_of_camera(model, cam):
    rng = sample_rng(9, 1, 0)
    for _ in range(5):
        p = sample_params(model, cam, 224, rng)
        assert p.delta[2] > 0
        assert np.linalg.norm(p.theta.reshape(-1, 3), axis=1).max() <= np.pi + 1e-9


def test_pyramid_levels(model, cam):
    rng = sample_rng(4, 1, 0)
    p = sample_params(model, cam, 224, rng)
    img = render_pose_image(model, p, 224, cam)
    bounds = (224, 128, 64, 40, 24)
    levels, sources = build_pyramid(img, bounds, rng)
    assert len(levels) == 5 and len(sources) == 5
    assert sources[0] == 224
    for lo, hi, src in zip(bounds[1:], bounds[:-1], sources[1:]):
        assert lo <= src < hi
    assert all(s1 > s2 for s1, s2 in zip(sources, sources[1:]))
    for lvl in levels:
        assert lvl.shape == img.shape
        assert lvl.dtype == np.float32
    assert np.array_equal(levels[0], img)
    # information loss is monotone-ish: the lowest level differs most
    d1 = np.abs(levels[1] - img).mean()
    d4 = np.abs(levels[4] - img).mean()
    assert d4 > d1


def test_pyramid_rejects_wrong_size(model, cam):
    rng = sample_rng(4, 1, 1)
    img = np.zeros((3, 100, 100), dtype=np.float32)
    with pytest.raises(InvalidArgumentError):
        build_pyramid(img, (224, 128, 64, 40, 24), rng)


def test_stateless_rng_reproducible_and_disjoint():
    a = sample_rng(7, 1, 3).normal(size=8)
    b = sample_rng(7, 1, 3).normal(size=8)
    c = sample_rng(7, 1, 4).normal(size=8)
    d = sample_rng(7, 2, 3).normal(size=8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_identity_augment_is_identity(model, cam):
    rng = sample_rng(11, 1, 0)
    p = sample_params(model, cam, 64, rng)
    cam64 = CameraIntrinsics.default(64)
    img = render_pose_image(model, p, 64, cam64)
    uv = project(np.zeros((8, 3)) + 0.1, p.delta, cam64)
    cfg = AugmentConfig(noise_sigma=0.0, jitter=0.0, rotation_deg=0.0, flip_prob=0.0)
    out_img, out_kp = augment(img, uv, sample_rng(11, 2, 0), cfg, model.mirror_map)
    assert np.array_equal(out_img, img)
    assert np.allclose(out_kp, uv)


def _record_for(model, cam, size, seed):
    rng = sample_rng(seed, 1, 0)
    p = sample_params(model, cam, size, rng)
    from respose.rendering import render_joints

    x3d, uv = render_joints(model, p, cam)
    img = render_pose_image(model, p, size, cam)
    return {
        "image": img,
        "keypoints2d": uv,
        "joints3d": x3d,
        "beta": p.beta,
        "theta": p.theta,
        "delta": p.delta,
        "has3d": np.array(1.0),
    }


@pytest.mark.parametrize("angle,flip", [(0.0, True), (23.0, False), (-31.0, True)])
def test_augmented_3d_labels_reproject_exactly(model, angle, flip):
    """Rotation and flip move pixels, 2D points, and 3D labels coherently:
    the transformed 3D joints must reproject onto the transformed keypoints."""
    size = 224
    cam = CameraIntrinsics.default(size)
    rec = _record_for(model, cam, size, seed=13)
    draw = AugmentDraw(noise=None, jitter=np.zeros(3), angle_deg=angle, flip=flip)
    cfg = AugmentConfig(noise_sigma=0.0, jitter=0.0, rotation_deg=45.0, flip_prob=0.5)
    out = augment_record(rec, draw, cfg, model.mirror_map)
    uv = project(out["joints3d"], out["delta"], cam)
    assert np.abs(uv - out["keypoints2d"]).max() < 1e-6


def test_flip_twice_is_identity(model, cam):
    rec = _record_for(model, cam, 224, seed=17)
    draw = AugmentDraw(noise=None, jitter=np.zeros(3), angle_deg=0.0, flip=True)
    cfg = AugmentConfig(noise_sigma=0.0, jitter=0.0, rotation_deg=0.0, flip_prob=1.0)
    once = augment_record(rec, draw, cfg, model.mirror_map)
    twice = augment_record(once, draw, cfg, model.mirror_map)
    assert np.allclose(twice["image"], rec["image"], atol=1e-6)
    assert np.allclose(twice["keypoints2d"], rec["keypoints2d"], atol=1e-9)
    assert np.allclose(twice["joints3d"], rec["joints3d"], atol=1e-12)
    assert np.allclose(twice["theta"], rec["theta"], atol=1e-12)


def test_draw_augment_respects_config(model):
    cfg = AugmentConfig(noise_sigma=0.0, jitter=0.2, rotation_deg=10.0, flip_prob=1.0)
    draw = draw_augment(sample_rng(1, 2, 0), cfg, (3, 8, 8))
    assert draw.noise is None
    assert np.abs(draw.jitter).max() <= 0.2
    assert abs(draw.angle_deg) <= 10.0
    assert draw.flip is True
