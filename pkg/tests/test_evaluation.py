"""Metrics, the eval protocol, and report round trips."""

import numpy as np
import pytest

from respose.backbone import BackboneConfig
from respose.errors import InvalidArgumentError
from respose.evaluation import (
    EvalReport,
    acceleration_metrics,
    eval_resolutions,
    evaluate,
    load_pose_bundle,
    mpjpe,
    mpjpe_pa,
    predict_joints,
    read_report_csv,
    second_difference,
    write_report_csv,
)
from scipy.spatial.transform import Rotation


def random_similarity(rng):
    rot = Rotation.from_rotvec(rng.normal(size=3)).as_matrix()
    s = rng.uniform(0.5, 2.0)
    t = rng.normal(size=3)
    return s, rot, t


def test_mpjpe_hand_value():
    gt = np.zeros((3, 3))
    pred = np.zeros((3, 3))
    pred[1, 0] = 2.0  # after root-centering, joint 1 is off by 2
    assert mpjpe(pred, gt) == pytest.approx(2.0 / 3.0)


def test_mpjpe_root_shift_invariance():
    rng = np.random.default_rng(0)
    gt = rng.normal(size=(8, 3))
    pred = rng.normal(size=(8, 3))
    assert mpjpe(pred + 5.0, gt) == pytest.approx(mpjpe(pred, gt), abs=1e-12)
    assert mpjpe(pred, gt - 3.0) == pytest.approx(mpjpe(pred, gt), abs=1e-12)


def test_mpjpe_rejects_bad_shapes():
    with pytest.raises(InvalidArgumentError):
        mpjpe(np.zeros((4, 3)), np.zeros((5, 3)))
    with pytest.raises(InvalidArgumentError):
        mpjpe(np.zeros((4, 2)), np.zeros((4, 2)))


def test_pa_never_exceeds_mpjpe():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        pred = rng.normal(size=(8, 3))
        gt = rng.normal(size=(8, 3))
        assert mpjpe_pa(pred, gt) <= mpjpe(pred, gt) + 1e-12


def test_pa_absorbs_similarity_transforms():
    rng = np.random.default_rng(2)
    for _ in range(20):
        gt = rng.normal(size=(8, 3))
        s, rot, t = random_similarity(rng)
        pred = s * gt @ rot.T + t
        assert mpjpe_pa(pred, gt) < 1e-9


def test_second_difference_hand_sequence():
    seq = np.array([0.0, 1.0, 4.0, 9.0, 16.0]).reshape(-1, 1)
    acc = second_difference(seq)
    assert np.allclose(acc[:, 0], [2.0, 2.0, 2.0])
    with pytest.raises(InvalidArgumentError):
        second_difference(seq[:2])


def test_acceleration_metrics_formulas():
    rng = np.random.default_rng(3)
    pred = rng.normal(size=(6, 4, 3))
    gt = rng.normal(size=(6, 4, 3))
    acc, acc_err = acceleration_metrics(pred, gt)
    ap = pred[2:] - 2 * pred[1:-1] + pred[:-2]
    ag = gt[2:] - 2 * gt[1:-1] + gt[:-2]
    assert acc == pytest.approx(np.linalg.norm(ap, axis=-1).mean())
    assert acc_err == pytest.approx(np.linalg.norm(ap - ag, axis=-1).mean())
    # a constant-velocity prediction has zero acceleration
    lin = np.linspace(0, 1, 6)[:, None, None] * np.ones((6, 4, 3))
    acc0, _ = acceleration_metrics(lin, gt)
    assert acc0 == pytest.approx(0.0, abs=1e-12)


def test_eval_resolutions_midpoints():
    assert eval_resolutions((224, 128, 64, 40, 24)) == [224, 176, 96, 52, 32]
    assert eval_resolutions((64, 48, 32, 28, 24)) == [64, 56, 40, 30, 26]


def test_report_validate_rejects_pa_above_mpjpe():
    rep = EvalReport(per_range={1: {"mpjpe": 0.1, "mpjpe_pa": 0.2, "n": 4}})
    with pytest.raises(InvalidArgumentError):
        rep.validate()


def test_report_csv_round_trip(tmp_path):
    rep = EvalReport(
        per_range={
            1: {"mpjpe": 0.25, "mpjpe_pa": 0.125, "n": 16},
            2: {"mpjpe": 0.5, "mpjpe_pa": 0.5, "n": 16},
        },
        sequence={"acc": 0.03125, "acc_err": 0.015625, "n": 5},
    )
    path = str(tmp_path / "report.csv")
    write_report_csv(rep, path)
    back = read_report_csv(path)
    assert back.per_range == rep.per_range
    assert back.sequence == rep.sequence


@pytest.fixture(scope="module")
def bundle64(data64, tmp_path_factory):
    from respose.losses import LossConfig
    from respose.training import AugmentConfig, TrainConfig, Trainer

    out = str(tmp_path_factory.mktemp("evalrun"))
    cfg = TrainConfig(
        total_steps=2,
        batch_size=2,
        seed=1,
        stages=((5, 2),),
        augment=AugmentConfig(rotation_deg=0.0),
    )
    bb = BackboneConfig(canonical_size=64, range_bounds=(64, 48, 32, 28, 24))
    tr = Trainer(data64, cfg, LossConfig(), backbone_cfg=bb, out_dir=out)
    tr.train()
    import os

    return load_pose_bundle(os.path.join(out, "checkpoint"))


def test_evaluate_report_structure(bundle64, data64):
    rep = evaluate(bundle64, data64, max_samples=8)
    assert sorted(rep.per_range) == [1, 2, 3, 4, 5]
    for row in rep.per_range.values():
        assert row["n"] == 8
        assert np.isfinite(row["mpjpe"]) and np.isfinite(row["mpjpe_pa"])
        assert row["mpjpe_pa"] <= row["mpjpe"] + 1e-9


def test_evaluate_deterministic(bundle64, data64):
    a = evaluate(bundle64, data64, max_samples=6)
    b = evaluate(bundle64, data64, max_samples=6)
    assert a.per_range == b.per_range


def test_predict_joints_shapes(bundle64, data64):
    imgs = np.stack([data64.sample(i)["image"] for i in range(3)])
    params, x3d = predict_joints(bundle64, imgs, range_index=1)
    k = bundle64.model.num_joints
    assert params.shape == (3, 13 + 3 * k)
    assert x3d.shape == (3, k, 3)
    assert np.isfinite(params).all() and np.isfinite(x3d).all()


def test_bundle_matches_trainer_metadata(bundle64):
    assert bundle64.meta["kind"] == "pose_checkpoint"
    assert bundle64.backbone_cfg.canonical_size == 64
    assert bundle64.cam.principal_point == ((64 - 1) / 2.0, (64 - 1) / 2.0)
