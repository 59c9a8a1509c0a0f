"""Progressive schedule, the training step, checkpoint resume, and the log."""

import csv
import os

import numpy as np
import pytest
import torch

from respose.backbone import BackboneConfig
from respose.dataset import sample_rng
from respose.errors import InvalidArgumentError, TrainingComplete, TrainingDiverged
from respose.losses import LossConfig, basic_loss
from respose.training import (
    _TAG_STEP,
    LOG_COLUMNS,
    AugmentConfig,
    TrainConfig,
    Trainer,
    default_stages,
    progressive_schedule,
    restore_trainer,
    save_checkpoint,
    stage_of,
    validate_stages,
)

BOUNDS64 = (64, 48, 32, 28, 24)


def make_trainer(data, tmp=None, **kw):
    defaults = dict(
        total_steps=4,
        batch_size=2,
        learning_rate=1e-3,
        seed=3,
        stages=((2, 2), (5, 2)),
        augment=AugmentConfig(rotation_deg=0.0),
    )
    defaults.update({k: v for k, v in kw.items() if k in TrainConfig.__dataclass_fields__})
    cfg = TrainConfig(**defaults)
    loss = kw.get("loss_cfg") or LossConfig()
    bb = BackboneConfig(canonical_size=64, range_bounds=BOUNDS64)
    return Trainer(data, cfg, loss, backbone_cfg=bb, out_dir=tmp)


# ------------------------------------------------------------------ schedule


def test_default_stages_cover_budget():
    stages = default_stages(900)
    assert stages == ((2, 300), (4, 300), (5, 300))
    assert sum(s for _, s in stages) == 900


def test_schedule_walks_stage_boundaries():
    stages = default_stages(900)
    assert progressive_schedule(0, stages) == (1, 2)
    assert progressive_schedule(299, stages) == (1, 2)
    assert progressive_schedule(300, stages) == (1, 2, 3, 4)
    assert progressive_schedule(600, stages) == (1, 2, 3, 4, 5)
    assert progressive_schedule(899, stages) == (1, 2, 3, 4, 5)
    with pytest.raises(TrainingComplete):
        progressive_schedule(900, stages)
    assert stage_of(0, stages) == 1
    assert stage_of(599, stages) == 2
    assert stage_of(899, stages) == 3


def test_validate_stages_rejections():
    with pytest.raises(InvalidArgumentError):
        validate_stages((), 5)
    with pytest.raises(InvalidArgumentError):
        validate_stages(((3, 10), (2, 10)), 5)  # decreasing count
    with pytest.raises(InvalidArgumentError):
        validate_stages(((6, 10),), 5)  # count past num_ranges
    with pytest.raises(InvalidArgumentError):
        validate_stages(((2, -1),), 5)
    validate_stages(((1, 0), (5, 10)), 5)


def test_schedule_rejects_negative_step():
    with pytest.raises(InvalidArgumentError):
        progressive_schedule(-1, ((5, 10),))


# ---------------------------------------------------------------- step loop


def test_weight_collapse_reproduces_plain_baseline_step(data64):
    """lambda_s = lambda_f = 0 with frozen gains must take the exact step a
    basic-loss-only trainer would take."""
    ba = make_trainer(data64, loss_cfg=LossConfig(lambda_s=0.0, lambda_f=0.0), freeze_alpha=True)
    row = ba.run_step()
    assert row["total"] == pytest.approx(row["L_b"], abs=0.0)

    twin = make_trainer(data64, loss_cfg=LossConfig(lambda_s=0.0, lambda_f=0.0), freeze_alpha=True)
    ranges = progressive_schedule(0, twin.stages)
    rng = sample_rng(twin.train_cfg.seed, _TAG_STEP, 0)
    images, gt = twin._make_batch(ranges, rng)
    outputs = twin.forward_ranges(images, ranges)
    loss = basic_loss(outputs, gt, twin.loss_cfg)
    twin.optim.zero_grad(set_to_none=True)
    loss.backward()
    twin.optim.step()

    for (na, pa), (nb, pb) in zip(
        ba.posenet.named_parameters(), twin.posenet.named_parameters()
    ):
        assert na == nb
        assert torch.equal(pa, pb), na


def test_frozen_alpha_never_moves(data64):
    tr = make_trainer(data64, freeze_alpha=True)
    before = tr.posenet.backbone.alpha.detach().clone()
    for _ in range(2):
        tr.run_step()
    assert torch.equal(tr.posenet.backbone.alpha, before)


def test_learned_alpha_moves(data64):
    tr = make_trainer(data64, freeze_alpha=False)
    before = tr.posenet.backbone.alpha.detach().clone()
    tr.run_step()
    assert not torch.equal(tr.posenet.backbone.alpha[:2], before[:2])


def test_queue_grows_by_batch_each_step(data64):
    tr = make_trainer(data64)
    assert len(tr.queue) == 0
    tr.run_step()
    assert len(tr.queue) == 2
    tr.run_step()
    assert len(tr.queue) == 4


def test_divergence_raises(data64):
    tr = make_trainer(data64)
    with torch.no_grad():
        next(tr.posenet.regressor.mlp.parameters()).fill_(float("nan"))
    with pytest.raises(TrainingDiverged):
        tr.run_step()


def test_steps_are_deterministic_across_trainers(data64):
    a = make_trainer(data64)
    b = make_trainer(data64)
    ra = [a.run_step()["total"] for _ in range(2)]
    rb = [b.run_step()["total"] for _ in range(2)]
    assert ra == rb


# ------------------------------------------------------------- checkpointing


def test_checkpoint_resume_is_bit_exact(data64, tmp_path):
    path = str(tmp_path / "ckpt")
    a = make_trainer(data64)
    for _ in range(2):
        a.run_step()
    save_checkpoint(path, a)

    b = make_trainer(data64)
    restore_trainer(b, path)
    assert b.step_idx == 2
    assert torch.equal(b.queue.state(), a.queue.state())

    for _ in range(2):
        a.run_step()
        b.run_step()
    for (na, pa), (nb, pb) in zip(
        a.posenet.named_parameters(), b.posenet.named_parameters()
    ):
        assert torch.equal(pa, pb), na
    for pa, pb in zip(a.proj.parameters(), b.proj.parameters()):
        assert torch.equal(pa, pb)
    assert torch.equal(a.queue.state(), b.queue.state())


def test_checkpoint_files_and_metadata(data64, tmp_path):
    path = str(tmp_path / "ckpt")
    tr = make_trainer(data64)
    tr.run_step()
    save_checkpoint(path, tr)
    assert os.path.exists(os.path.join(path, "ckpt_manifest.json"))
    assert os.path.exists(os.path.join(path, "weights.bin"))
    from respose.arrayio import load_json

    meta = load_json(os.path.join(path, "ckpt_manifest.json"))
    assert meta["kind"] == "pose_checkpoint"
    assert meta["step"] == 1
    assert meta["backbone"]["canonical_size"] == 64
    names = {e["name"] for e in meta["arrays"]}
    assert "fusion.alpha" in names
    assert "queue.entries" in names


def test_restore_rejects_non_checkpoint(data64, tmp_path):
    from respose.arrayio import write_packed
    from respose.errors import CheckpointError

    path = str(tmp_path / "bad")
    write_packed(path, {"x": np.zeros(3, dtype=np.float32)}, extra={"kind": "other"})
    tr = make_trainer(data64)
    with pytest.raises(CheckpointError):
        restore_trainer(tr, path)


# -------------------------------------------------------------------- logging


def test_train_writes_log_and_final_checkpoint(data64, tmp_path):
    out = str(tmp_path / "run")
    os.makedirs(out)
    tr = make_trainer(data64, tmp=out)
    log = os.path.join(out, "train_log.csv")
    tr.train(log_path=log)
    with open(log, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(LOG_COLUMNS)
    assert len(rows) == 1 + 4
    steps = [int(r[0]) for r in rows[1:]]
    stages = [int(r[1]) for r in rows[1:]]
    assert steps == [0, 1, 2, 3]
    assert stages == [1, 1, 2, 2]
    for r in rows[1:]:
        for cell in r[2:]:
            assert np.isfinite(float(cell))
    assert os.path.exists(os.path.join(out, "checkpoint", "weights.bin"))
