"""Strict config parsing: defaults, unknown keys, types, constraints."""

import json

import pytest

from respose.config import RunConfig, from_dict, parse_config, to_dict, write_resolved
from respose.errors import ConfigError


def test_empty_dict_materializes_all_defaults():
    cfg = from_dict({})
    assert cfg.loss.lambda1 == 5.0
    assert cfg.loss.lambda2 == 5.0
    assert cfg.loss.lambda_s == 0.1
    assert cfg.loss.lambda_f == 0.1
    assert cfg.loss.tau == 0.1
    assert cfg.loss.queue_capacity == 512
    assert cfg.dataset.count == 2000
    assert cfg.dataset.canonical_size == 224
    assert cfg.backbone.widths == (16, 32, 64, 128)
    assert cfg.backbone.range_bounds == (224, 128, 64, 40, 24)
    assert cfg.train.stages is None
    assert cfg == RunConfig()


def test_unknown_keys_name_the_dotted_path():
    with pytest.raises(ConfigError, match=r"loss\.lamda1"):
        from_dict({"loss": {"lamda1": 1.0}})
    with pytest.raises(ConfigError, match="unknown config key: losss"):
        from_dict({"losss": {}})
    with pytest.raises(ConfigError, match=r"train\.augment\.flip_probability"):
        from_dict({"train": {"augment": {"flip_probability": 0.5}}})


def test_type_errors_name_path_and_kind():
    with pytest.raises(ConfigError, match=r"loss\.lambda1.*number"):
        from_dict({"loss": {"lambda1": "five"}})
    with pytest.raises(ConfigError, match=r"train\.batch_size.*integer"):
        from_dict({"train": {"batch_size": 2.5}})
    # JSON booleans must not sneak into numeric fields
    with pytest.raises(ConfigError, match=r"train\.batch_size"):
        from_dict({"train": {"batch_size": True}})
    with pytest.raises(ConfigError, match=r"loss\.tau"):
        from_dict({"loss": {"tau": False}})
    with pytest.raises(ConfigError, match=r"backbone\.widths"):
        from_dict({"backbone": {"widths": 16}})


def test_int_accepted_for_float_fields():
    cfg = from_dict({"loss": {"lambda1": 2}})
    assert cfg.loss.lambda1 == 2.0
    assert isinstance(cfg.loss.lambda1, float)


def test_lists_become_tuples():
    cfg = from_dict(
        {
            "dataset": {"canonical_size": 64},
            "backbone": {
                "widths": [8, 16],
                "canonical_size": 64,
                "range_bounds": [64, 48, 32, 28, 24],
            },
            "train": {"stages": [[2, 5], [5, 5]]},
        }
    )
    assert cfg.backbone.widths == (8, 16)
    assert cfg.train.stages == ((2, 5), (5, 5))


def test_constraint_errors_name_the_field():
    with pytest.raises(ConfigError, match=r"dataset\.fraction3d"):
        from_dict({"dataset": {"fraction3d": 1.5}})
    with pytest.raises(ConfigError, match=r"backbone\.range_bounds"):
        from_dict({"backbone": {"range_bounds": [64, 64, 32]}})
    with pytest.raises(ConfigError, match=r"backbone\.canonical_size"):
        from_dict({"backbone": {"canonical_size": 112}})
    with pytest.raises(ConfigError, match=r"loss\.tau"):
        from_dict({"loss": {"tau": 0.0}})
    with pytest.raises(ConfigError, match=r"temporal\.seq_length"):
        from_dict({"temporal": {"seq_length": 2}})
    with pytest.raises(ConfigError, match=r"texture\.internal_size"):
        from_dict({"texture": {"internal_size": 20}})
    with pytest.raises(ConfigError, match=r"train\.stages"):
        from_dict({"train": {"stages": [[9, 5]]}})


def test_parse_serialize_parse_is_identity():
    cfg = from_dict({"loss": {"lambda_s": 0.2}, "train": {"total_steps": 42}})
    again = from_dict(to_dict(cfg))
    assert again == cfg
    # canonical form spells out every default
    raw = to_dict(from_dict({}))
    assert raw["loss"]["lambda1"] == 5.0
    assert raw["backbone"]["widths"] == [16, 32, 64, 128]
    assert raw["train"]["stages"] is None


def test_parse_config_file_and_errors(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"seed": 7}}))
    cfg = parse_config(str(path))
    assert cfg.train.seed == 7

    with pytest.raises(ConfigError, match="not found"):
        parse_config(str(tmp_path / "missing.json"))

    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError, match="JSON"):
        parse_config(str(bad))


def test_write_resolved_round_trips(tmp_path):
    cfg = from_dict({"dataset": {"count": 5}})
    out = write_resolved(cfg, str(tmp_path / "sub"))
    assert parse_config(out) == cfg
