import textwrap

import pytest

from geomae.config import ExperimentConfig, dump_config, load_config, parse_config
from geomae.errors import ConfigError


def test_empty_is_default():
    assert parse_config("") == ExperimentConfig()


def test_round_trip():
    cfg = parse_config(
        textwrap.dedent(
            """
            task: segment
            seed: 7
            model: {preset: tiny, decoder_depth: 2, patch: [1, 8, 8]}
            finetune: {head: convup, class_weights: [2, 8]}
            schedule: {max_lr: 1e-3}
            """
        )
    )
    assert cfg.schedule.max_lr == 1e-3 and cfg.finetune.class_weights == [2.0, 8.0]
    assert parse_config(dump_config(cfg)) == cfg
    assert dump_config(parse_config(dump_config(cfg))) == dump_config(cfg)


def test_unknown_key_line():
    text = "task: pretrain\ntrain:\n  batch_size: 4\n  bacth: 3\n"
    with pytest.raises(ConfigError, match="line 4: unknown key 'train.bacth'") as err:
        parse_config(text)
    assert err.value.line == 4


def test_wrong_type_line():
    with pytest.raises(ConfigError, match="line 3: train.batch_size: expected an integer"):
        parse_config("seed: 1\ntrain:\n  batch_size: four\n")


def test_bool_is_not_int():
    with pytest.raises(ConfigError, match="expected an integer"):
        parse_config("seed: true\n")


def test_bad_choice():
    with pytest.raises(ConfigError, match="line 1: task: 'detect'"):
        parse_config("task: detect\n")


def test_duplicate_key():
    with pytest.raises(ConfigError, match="line 2: duplicate key 'seed'"):
        parse_config("seed: 1\nseed: 2\n")


def test_invalid_yaml():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("seed: 1\n  - oops: [\n")


def test_dataclass_validation_surfaces():
    with pytest.raises(ConfigError, match="start_lr"):
        parse_config("schedule:\n  start_lr: 1.0\n  max_lr: 0.1\n")


def test_overrides():
    cfg = parse_config("train:\n  steps: 10\n", ["train.steps=50", "model.preset=300M", "finetune.class_weights=[1, 3]"])
    assert cfg.train.steps == 50 and cfg.model.preset == "300M" and cfg.finetune.class_weights == [1.0, 3.0]
    assert cfg.model.encoder().dim == 1024
    with pytest.raises(ConfigError, match="KEY=VALUE"):
        parse_config("", ["train.steps"])
    with pytest.raises(ConfigError, match="unknown key 'train.stepz'"):
        parse_config("", ["train.stepz=3"])


def test_model_overrides_applied():
    cfg = parse_config("model: {preset: tiny, dim: 32, heads: 2, decoder_dim: 16}\n")
    assert cfg.model.encoder().dim == 32 and cfg.model.decoder().dim == 16


def test_load_resolves_relative_paths(tmp_path):
    (tmp_path / "sub").mkdir()
    p = tmp_path / "sub" / "c.yaml"
    p.write_text("out: runs/x\ndata:\n  manifest: ../m.csv\n")
    cfg = load_config(p)
    assert cfg.data.manifest == str((tmp_path / "m.csv").resolve())
    assert cfg.out == str((tmp_path / "sub" / "runs" / "x").resolve())


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")


def test_shipped_config_parses():
    from pathlib import Path

    cfg = load_config(Path(__file__).parents[1] / "configs" / "toy_pretrain.yaml")
    assert cfg.train.steps == 200 and cfg.model.preset == "tiny"
