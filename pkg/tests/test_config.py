"""Experiment config parsing, validation, overrides and stage hashes."""

from pathlib import Path

import pytest

from sadag_lab.errors import ConfigError
from sadag_lab.harness.config import (
    ExperimentConfig,
    coerce_value,
    parse_config,
    parse_config_text,
    parse_overrides,
    parse_value,
)

pytestmark = pytest.mark.unit


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.conf"
    path.write_text("")
    assert parse_config(path) == ExperimentConfig()


def test_shipped_config_matches_defaults():
    shipped = Path(__file__).resolve().parents[1] / "config" / "sadag.conf"
    assert parse_config(shipped) == ExperimentConfig()


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(tmp_path / "nope.conf")


def test_text_rendering_round_trips(small_config):
    assert parse_config_text(small_config.to_text()) == small_config


def test_comments_and_blank_lines_are_ignored():
    cfg = parse_config_text("# run\n\nseed = 3  # trailing\nbits_w = {conv1: 2}\n")
    assert cfg.seed == 3
    assert cfg.bit_maps()[0]["conv1"] == 2


@pytest.mark.parametrize(
    "text, key, line",
    [
        ("seed = 1\ncolour = 3\n", "colour", 2),
        ("seed = 1\nseed = 2\n", "seed", 2),
        ("seed =\n", "seed", 1),
        ("nu = 1.0\nseed = abc\n", "seed", 2),
        ("lambda1 = -1\n", "lambda1", 1),
    ],
)
def test_bad_entries_report_key_and_line(text, key, line):
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert info.value.key == key
    assert info.value.line == line


def test_line_without_equals_is_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config_text("seed 1\n")
    assert info.value.line == 1


@pytest.mark.parametrize(
    "overrides, key",
    [
        ({"pool_size": 2000, "val_size": 1024}, "pool_size"),
        ({"bits_w": {"conv9": 4}}, "bits_w"),
        ({"bits_a": 1}, "bits_a"),
        ({"image_size": 10}, "image_size"),
        ({"sharpness_radii": [0.1, 0.05]}, "sharpness_radii"),
        ({"mode": "fast"}, "mode"),
        ({"num_images": 1}, "num_images"),
    ],
)
def test_validation_names_the_key(overrides, key):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig(**overrides)
    assert info.value.key == key


def test_bit_maps_merge_explicit_layers():
    bits_w, bits_a = ExperimentConfig(bits_w={"conv1": 2}, bits_a=4).bit_maps()
    assert bits_w == {"conv0": 32, "conv1": 2, "conv2": 32, "fc": 32}
    assert bits_a == {"act0": 4, "act1": 4, "fc_in": 8}


def test_integer_values_promote_to_float():
    assert isinstance(coerce_value("nu", 2), float)
    assert parse_value("sharpness_radii", "[1, 0.5]") == [1.0, 0.5]
    assert parse_value("seed", "7") == 7


def test_overrides():
    overrides = parse_overrides(["nu=1", "bits_w={conv1: 2}", "mode = bn-only"])
    assert overrides == {"nu": 1.0, "bits_w": {"conv1": 2}, "mode": "bn-only"}
    cfg = ExperimentConfig().with_overrides(overrides)
    assert cfg.mode == "bn-only" and cfg.nu == 1.0
    with pytest.raises(ConfigError):
        parse_overrides(["nu"])
    with pytest.raises(ConfigError, match="unknown key"):
        ExperimentConfig().with_overrides({"colour": 1})


def test_stage_hashes_follow_their_inputs():
    base = ExperimentConfig()
    assert base.with_overrides({"seed": 1}).stage_hash("data") == base.stage_hash("data")
    assert base.with_overrides({"seed": 1}).stage_hash("generate") != base.stage_hash("generate")
    changed = base.with_overrides({"teacher_epochs": 3})
    assert changed.stage_hash("data") == base.stage_hash("data")
    assert changed.stage_hash("teacher") != base.stage_hash("teacher")
    assert changed.stage_hash("calibrate") != base.stage_hash("calibrate")
    with pytest.raises(ValueError):
        base.stage_hash("evaluate")


def test_bn_only_shares_the_zero_weight_generation_hash():
    bn_only = ExperimentConfig(mode="bn-only")
    zero = ExperimentConfig(lambda1=0.0, lambda2=0.0)
    assert bn_only.bn_only and zero.bn_only
    assert bn_only.stage_hash("generate") == zero.stage_hash("generate")
    assert bn_only.stage_hash("generate") != ExperimentConfig().stage_hash("generate")
