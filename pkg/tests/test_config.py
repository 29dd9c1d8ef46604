import pytest

from optibox.config import (
    GRID_CHOICES,
    KEYS,
    PRESETS,
    parse_config_file,
    parse_overrides,
    parse_value,
    resolve,
    scene_config_from,
    train_config_from,
    write_config,
)
from optibox.errors import ConfigError


# ---------------------------------------------------------------------------
# value parsing


def test_parse_value_types():
    assert parse_value("lambda", "100") == 100.0
    assert parse_value("batch", "16") == 16
    assert parse_value("use_semantic", "true") is True
    assert parse_value("use_semantic", "OFF") is False
    assert parse_value("milestones", "15:0.1,25:0.1") == {15: 0.1, 25: 0.1}
    assert parse_value("milestones", "none") == {}
    assert parse_value("pair_iou_max", "none") is None
    assert parse_value("pair_iou_max", "0.5") == 0.5
    assert parse_value("train_path", "data/train.jsonl") == "data/train.jsonl"
    # Already-typed values pass through untouched.
    assert parse_value("lambda", 5.0) == 5.0


def test_parse_value_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_value("momentum", "0.9")
    with pytest.raises(ConfigError, match="bad value"):
        parse_value("batch", "sixteen")
    with pytest.raises(ConfigError):
        parse_value("use_semantic", "maybe")


def test_parse_overrides():
    got = parse_overrides(["lambda=10", "batch=8"])
    assert got == {"lambda": 10.0, "batch": 8}
    with pytest.raises(ConfigError, match="KEY=VALUE"):
        parse_overrides(["lambda:10"])


# ---------------------------------------------------------------------------
# config files


def test_config_file_parsing(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# a comment line\n"
        "\n"
        "lambda = 50\n"
        "milestones = 10:0.5  # trailing comment\n"
        "seed=3\n"
    )
    got = parse_config_file(path)
    assert got == {"lambda": 50.0, "milestones": {10: 0.5}, "seed": 3}


def test_config_file_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("lambda = 50\nbogus_key = 1\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_file(path)
    path.write_text("lambda = 50\n\n\njust words\n")
    with pytest.raises(ConfigError, match="line 4"):
        parse_config_file(path)


# ---------------------------------------------------------------------------
# resolution precedence


def test_resolve_precedence(tmp_path):
    base = resolve("train-grounder")
    assert base["lambda"] == 100.0
    assert base["seed"] == 0

    path = tmp_path / "run.cfg"
    path.write_text("lambda = 50\nseed = 5\n")
    from_file = resolve("train-grounder", config_path=path)
    assert from_file["lambda"] == 50.0 and from_file["seed"] == 5

    overridden = resolve("train-grounder", config_path=path,
                         overrides=["lambda=25"])
    assert overridden["lambda"] == 25.0 and overridden["seed"] == 5

    seeded = resolve("train-grounder", config_path=path,
                     overrides=["lambda=25", "seed=9"], seed=7)
    assert seeded["seed"] == 7  # the explicit seed wins over everything


def test_resolve_rejects_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        resolve("train-grounder", preset="gpu-cluster")


def test_resolve_covers_every_key():
    for preset in PRESETS:
        for command in ("gen-data", "train-grounder", "train-optibox",
                        "train-optibox-independent", "eval"):
            cfg = resolve(command, preset=preset)
            assert set(cfg) == set(KEYS), (preset, command)


def test_command_sections_set_the_stage():
    assert resolve("train-grounder")["stage"] == "grounder"
    assert resolve("train-optibox")["stage"] == "optibox"
    assert resolve("train-optibox-independent")["stage"] == "optibox_independent"
    assert resolve("pretrain-autoencoder")["stage"] == "autoencoder"
    assert resolve("pretrain-projections")["stage"] == "projections"


def test_desk_and_full_presets_differ_in_scale():
    desk = resolve("train-grounder", preset="desk")
    full = resolve("train-grounder", preset="full")
    assert desk["hidden"] < full["hidden"]
    assert desk["embed_dim"] < full["embed_dim"]
    assert full["hidden"] == 512 and full["embed_dim"] == 200
    assert full["proj_dim"] == 128 and full["grid"] == 10


# ---------------------------------------------------------------------------
# round trip


def test_write_then_parse_round_trips(tmp_path):
    cfg = resolve("train-grounder", overrides=["pair_iou_max=0.5"])
    path = tmp_path / "effective.cfg"
    write_config(path, cfg)
    back = parse_config_file(path)
    assert set(back) == set(cfg)
    for key in cfg:
        assert back[key] == cfg[key], key
    # None-valued optionals survive the trip too.
    cfg2 = resolve("train-grounder")
    assert cfg2["pair_iou_max"] is None
    write_config(path, cfg2)
    assert parse_config_file(path)["pair_iou_max"] is None


# ---------------------------------------------------------------------------
# dataclass adapters


def test_train_config_from_maps_fields():
    cfg = resolve("train-grounder", overrides=["lambda=10", "epochs=3", "p=0.5"])
    tc = train_config_from(cfg)
    assert tc.lam == 10.0
    assert tc.epochs == 3
    assert tc.annotation_fraction == 0.5
    assert tc.stage == "grounder"
    assert tc.milestones == cfg["milestones"]
    assert tc.batch_size == cfg["batch"]


def test_scene_config_from_maps_fields():
    cfg = resolve("gen-data", overrides=["jitter=0.2", "grid=7", "distractors=2"])
    sc = scene_config_from(cfg)
    assert sc.jitter == 0.2
    assert sc.grid_size == 7
    assert sc.distractors == 2
    assert sc.seed == cfg["seed"]
    assert sc.target_upper_bound == cfg["target_upper_bound"]


# ---------------------------------------------------------------------------
# published constants


def test_grid_choices_are_frozen():
    assert GRID_CHOICES == {
        0.0312: (10.0, 0.01),
        0.5: (100.0, 0.0005),
        1.0: (100.0, 0.01),
    }
