import pytest

from pigavatar.config import (ExperimentConfig, apply_overrides, config_from_text, dump_config, env_overrides,
                              load_config, parse_assignments, save_config)


def test_defaults_round_trip_through_text():
    cfg = ExperimentConfig()
    assert config_from_text(dump_config(cfg)) == cfg


def test_overrides_coerce_types():
    cfg = apply_overrides(ExperimentConfig(), parse_assignments(
        ["train.iterations=12", "train.precondition=false", "model.grid_resolutions=4,9",
         "train.lr_grid=0.5", "scene.clothing=no", "model.knn_weighting=gaussian"]))
    assert cfg.train.iterations == 12 and isinstance(cfg.train.iterations, int)
    assert cfg.train.precondition is False
    assert cfg.model.grid_resolutions == (4, 9)
    assert cfg.train.lr_grid == 0.5
    assert cfg.scene.clothing is False
    assert cfg.model.knn_weighting == "gaussian"


def test_bad_overrides_are_rejected():
    with pytest.raises(KeyError, match="unknown setting"):
        apply_overrides(ExperimentConfig(), [("train.iters", 3)])
    with pytest.raises(KeyError, match="section"):
        apply_overrides(ExperimentConfig(), [("iterations", 3)])
    with pytest.raises(KeyError, match="section"):
        apply_overrides(ExperimentConfig(), [("optim.lr", 3)])
    with pytest.raises(ValueError, match="boolean"):
        apply_overrides(ExperimentConfig(), [("train.precondition", "maybe")])
    with pytest.raises(ValueError, match="positive"):
        apply_overrides(ExperimentConfig(), [("train.lr_anchor", "0")])
    with pytest.raises(ValueError, match="key=value"):
        parse_assignments(["train.iterations"])


def test_precedence_file_then_env_then_flags(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[train]\niterations = 7\nseed = 3\nlr_grid = 0.02\n\n[model]\nnum_anchors = 100\n")
    env = {"PIG_TRAIN_SEED": "5", "PIG_TRAIN_LR_GRID": "0.03", "HOME": "/x"}
    cfg = load_config(path, [("train.lr_grid", "0.04")], environ=env)
    assert cfg.train.iterations == 7
    assert cfg.model.num_anchors == 100
    assert cfg.train.seed == 5
    assert cfg.train.lr_grid == 0.04
    assert env_overrides(env) == [("train.lr_grid", "0.03"), ("train.seed", "5")]


def test_saved_snapshot_reloads(tmp_path):
    cfg = apply_overrides(ExperimentConfig(), [("scene.held_out_angles", "10.0, 20.5"), ("train.dtype", "float64")])
    save_config(cfg, tmp_path / "c.toml")
    assert load_config(tmp_path / "c.toml", environ={}) == cfg
