import pytest

from pigavatar.config import ExperimentConfig, apply_overrides
from pigavatar.synth import generate


def tiny_config(**overrides) -> ExperimentConfig:
    """A scene and model small enough for a few optimisation steps per test."""
    base = {
        "scene.frames": 5, "scene.image_size": 40, "scene.focal": 73.0, "scene.surface_points": 3000,
        "scene.train_cameras": 4, "scene.held_out_angles": (22.5,),
        "model.num_anchors": 400, "model.width": 32, "model.depth": 2, "model.feature_dim": 8,
        "model.grid_resolutions": (4, 7), "model.model_width": 16, "model.model_depth": 2,
        "train.views_per_iter": 2, "train.timesteps_per_iter": 2, "train.zbar_subsample": 64,
        "train.iterations": 4, "train.log_every": 1,
    }
    base.update(overrides)
    return apply_overrides(ExperimentConfig(), list(base.items()))


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(tiny_config().scene)


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
