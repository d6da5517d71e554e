# tests/conftest.py

import pytest

from app.config import ExperimentConfig


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run full-scale experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_cfg() -> ExperimentConfig:
    """Reduced dimensions: same code paths, seconds instead of minutes."""
    return ExperimentConfig(
        seed=3,
        subjects_per_class=3,
        videos_per_subject=2,
        frames_per_video=24,
        f_in=4,
        window=12,
        train_stride=6,
        n_folds=3,
        d=16,
        n_layers=2,
        n_heads=2,
        k_ctx=2,
        n_global=1,
        epochs=2,
        batch_size=8,
        sentences_per_set=2,
        decoder_layers=1,
        decoder_heads=2,
        decoder_prefix=2,
        decoder_epochs=1,
        decoder_batch_size=16,
        decoder_parameter_sets=24,
        decoder_combinations=3,
        decoder_sentences_per_set=3,
    )


@pytest.fixture
def run_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("GAIT_RUN_ROOT", str(root))
    return root
