import os

import numpy as np
import pytest

import numcore as nc
from synth_data import SynthSettings, load_dataset, preprocess_dataset, write_dataset
from vocseg_config import FusionMode, ModelConfig, TrainConfig


def pytest_collection_modifyitems(config, items):
    if os.getenv("VOCSEG_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set VOCSEG_RUN_SLOW=1 to run desk-scale tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def float64():
    with nc.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(mode: FusionMode = FusionMode.CROSS_ATTENTION, **overrides) -> ModelConfig:
    values = dict(
        image_size=16,
        patch_size=4,
        d_model=16,
        n_heads=2,
        n_encoder_layers=2,
        n_decoder_layers=1,
        mlp_ratio=2,
        n_audio_frames=4,
        n_audio_features=16,
        n_phono_classes=12,
        n_seg_classes=5,
        fusion_mode=mode,
    )
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def fast_train_config():
    return TrainConfig(learning_rate=1e-3, batch_size=4, patience=2, max_epochs=2, seed=5)


TINY_SETTINGS = SynthSettings(n_speakers=3, frames_per_speaker=8, augmentations=1, seed=17)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_dataset")
    write_dataset(str(out), TINY_SETTINGS)
    return str(out)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


@pytest.fixture(scope="session")
def tiny_samples(tiny_dataset):
    return preprocess_dataset(tiny_dataset.samples, 16)
