import json
import os

import pytest
from pydantic import ValidationError

from vocseg_config import (
    ABLATION_CONFIGS,
    FusionMode,
    ModelConfig,
    RunConfigFile,
    TrainConfig,
    format_validation_error,
    worker_count,
)


def test_defaults_validate():
    config = RunConfigFile()
    assert config.model.fusion_mode is FusionMode.CROSS_ATTENTION
    assert config.train.learning_rate == 1e-4
    assert config.contrastive.temperature == 0.07
    assert config.ablation.configs == list(ABLATION_CONFIGS)


def test_unknown_key_rejected():
    with pytest.raises(ValidationError) as info:
        RunConfigFile.model_validate({"train": {"learning_rat": 0.1}})
    assert any(line.startswith("train.learning_rat:") for line in format_validation_error(info.value))


def test_nested_error_path():
    with pytest.raises(ValidationError) as info:
        RunConfigFile.model_validate({"loss_weights": {"w_ce": -1.0}})
    assert format_validation_error(info.value)[0].startswith("loss_weights.w_ce:")


def test_patch_size_must_divide_image():
    with pytest.raises(ValidationError):
        ModelConfig(image_size=30, patch_size=8)


def test_all_zero_weights_rejected():
    with pytest.raises(ValidationError):
        RunConfigFile.model_validate({"loss_weights": {"w_ce": 0, "w_dice": 0, "w_contrastive": 0}})


def test_overrides_skip_none_and_accept_enums():
    config = RunConfigFile().with_overrides({
        "train.max_epochs": 3,
        "train.seed": None,
        "model.fusion_mode": FusionMode.CONCAT_VA,
        "dataset": "data",
    })
    assert config.train.max_epochs == 3
    assert config.train.seed == 17
    assert config.model.fusion_mode is FusionMode.CONCAT_VA
    assert config.dataset == "data"


def test_for_ablation():
    config = RunConfigFile().for_ablation("contrastive")
    assert config.model.fusion_mode is FusionMode.CONCAT_VAP
    assert config.train.contrastive


def test_dropout_resolution():
    config = RunConfigFile()
    assert config.effective_dropout_p() == config.model.modality_dropout_p
    assert config.with_overrides({"train.modality_dropout_p": 0.5}).effective_dropout_p() == 0.5


def test_default_unfreeze_schedule():
    assert TrainConfig().resolved_unfreeze_schedule(4) == [(3, 3), (6, 0), (6, 1), (6, 2)]


def test_decreasing_schedule_rejected():
    with pytest.raises(ValidationError):
        TrainConfig(unfreeze_schedule=[(5, 0), (2, 1)])


def test_write_resolved_round_trips(tmp_path):
    config = RunConfigFile().with_overrides({"train.batch_size": 2})
    path = config.write_resolved(str(tmp_path))
    with open(path) as handle:
        assert RunConfigFile.model_validate(json.load(handle)) == config


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv("VOCSEG_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("VOCSEG_THREADS", "many")
    assert worker_count() == 1


CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


@pytest.mark.parametrize("name", ["desk_ablation.json", "smoke.json"])
def test_shipped_configs_validate(name):
    config = RunConfigFile.from_json_file(os.path.join(CONFIG_DIR, name))
    assert config.model.image_size % config.model.patch_size == 0


def test_desk_config_warms_up_and_unfreezes_early():
    train = RunConfigFile.from_json_file(os.path.join(CONFIG_DIR, "desk_ablation.json")).train
    assert train.warmup_steps > 0
    assert train.lr_schedule == "linear"
    assert max(epoch for epoch, _ in train.resolved_unfreeze_schedule(2)) <= 2
    assert train.max_epochs <= 16


def test_unknown_lr_schedule_rejected():
    with pytest.raises(ValidationError):
        TrainConfig(lr_schedule="cosine")
