from __future__ import annotations

from dataclasses import replace

from tomoseg.config import AugmentConfig, EvalConfig, LossConfig, RunConfig, StrongAugmentConfig, TrainConfig
from tomoseg.validation import validate_run_config


def test_defaults_have_no_warnings() -> None:
    assert validate_run_config(RunConfig()) == []


def test_crop_not_divisible_warns() -> None:
    cfg = RunConfig(train=TrainConfig(crop_size=100))
    warnings = validate_run_config(cfg)
    assert any("crop_size" in w for w in warnings)


def test_patience_beyond_run_length_warns() -> None:
    cfg = RunConfig(train=TrainConfig(epochs_stage3=1, empty_mask_patience=500, samples_per_epoch=16))
    assert any("empty_mask_patience" in w for w in validate_run_config(cfg))


def test_masked_smoothing_without_smoothing_loss_warns() -> None:
    cfg = RunConfig(loss=LossConfig(name="ce", stage3_name="masked_label_smoothing"))
    assert any("epsilon" in w for w in validate_run_config(cfg))


def test_overlapping_eval_and_train_slices_warn() -> None:
    cfg = RunConfig(train=TrainConfig(slices=(0, 1, 2)), eval=EvalConfig(slices=(2, 3)))
    assert any("[2]" in w for w in validate_run_config(cfg))


def test_empty_strong_menu_warns() -> None:
    cfg = replace(RunConfig(), augment=AugmentConfig(strong=StrongAugmentConfig(ops=())))
    assert any("augment.strong" in w for w in validate_run_config(cfg))
