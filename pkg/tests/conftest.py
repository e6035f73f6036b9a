import os
from pathlib import Path

import pytest

from tomoseg.config import (
    EvalConfig,
    IoConfig,
    ModelConfig,
    PhantomSpec,
    PseudolabelConfig,
    RunConfig,
    TrainConfig,
)


@pytest.fixture(autouse=True)
def clear_env():
    keys = [
        "TOMOSEG_OUTPUT_DIR",
    ]
    original = {key: os.getenv(key) for key in keys}
    for key in keys:
        if key in os.environ:
            del os.environ[key]
    yield
    for key, value in original.items():
        if value is None:
            os.environ.pop(key, None)
        else:
            os.environ[key] = value


@pytest.fixture
def tiny_phantom() -> PhantomSpec:
    return PhantomSpec(
        shape=(8, 32, 32),
        class_means=(0.0, 0.5, 1.0),
        fractions=(0.35, 0.45, 0.20),
        structures=("background", "blobs", "blobs"),
        blob_sigma=3.0,
        seed=0,
    )


@pytest.fixture
def tiny_model() -> ModelConfig:
    return ModelConfig(
        in_channels=3,
        num_classes=3,
        depth=2,
        base_width=4,
        norm_groups=2,
        dropout_rate=0.0,
    )


@pytest.fixture
def tiny_cfg(tmp_path: Path, tiny_phantom: PhantomSpec, tiny_model: ModelConfig) -> RunConfig:
    return RunConfig(
        run_id="tiny",
        output_dir=str(tmp_path / "runs"),
        seed=0,
        io=IoConfig(format="phantom"),
        pseudolabel=PseudolabelConfig(method="kmeans", num_classes=3, n_init=1),
        model=tiny_model,
        train=TrainConfig(
            epochs_stage2=2,
            epochs_stage3=2,
            batch_size=4,
            crop_size=32,
            num_slices=3,
            samples_per_epoch=8,
            device="cpu",
        ),
        eval=EvalConfig(overlays=False, batch_size=4),
        phantom=tiny_phantom,
    )

