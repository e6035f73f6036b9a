from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from tomoseg import config
from tomoseg.errors import ConfigError


def write_run_yaml(path: Path, body: str) -> Path:
    path.write_text(body.strip(), encoding="utf-8")
    return path


def test_defaults_materialize_without_file() -> None:
    cfg = config.load_run_config(None)
    assert cfg.train.delta == 0.5
    assert cfg.train.alpha == 0.99
    assert cfg.model.in_channels == cfg.train.num_slices == 7
    assert cfg.model.num_classes == cfg.pseudolabel.num_classes == 4
    assert cfg.loss.stage3_name == "masked_ce"


def test_yaml_lists_become_tuples_and_ints_become_floats(tmp_path: Path) -> None:
    path = write_run_yaml(
        tmp_path / "run.yaml",
        """
train:
  learning_rate: 1
  slices: [0, 2, 4]
augment:
  strong:
    gamma_range: [1, 2]
""",
    )
    cfg = config.load_run_config(path)
    assert cfg.train.learning_rate == 1.0
    assert isinstance(cfg.train.learning_rate, float)
    assert cfg.train.slices == (0, 2, 4)
    assert cfg.augment.strong.gamma_range == (1.0, 2.0)
    assert isinstance(cfg.augment.strong.gamma_range[0], float)


def test_unknown_key_names_the_dotted_path(tmp_path: Path) -> None:
    path = write_run_yaml(tmp_path / "run.yaml", "train:\n  deltta: 0.6\n")
    with pytest.raises(ConfigError, match="train.deltta"):
        config.load_run_config(path)


def test_wrong_type_names_the_key(tmp_path: Path) -> None:
    path = write_run_yaml(tmp_path / "run.yaml", "train:\n  batch_size: many\n")
    with pytest.raises(ConfigError, match="train.batch_size"):
        config.load_run_config(path)


@pytest.mark.parametrize(
    "override",
    [
        "train.delta=1.0",
        "train.delta=0.0",
        "train.alpha=1.0",
        "train.num_slices=4",
        "pseudolabel.method=watershed",
        "loss.name=dice",
        "loss.stage3_name=ce",
        "io.format=nifti",
    ],
)
def test_invariant_violations_raise(override: str) -> None:
    with pytest.raises(ConfigError):
        config.load_run_config(None, [override])


def test_in_channels_must_match_num_slices() -> None:
    with pytest.raises(ConfigError, match="in_channels"):
        config.load_run_config(None, ["train.num_slices=5"])
    cfg = config.load_run_config(None, ["train.num_slices=5", "model.in_channels=5"])
    assert cfg.model.in_channels == 5


def test_model_classes_must_match_cluster_count() -> None:
    with pytest.raises(ConfigError, match="num_classes"):
        config.load_run_config(None, ["pseudolabel.num_classes=6"])


def test_overrides_keep_yaml_scalar_types() -> None:
    raw = config.apply_overrides({}, ["train.delta=0.6", "eval.overlays=false", "train.slices=[1, 2]"])
    assert raw == {"train": {"delta": 0.6, "slices": [1, 2]}, "eval": {"overlays": False}}


def test_malformed_override_raises() -> None:
    with pytest.raises(ConfigError):
        config.apply_overrides({}, ["train.delta"])


def test_output_dir_env_override(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv(config.OUTPUT_DIR_ENV, str(tmp_path / "elsewhere"))
    cfg = config.load_run_config(None, ["run_id=abc"])
    assert cfg.run_dir == tmp_path / "elsewhere" / "abc"


def test_missing_config_file_raises(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="not found"):
        config.load_run_config(tmp_path / "absent.yaml")


def test_path_required_for_file_formats() -> None:
    with pytest.raises(ConfigError, match="io.path"):
        config.load_run_config(None, ["io.format=raw"])


def test_resolved_config_reloads_to_the_same_tree(tmp_path: Path) -> None:
    cfg = config.load_run_config(None, ["train.delta=0.7", "loss.name=focal", "loss.params={gamma: 1.5}"])
    target = config.write_resolved_config(cfg, tmp_path / "resolved.yaml")
    raw = yaml.safe_load(target.read_text(encoding="utf-8"))
    assert raw["train"]["delta"] == 0.7
    assert config.parse_run_config(raw) == cfg


def test_shipped_configs_parse() -> None:
    root = Path(__file__).resolve().parents[1] / "config"
    for name in ("reference.yaml", "phantom_small.yaml"):
        cfg = config.load_run_config(root / name, ["io.path=/tmp/unused"])
        assert cfg.model.in_channels == cfg.train.num_slices
