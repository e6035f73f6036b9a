"""
Checkpoint archives.

Layout of one archive (torch.save of a dict):
- manifest: format_version, model_config, stage, epoch, seed, run_id,
  created, param_count, update_count.
- model_state: deployed model parameters (the teacher after stage 3).
- student_state: optional, stage 3 only.
- optimizer_state: optional, used by resume.

Writes go to a temp file in the target directory and are moved into place
with os.replace, so readers never see a half-written archive.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any
import logging
import os
import tempfile

import torch
from torch import nn

from .config import ModelConfig, parse_section
from .errors import CheckpointError, ConfigError
from .segnet import build_model, param_count

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_KEYS = ("format_version", "model_config", "stage", "epoch", "seed", "run_id")


@dataclass(frozen=True)
class CheckpointMeta:
    stage: int
    epoch: int
    seed: int
    run_id: str = "run"
    update_count: int = 0
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass
class LoadedCheckpoint:
    manifest: dict[str, Any]
    model: nn.Module
    student_state: dict[str, torch.Tensor] | None
    optimizer_state: dict[str, Any] | None

    @property
    def stage(self) -> int:
        return int(self.manifest["stage"])

    @property
    def epoch(self) -> int:
        return int(self.manifest["epoch"])

    @property
    def model_config(self) -> ModelConfig:
        return model_config_from_manifest(self.manifest)


def model_config_from_manifest(manifest: dict[str, Any]) -> ModelConfig:
    try:
        return parse_section(ModelConfig, dict(manifest["model_config"]), "model")
    except (KeyError, ConfigError) as exc:
        raise CheckpointError(f"Checkpoint manifest has an invalid model_config: {exc}") from exc


def save_checkpoint(
    path: str | Path,
    model: nn.Module,
    cfg: ModelConfig,
    meta: CheckpointMeta,
    *,
    student: nn.Module | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> Path:
    """
    Atomically write a checkpoint archive and return its path.
    """

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(cfg),
        "stage": meta.stage,
        "epoch": meta.epoch,
        "seed": meta.seed,
        "run_id": meta.run_id,
        "created": datetime.now(timezone.utc).isoformat(),
        "param_count": param_count(model),
        "update_count": meta.update_count,
        **meta.extra,
    }
    payload: dict[str, Any] = {
        "manifest": manifest,
        "model_state": model.state_dict(),
    }
    if student is not None:
        payload["student_state"] = student.state_dict()
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()

    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        torch.save(payload, tmp_name)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    logger.info("Saved checkpoint %s stage=%d epoch=%d", path, meta.stage, meta.epoch)
    return path


def read_manifest(path: str | Path) -> dict[str, Any]:
    return _read_payload(path)["manifest"]


def _read_payload(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint '{path}' not found.")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"Checkpoint '{path}' could not be read: {exc}") from exc
    if not isinstance(payload, dict) or "manifest" not in payload or "model_state" not in payload:
        raise CheckpointError(f"Checkpoint '{path}' is not a tomoseg archive.")
    manifest = payload["manifest"]
    missing = [key for key in MANIFEST_KEYS if key not in manifest]
    if missing:
        raise CheckpointError(f"Checkpoint '{path}' manifest is missing keys: {missing}.")
    if manifest["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint '{path}' has format_version {manifest['format_version']}, expected {FORMAT_VERSION}."
        )
    return payload


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    """
    Read an archive and rebuild the model it describes.
    """

    payload = _read_payload(path)
    manifest = payload["manifest"]
    model = build_model(model_config_from_manifest(manifest), seed=int(manifest["seed"]))
    try:
        model.load_state_dict(payload["model_state"])
    except RuntimeError as exc:
        raise CheckpointError(f"Checkpoint '{path}' weights do not fit its model_config: {exc}") from exc
    return LoadedCheckpoint(
        manifest=manifest,
        model=model,
        student_state=payload.get("student_state"),
        optimizer_state=payload.get("optimizer_state"),
    )
