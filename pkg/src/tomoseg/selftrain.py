"""
Stage 2 (supervised on pseudo labels) and stage 3 (student-teacher
self-correction) training loops.

Purpose:
- Stage 2: fit the network to stage-1 pseudo labels on weakly augmented
  2.5D crops.
- Stage 3: an EMA teacher labels the weak view; the student learns from a
  photometrically perturbed copy of that same view, on confident pixels
  only. The teacher is the deployed model.

Logic flow (one stage-3 step):
1) teacher (eval mode, no grad) -> softmax on weak view -> argmax one-hot
   targets and confidence mask (max prob > delta).
2) student (train mode) -> softmax on strong view -> masked cross-entropy.
3) student gradient step, then teacher <- alpha * teacher + (1 - alpha) * student.
An empty mask skips both the gradient step and the EMA update.

Tracing notes:
- One metrics.jsonl record per epoch (stage, epoch, loss, confidence, masked
  fraction, optional metrics); see run_log.RunLog.
- Every sample draws from default_rng([seed, epoch, index]), so data order
  and augmentation do not depend on the number of loader workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
import copy
import logging

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset

from .augment import AugmentPolicy, strong_augment, weak_augment
from .checkpoint import CheckpointMeta, LoadedCheckpoint, load_checkpoint, save_checkpoint
from .config import ModelConfig, RunConfig
from .errors import CheckpointError, ConfigError, TrainingDivergedError
from .losses import (
    EMPTY_MASK,
    MaskedCriterion,
    build_criterion,
    build_masked_criterion,
    cross_entropy,
    masked_cross_entropy,
    one_hot,
)
from .metrics import MetricReport, miou
from .run_log import RunLog
from .segnet import predict, softmax_probs
from .volume_io import (
    LABEL_DTYPE,
    LabelVolume,
    SliceStack,
    Volume,
    crop_window,
    extract_stack,
    random_crop,
)

logger = logging.getLogger(__name__)


@dataclass
class TeacherState:
    """
    EMA copy of the student. Never receives gradients.
    """

    model: nn.Module
    alpha: float
    update_count: int = 0

    @classmethod
    def from_student(cls, student: nn.Module, alpha: float) -> "TeacherState":
        teacher = copy.deepcopy(student)
        for param in teacher.parameters():
            param.requires_grad_(False)
        teacher.eval()
        return cls(model=teacher, alpha=alpha)


@dataclass(frozen=True)
class StepResult:
    loss: float | None
    masked_fraction: float
    mean_confidence: float
    skipped: bool


@dataclass
class TrainResult:
    model: nn.Module
    checkpoint: Path | None
    records: list[dict[str, Any]] = field(default_factory=list)
    student: nn.Module | None = None
    update_count: int = 0


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def confidence_mask(p_teacher: torch.Tensor, delta: float) -> torch.Tensor:
    """
    1 where the max class probability is strictly above delta.
    """

    return p_teacher.amax(dim=-3) > delta


@torch.no_grad()
def ema_update(teacher: TeacherState, student: nn.Module, alpha: float | None = None) -> TeacherState:
    """
    theta_T <- alpha * theta_T + (1 - alpha) * theta_S, in place.
    """

    alpha = teacher.alpha if alpha is None else alpha
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}.")
    t_state = teacher.model.state_dict()
    s_state = student.state_dict()
    if t_state.keys() != s_state.keys():
        raise ValueError("Teacher and student parameter trees differ.")
    for name, t_value in t_state.items():
        s_value = s_state[name]
        if t_value.shape != s_value.shape:
            raise ValueError(
                f"Shape mismatch at '{name}': teacher {tuple(t_value.shape)} vs student {tuple(s_value.shape)}."
            )
        if t_value.is_floating_point():
            t_value.mul_(alpha).add_(s_value.detach(), alpha=1.0 - alpha)
        else:
            t_value.copy_(s_value)
    teacher.update_count += 1
    return teacher


class _CropDataset(Dataset):
    """
    Shared crop/weak-augment pipeline over a list of center slices.
    """

    def __init__(
        self,
        volume: Volume,
        centers: list[int],
        *,
        num_slices: int,
        crop_size: int,
        weak: AugmentPolicy,
        seed: int,
        length: int,
        pseudo: LabelVolume | None = None,
    ) -> None:
        if not centers:
            raise ConfigError("No training slices selected.")
        self.volume = volume
        self.centers = centers
        self.num_slices = num_slices
        self.crop_size = crop_size
        self.weak = weak
        self.seed = seed
        self.length = length
        self.pseudo = pseudo
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return self.length

    def _weak_view(self, index: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
        center = self.centers[index % len(self.centers)]
        stack = random_crop(extract_stack(self.volume, center, self.num_slices), self.crop_size, rng)
        labels = None
        if self.pseudo is not None:
            labels = crop_window(self.pseudo.labels[center], stack.crop_origin, stack.spatial_shape)
        view, labels = weak_augment(stack, labels, rng, policy=self.weak)
        return view.channels, labels

    def _rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.epoch, index])


class Stage2Dataset(_CropDataset):
    def __getitem__(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        x, y = self._weak_view(index, self._rng(index))
        return np.ascontiguousarray(x, dtype=np.float32), np.ascontiguousarray(y, dtype=np.int64)


class Stage3Dataset(_CropDataset):
    """
    Yields (weak view, strong copy of the weak view, pseudo labels or -1).
    """

    def __init__(self, *args: Any, strong: AugmentPolicy, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)
        self.strong = strong

    def __getitem__(self, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rng = self._rng(index)
        x_weak, y = self._weak_view(index, rng)
        x_strong = strong_augment(SliceStack(channels=x_weak, center_index=0), rng, policy=self.strong).channels
        if y is None:
            y = np.full(x_weak.shape[-2:], -1, dtype=np.int64)
        return (
            np.ascontiguousarray(x_weak, dtype=np.float32),
            np.ascontiguousarray(x_strong, dtype=np.float32),
            np.ascontiguousarray(y, dtype=np.int64),
        )


def training_slices(volume: Volume, cfg: RunConfig) -> list[int]:
    if cfg.train.slices is not None:
        centers = [int(z) for z in cfg.train.slices]
    else:
        held_out = set(cfg.eval.slices or ())
        centers = [z for z in range(volume.shape[0]) if z not in held_out]
    bad = [z for z in centers if not 0 <= z < volume.shape[0]]
    if bad:
        raise ConfigError(f"train.slices {bad} outside volume depth {volume.shape[0]}.")
    return centers


def effective_crop(volume: Volume, cfg: RunConfig) -> int:
    side = min(cfg.train.crop_size, volume.shape[1], volume.shape[2])
    factor = 2**cfg.model.depth
    if side % factor:
        raise ConfigError(
            f"Crop side {side} (train.crop_size clipped to the slice) must be divisible by 2**model.depth={factor}."
        )
    return side


def _loader(dataset: Dataset, cfg: RunConfig, epoch: int) -> DataLoader:
    order = np.random.default_rng([cfg.seed, epoch, 7]).permutation(len(dataset)).tolist()
    return DataLoader(
        dataset,
        batch_size=cfg.train.batch_size,
        sampler=order,
        num_workers=cfg.workers,
        drop_last=False,
    )


def _optimizer(model: nn.Module, cfg: RunConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(
        model.parameters(),
        lr=cfg.train.learning_rate,
        weight_decay=cfg.train.weight_decay,
    )


def predict_volume(
    model: nn.Module,
    volume: Volume,
    num_slices: int,
    *,
    slices: list[int] | tuple[int, ...] | None = None,
    batch_size: int = 4,
    device: torch.device | None = None,
) -> LabelVolume:
    """
    Label the given slices (default: all) with 2.5D stacks.

    Slices are edge-padded up to a multiple of 2**depth and cropped back.
    """

    mcfg: ModelConfig = model.cfg  # type: ignore[assignment]
    device = device or next(model.parameters()).device
    centers = list(range(volume.shape[0])) if slices is None else [int(z) for z in slices]
    factor = 2**mcfg.depth
    h, w = volume.shape[1:]
    pad_h, pad_w = (-h) % factor, (-w) % factor

    out = np.empty((len(centers), h, w), dtype=LABEL_DTYPE)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(centers), batch_size):
                chunk = centers[start : start + batch_size]
                stacks = [extract_stack(volume, z, num_slices).channels for z in chunk]
                batch = np.stack(stacks)
                if pad_h or pad_w:
                    batch = np.pad(batch, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="edge")
                x = torch.as_tensor(batch, dtype=torch.float32, device=device)
                labels = predict(softmax_probs(model(x)))[:, :h, :w]
                out[start : start + len(chunk)] = labels.cpu().numpy().astype(LABEL_DTYPE)
    finally:
        model.train(was_training)
    return LabelVolume(labels=out, num_classes=mcfg.num_classes, provenance="predicted")


def evaluate_model(
    model: nn.Module,
    volume: Volume,
    ground_truth: LabelVolume,
    cfg: RunConfig,
) -> MetricReport:
    slices = list(cfg.eval.slices) if cfg.eval.slices is not None else None
    pred = predict_volume(model, volume, cfg.train.num_slices, slices=slices, batch_size=cfg.eval.batch_size)
    gt = ground_truth.labels if slices is None else ground_truth.labels[slices]
    return miou(pred.labels, gt, cfg.eval.ignore_classes, num_classes=max(pred.num_classes, ground_truth.num_classes))


def _eval_due(cfg: RunConfig, epoch: int, last_epoch: int) -> bool:
    if epoch == last_epoch:
        return True
    return cfg.eval.every > 0 and epoch % cfg.eval.every == 0


def _save_last_good(
    run_dir: Path | None,
    stage: int,
    epoch: int,
    model: nn.Module,
    cfg: RunConfig,
    optimizer: torch.optim.Optimizer,
    *,
    student: nn.Module | None = None,
    update_count: int = 0,
    fallback: Path | None = None,
) -> Path | None:
    """
    Write the not-yet-stepped weights as stage{N}_last_good.pt before a
    divergence abort. Falls back to the last periodic checkpoint when the
    weights themselves are no longer finite.
    """

    if run_dir is None:
        return fallback
    nets = [model] if student is None else [model, student]
    if not all(bool(torch.isfinite(p).all()) for net in nets for p in net.parameters()):
        logger.warning("Weights are not finite; keeping last good checkpoint %s.", fallback)
        return fallback
    meta = CheckpointMeta(
        stage=stage,
        epoch=epoch - 1,
        seed=cfg.seed,
        run_id=cfg.run_id,
        update_count=update_count,
        extra={"diverged_at_epoch": epoch},
    )
    path = save_checkpoint(
        run_dir / f"stage{stage}_last_good.pt", model, cfg.model, meta, student=student, optimizer=optimizer
    )
    logger.error("Stage %d diverged at epoch %d; last good weights in %s.", stage, epoch, path)
    return path


def _resume(
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    path: str,
    stage: int,
) -> tuple[int, LoadedCheckpoint]:
    loaded = load_checkpoint(path)
    if loaded.stage != stage:
        raise CheckpointError(f"Cannot resume stage {stage} from a stage {loaded.stage} checkpoint '{path}'.")
    model.load_state_dict(loaded.model.state_dict())
    if loaded.optimizer_state is not None:
        optimizer.load_state_dict(loaded.optimizer_state)
    logger.info("Resuming stage %d after epoch %d from %s", stage, loaded.epoch, path)
    return loaded.epoch, loaded


def train_stage2(
    model: nn.Module,
    volume: Volume,
    pseudo: LabelVolume,
    cfg: RunConfig,
    *,
    run_dir: str | Path | None = None,
    ground_truth: LabelVolume | None = None,
) -> TrainResult:
    """
    Supervised training on stage-1 pseudo labels.

    Writes stage2.pt (and stage2_epoch{N}.pt every train.checkpoint_every
    epochs) under run_dir when given.
    """

    if pseudo.shape != volume.shape:
        raise ConfigError(f"Pseudo labels {pseudo.shape} do not match volume {volume.shape}.")
    if pseudo.num_classes != cfg.model.num_classes:
        raise ConfigError(
            f"Pseudo labels have K={pseudo.num_classes}, model.num_classes={cfg.model.num_classes}."
        )

    seed_everything(cfg.seed)
    device = resolve_device(cfg.train.device)
    model.to(device)
    run_dir = Path(run_dir) if run_dir is not None else None
    log = RunLog(run_dir / "metrics.jsonl" if run_dir else None)

    weak, _ = AugmentPolicy.from_config(cfg.augment)
    centers = training_slices(volume, cfg)
    dataset = Stage2Dataset(
        volume,
        centers,
        num_slices=cfg.train.num_slices,
        crop_size=effective_crop(volume, cfg),
        weak=weak,
        seed=cfg.seed,
        length=cfg.train.samples_per_epoch or len(centers),
        pseudo=pseudo,
    )
    criterion = build_criterion(cfg.loss)
    optimizer = _optimizer(model, cfg)

    start_epoch = 0
    if cfg.train.resume:
        start_epoch, _ = _resume(model, optimizer, cfg.train.resume, stage=2)
    log.start(2, after_epoch=start_epoch)

    last_good: Path | None = None
    epochs = cfg.train.epochs_stage2
    for epoch in range(start_epoch + 1, epochs + 1):
        dataset.set_epoch(epoch)
        model.train()
        loss_sum = 0.0
        conf_sum = 0.0
        steps = 0
        for x, y in _loader(dataset, cfg, epoch):
            x, y = x.to(device), y.to(device)
            p = softmax_probs(model(x))
            loss = criterion(p, one_hot(y, cfg.model.num_classes, dtype=p.dtype))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"Stage 2 loss became {float(loss)} at epoch {epoch}.",
                    last_good_checkpoint=_save_last_good(
                        run_dir, 2, epoch, model, cfg, optimizer, fallback=last_good
                    ),
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.detach())
            conf_sum += float(p.detach().amax(dim=-3).mean())
            steps += 1

        record: dict[str, Any] = {
            "stage": 2,
            "epoch": epoch,
            "loss": loss_sum / max(steps, 1),
            "mean_confidence": conf_sum / max(steps, 1),
        }
        if ground_truth is not None and _eval_due(cfg, epoch, epochs):
            report = evaluate_model(model, volume, ground_truth, cfg)
            record["metrics"] = {"pixel_accuracy": report.pixel_accuracy, "miou": report.miou}
        log.append(**record)

        if run_dir is not None:
            meta = CheckpointMeta(stage=2, epoch=epoch, seed=cfg.seed, run_id=cfg.run_id)
            if cfg.train.checkpoint_every and epoch % cfg.train.checkpoint_every == 0:
                last_good = save_checkpoint(
                    run_dir / f"stage2_epoch{epoch}.pt", model, cfg.model, meta, optimizer=optimizer
                )

    final: Path | None = None
    if run_dir is not None:
        meta = CheckpointMeta(stage=2, epoch=max(epochs, start_epoch), seed=cfg.seed, run_id=cfg.run_id)
        final = save_checkpoint(run_dir / "stage2.pt", model, cfg.model, meta, optimizer=optimizer)
    return TrainResult(model=model, checkpoint=final, records=log.records)


def self_correction_step(
    student: nn.Module,
    teacher: TeacherState,
    optimizer: torch.optim.Optimizer,
    weak_x: torch.Tensor,
    strong_x: torch.Tensor,
    *,
    delta: float,
    criterion: MaskedCriterion = masked_cross_entropy,
    pseudo_targets: torch.Tensor | None = None,
    pseudo_weight: float = 0.0,
    allow_degenerate: bool = False,
) -> StepResult:
    """
    One teacher-labels / student-learns / EMA step.

    weak_x and strong_x must be the same crop; strong_x differs only in
    intensity, so targets and predictions share the pixel grid.
    allow_degenerate admits delta == 0 for self-distillation checks.
    """

    if weak_x.shape != strong_x.shape:
        raise ValueError(f"Weak/strong views differ in shape: {tuple(weak_x.shape)} vs {tuple(strong_x.shape)}.")
    if not (0.0 < delta < 1.0 or (allow_degenerate and delta == 0.0)):
        raise ValueError(f"delta must be in (0, 1), got {delta}.")

    teacher.model.eval()
    with torch.no_grad():
        p_teacher = softmax_probs(teacher.model(weak_x))
        num_classes = p_teacher.shape[-3]
        q_teacher = one_hot(predict(p_teacher), num_classes, dtype=p_teacher.dtype)
        mask = confidence_mask(p_teacher, delta)
    masked_fraction = float(mask.float().mean())
    mean_confidence = float(p_teacher.amax(dim=-3).mean())

    student.train()
    p_student = softmax_probs(student(strong_x))
    loss = criterion(p_student, q_teacher, mask)
    if loss is EMPTY_MASK:
        return StepResult(loss=None, masked_fraction=0.0, mean_confidence=mean_confidence, skipped=True)

    if pseudo_weight > 0.0 and pseudo_targets is not None and bool((pseudo_targets >= 0).all()):
        loss = loss + pseudo_weight * cross_entropy(
            p_student, one_hot(pseudo_targets, num_classes, dtype=p_student.dtype)
        )
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"Stage 3 loss became {float(loss)}.")

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    ema_update(teacher, student)
    return StepResult(
        loss=float(loss.detach()),
        masked_fraction=masked_fraction,
        mean_confidence=mean_confidence,
        skipped=False,
    )


def train_stage3(
    stage2: LoadedCheckpoint | nn.Module,
    volume: Volume,
    cfg: RunConfig,
    *,
    run_dir: str | Path | None = None,
    pseudo: LabelVolume | None = None,
    ground_truth: LabelVolume | None = None,
) -> TrainResult:
    """
    Self-correction starting from a stage-2 model; returns the teacher.

    Stage-1 pseudo labels are used only when train.stage3_pseudo_weight > 0.
    """

    if isinstance(stage2, LoadedCheckpoint):
        if stage2.stage != 2:
            raise CheckpointError(f"Stage 3 needs a stage-2 checkpoint, got stage {stage2.stage}.")
        student = stage2.model
    else:
        student = stage2

    seed_everything(cfg.seed)
    device = resolve_device(cfg.train.device)
    student.to(device)
    run_dir = Path(run_dir) if run_dir is not None else None
    log = RunLog(run_dir / "metrics.jsonl" if run_dir else None)

    teacher = TeacherState.from_student(student, cfg.train.alpha)
    optimizer = _optimizer(student, cfg)
    start_epoch = 0
    if cfg.train.resume:
        start_epoch, loaded = _resume(teacher.model, optimizer, cfg.train.resume, stage=3)
        if loaded.student_state is None:
            raise CheckpointError(f"Stage-3 checkpoint '{cfg.train.resume}' has no student weights.")
        student.load_state_dict(loaded.student_state)
        teacher.update_count = int(loaded.manifest.get("update_count", 0))
    log.start(3, after_epoch=start_epoch)

    weak, strong = AugmentPolicy.from_config(cfg.augment)
    use_pseudo = cfg.train.stage3_pseudo_weight > 0.0
    if use_pseudo and pseudo is None:
        raise ConfigError("train.stage3_pseudo_weight > 0 needs stage-1 pseudo labels.")
    centers = training_slices(volume, cfg)
    dataset = Stage3Dataset(
        volume,
        centers,
        num_slices=cfg.train.num_slices,
        crop_size=effective_crop(volume, cfg),
        weak=weak,
        seed=cfg.seed,
        length=cfg.train.samples_per_epoch or len(centers),
        pseudo=pseudo if use_pseudo else None,
        strong=strong,
    )
    criterion = build_masked_criterion(cfg.loss)

    empty_streak = 0
    epochs = cfg.train.epochs_stage3
    for epoch in range(start_epoch + 1, epochs + 1):
        dataset.set_epoch(epoch)
        losses: list[float] = []
        fractions: list[float] = []
        confidences: list[float] = []
        skipped = 0
        for weak_x, strong_x, y in _loader(dataset, cfg, epoch):
            try:
                result = self_correction_step(
                    student,
                    teacher,
                    optimizer,
                    weak_x.to(device),
                    strong_x.to(device),
                    delta=cfg.train.delta,
                    criterion=criterion,
                    pseudo_targets=y.to(device) if use_pseudo else None,
                    pseudo_weight=cfg.train.stage3_pseudo_weight,
                )
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(
                    f"{exc} (epoch {epoch})",
                    last_good_checkpoint=_save_last_good(
                        run_dir,
                        3,
                        epoch,
                        teacher.model,
                        cfg,
                        optimizer,
                        student=student,
                        update_count=teacher.update_count,
                    ),
                ) from exc
            confidences.append(result.mean_confidence)
            fractions.append(result.masked_fraction)
            if result.skipped:
                skipped += 1
                empty_streak += 1
                if empty_streak == cfg.train.empty_mask_patience + 1:
                    logger.warning(
                        "No confident pixels for %d consecutive steps (delta=%.3f); continuing.",
                        empty_streak,
                        cfg.train.delta,
                    )
                continue
            empty_streak = 0
            losses.append(result.loss)

        record: dict[str, Any] = {
            "stage": 3,
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else None,
            "masked_fraction": float(np.mean(fractions)) if fractions else 0.0,
            "mean_confidence": float(np.mean(confidences)) if confidences else 0.0,
            "skipped_steps": skipped,
            "update_count": teacher.update_count,
        }
        if ground_truth is not None and _eval_due(cfg, epoch, epochs):
            t_report = evaluate_model(teacher.model, volume, ground_truth, cfg)
            s_report = evaluate_model(student, volume, ground_truth, cfg)
            record["metrics"] = {
                "teacher": {"pixel_accuracy": t_report.pixel_accuracy, "miou": t_report.miou},
                "student": {"pixel_accuracy": s_report.pixel_accuracy, "miou": s_report.miou},
            }
        log.append(**record)

    final: Path | None = None
    if run_dir is not None:
        meta = CheckpointMeta(
            stage=3,
            epoch=max(epochs, start_epoch),
            seed=cfg.seed,
            run_id=cfg.run_id,
            update_count=teacher.update_count,
        )
        final = save_checkpoint(
            run_dir / "stage3.pt", teacher.model, cfg.model, meta, student=student, optimizer=optimizer
        )
    return TrainResult(
        model=teacher.model,
        checkpoint=final,
        records=log.records,
        student=student,
        update_count=teacher.update_count,
    )
