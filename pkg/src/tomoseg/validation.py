"""
Soft checks on a resolved RunConfig.

Purpose:
- Catch settings that parse fine but will likely waste a run, before any
  volume is loaded or any model is trained.
- Hard limits live in config._check_invariants; this module only warns.

Logic flow:
1) validate_run_config() inspects the resolved tree.
2) It returns a list of warning strings (empty list means no issues).
3) The CLI logs them; callers may treat them as errors.
"""

from __future__ import annotations

from .config import RunConfig
from .segnet import level_widths

MAX_SENSIBLE_CLASSES = 10


def validate_run_config(cfg: RunConfig) -> list[str]:
    """
    Return human-readable warnings for a resolved config.
    """

    warnings: list[str] = []
    factor = 2**cfg.model.depth

    # Crops must pass through every pooling level without rounding.
    if cfg.train.crop_size % factor:
        warnings.append(
            f"train.crop_size {cfg.train.crop_size} is not divisible by 2**model.depth={factor}; "
            "training will fail unless the slice is smaller and divisible."
        )

    if cfg.pseudolabel.num_classes > MAX_SENSIBLE_CLASSES:
        warnings.append(
            f"pseudolabel.num_classes={cfg.pseudolabel.num_classes} is large; clusters beyond "
            f"{MAX_SENSIBLE_CLASSES} rarely map to distinct materials."
        )

    bad_width = [w for w in level_widths(cfg.model) if w % cfg.model.norm_groups]
    if bad_width:
        warnings.append(
            f"model widths {bad_width} are not divisible by model.norm_groups={cfg.model.norm_groups}."
        )

    steps_hint = cfg.train.samples_per_epoch or (cfg.phantom.shape[0] if cfg.io.format == "phantom" else 0)
    if steps_hint:
        steps_per_epoch = -(-steps_hint // cfg.train.batch_size)
        total_steps = steps_per_epoch * cfg.train.epochs_stage3
        if total_steps and cfg.train.empty_mask_patience > total_steps:
            warnings.append(
                f"train.empty_mask_patience={cfg.train.empty_mask_patience} exceeds the "
                f"~{total_steps} stage-3 steps; the empty-mask warning can never fire."
            )

    if cfg.loss.stage3_name == "masked_label_smoothing" and cfg.loss.name != "label_smoothing":
        warnings.append(
            "loss.stage3_name=masked_label_smoothing uses the default epsilon because "
            "loss.name is not label_smoothing."
        )

    if cfg.train.stage3_pseudo_weight > 0 and cfg.io.pseudo_labels is None and cfg.io.format != "phantom":
        warnings.append(
            "train.stage3_pseudo_weight > 0 but io.pseudo_labels is unset; the run's own "
            "pseudo labels will be used."
        )

    if cfg.eval.slices is not None and cfg.train.slices is not None:
        overlap = sorted(set(cfg.eval.slices) & set(cfg.train.slices))
        if overlap:
            warnings.append(f"eval.slices overlap train.slices: {overlap}.")

    if cfg.augment.strong.enabled and not cfg.augment.strong.ops:
        warnings.append("augment.strong.enabled is true but augment.strong.ops is empty.")

    return warnings
