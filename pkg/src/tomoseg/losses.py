"""
Stage-2 supervised losses and the stage-3 confidence-masked cross-entropy.

Conventions:
- p and q are (..., K, h, w) tensors; the class axis is -3.
- Every loss is a mean over all pixels (batch included).
- log p is clamped at LOG_FLOOR so saturated softmax outputs stay finite.

Selection:
- build_criterion(loss_cfg) returns the configured stage-2 loss.
- build_masked_criterion(loss_cfg) returns the stage-3 masked loss.
"""

from __future__ import annotations

from typing import Callable, Mapping
import logging

import numpy as np
import torch

from .config import LossConfig
from .errors import ConfigError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
CLASS_DIM = -3

DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "ce": {},
    "label_smoothing": {"epsilon": 0.1},
    "bootstrap": {"beta": 0.95},
    "focal": {"gamma": 2.0},
    "gce": {"r": 0.7},
    "sce": {"alpha": 0.1, "beta": 1.0, "log_zero": -4.0},
    "masked_ce": {},
    "masked_label_smoothing": {"epsilon": 0.1},
}


class _EmptyMask:
    """
    Returned by masked_cross_entropy when no pixel passes the confidence gate.
    Falsy and equal to 0.0 as a float; carries no gradient.
    """

    _instance: "_EmptyMask | None" = None

    def __new__(cls) -> "_EmptyMask":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __bool__(self) -> bool:
        return False

    def __float__(self) -> float:
        return 0.0

    def __repr__(self) -> str:
        return "EMPTY_MASK"


EMPTY_MASK = _EmptyMask()

Loss = torch.Tensor | _EmptyMask


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(LOG_FLOOR))


def _check_shapes(p: torch.Tensor, q: torch.Tensor) -> None:
    if p.shape != q.shape:
        raise ValueError(f"Shape mismatch: predictions {tuple(p.shape)} vs targets {tuple(q.shape)}.")


def _true_class_prob(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    # q is one-hot, so this picks p_t per pixel.
    return (p * q).sum(dim=CLASS_DIM)


def one_hot(labels: torch.Tensor | np.ndarray, num_classes: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """
    (..., h, w) integer labels -> (..., K, h, w) one-hot targets.
    """

    labels = torch.as_tensor(labels).long()
    bad = (labels < 0) | (labels >= num_classes)
    if bool(bad.any()):
        coord = tuple(int(i) for i in torch.nonzero(bad)[0])
        raise ValueError(
            f"Label {int(labels[coord])} at pixel {coord} out of range for K={num_classes}."
        )
    encoded = torch.nn.functional.one_hot(labels, num_classes).to(dtype)
    return encoded.movedim(-1, CLASS_DIM)


def cross_entropy(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """
    -(1/M) sum_i sum_k q_ik log p_ik.
    """

    _check_shapes(p, q)
    return -(q * _safe_log(p)).sum(dim=CLASS_DIM).mean()


def label_smoothing(q: torch.Tensor, epsilon: float = 0.1) -> torch.Tensor:
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}.")
    num_classes = q.shape[CLASS_DIM]
    return (1.0 - epsilon) * q + epsilon / num_classes


def bootstrap_targets(q: torch.Tensor, p: torch.Tensor, beta: float = 0.95) -> torch.Tensor:
    """
    Soft bootstrapping: beta * q + (1 - beta) * p.

    p is not detached; the target moves with the prediction.
    """

    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}.")
    _check_shapes(p, q)
    return beta * q + (1.0 - beta) * p


def focal_loss(p: torch.Tensor, q: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}.")
    _check_shapes(p, q)
    p_t = _true_class_prob(p, q)
    # Floored so gamma < 1 keeps a finite gradient at p_t == 1.
    modulator = (1.0 - p_t).clamp_min(LOG_FLOOR) ** gamma
    return (-modulator * _safe_log(p_t)).mean()


def generalized_ce(p: torch.Tensor, q: torch.Tensor, r: float = 0.7) -> torch.Tensor:
    if not 0.0 < r <= 1.0:
        raise ValueError(f"r must be in (0, 1], got {r}.")
    _check_shapes(p, q)
    p_t = _true_class_prob(p, q)
    return ((1.0 - p_t.clamp_min(LOG_FLOOR) ** r) / r).mean()


def symmetric_ce(
    p: torch.Tensor,
    q: torch.Tensor,
    alpha: float = 0.1,
    beta: float = 1.0,
    log_zero: float = -4.0,
) -> torch.Tensor:
    """
    alpha * CE(q || p) + beta * RCE(p || q); log 0 inside RCE is log_zero.
    """

    if alpha < 0 or beta < 0:
        raise ValueError(f"alpha and beta must be >= 0, got {alpha}, {beta}.")
    _check_shapes(p, q)
    log_q = torch.where(q > 0, torch.log(q.clamp_min(LOG_FLOOR)), torch.full_like(q, log_zero))
    reverse = -(p * log_q).sum(dim=CLASS_DIM).mean()
    return alpha * cross_entropy(p, q) + beta * reverse


def masked_cross_entropy(p_student: torch.Tensor, q_teacher: torch.Tensor, m: torch.Tensor) -> Loss:
    """
    Cross-entropy over confident pixels only, normalized by their count.

    m has p's shape minus the class axis. Returns EMPTY_MASK when sum(m) == 0.
    """

    _check_shapes(p_student, q_teacher)
    expected = p_student.shape[:CLASS_DIM] + p_student.shape[CLASS_DIM + 1 :]
    if tuple(m.shape) != tuple(expected):
        raise ValueError(f"Mask shape {tuple(m.shape)} does not match pixel grid {tuple(expected)}.")
    weights = m.to(p_student.dtype)
    count = weights.sum()
    if float(count) == 0.0:
        return EMPTY_MASK
    per_pixel = -(q_teacher * _safe_log(p_student)).sum(dim=CLASS_DIM)
    return (per_pixel * weights).sum() / count


def _resolve_params(name: str, params: Mapping[str, float]) -> dict[str, float]:
    defaults = DEFAULT_PARAMS[name]
    unknown = sorted(set(params) - set(defaults))
    if unknown:
        raise ConfigError(
            f"Unknown loss.params for '{name}': {unknown}. Allowed: {sorted(defaults) or 'none'}."
        )
    return {**defaults, **{key: float(value) for key, value in params.items()}}


Criterion = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
MaskedCriterion = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], Loss]


def build_criterion(cfg: LossConfig) -> Criterion:
    """
    Stage-2 loss as f(p, q_one_hot).
    """

    if cfg.name not in DEFAULT_PARAMS or cfg.name.startswith("masked_"):
        raise ConfigError(f"Unknown stage-2 loss '{cfg.name}'.")
    params = _resolve_params(cfg.name, cfg.params)

    if cfg.name == "ce":
        return cross_entropy
    if cfg.name == "label_smoothing":
        return lambda p, q: cross_entropy(p, label_smoothing(q, params["epsilon"]))
    if cfg.name == "bootstrap":
        return lambda p, q: cross_entropy(p, bootstrap_targets(q, p, params["beta"]))
    if cfg.name == "focal":
        return lambda p, q: focal_loss(p, q, params["gamma"])
    if cfg.name == "gce":
        return lambda p, q: generalized_ce(p, q, params["r"])
    return lambda p, q: symmetric_ce(p, q, params["alpha"], params["beta"], params["log_zero"])


def build_masked_criterion(cfg: LossConfig) -> MaskedCriterion:
    """
    Stage-3 loss as f(p_student, q_teacher, mask).

    masked_label_smoothing takes its epsilon from loss.params when the stage-2
    loss is label_smoothing too.
    """

    if cfg.stage3_name == "masked_ce":
        return masked_cross_entropy
    if cfg.stage3_name == "masked_label_smoothing":
        source = cfg.params if cfg.name == "label_smoothing" else {}
        epsilon = _resolve_params("masked_label_smoothing", source)["epsilon"]
        return lambda p, q, m: masked_cross_entropy(p, label_smoothing(q, epsilon), m)
    raise ConfigError(f"Unknown stage-3 loss '{cfg.stage3_name}'.")
