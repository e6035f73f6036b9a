"""
Weak (geometric) and strong (photometric) augmentation.

Purpose:
- Weak ops: the eight symmetries of the square (identity, three rotations,
  horizontal/vertical flips, transposition about both diagonals). One op is
  drawn per call and applied identically to every channel and to the label map.
- Strong ops: gamma, brightness/contrast, CLAHE and global histogram
  equalization. Each op is gated independently; parameters are shared by all
  channels; values are clipped to [0, 1]; spatial layout never changes.

All functions are pure in (input, seed) so data-loading workers can call them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable
import logging

import numpy as np
from skimage import exposure

from .config import STRONG_OPS, WEAK_OPS, AugmentConfig
from .volume_io import SliceStack

logger = logging.getLogger(__name__)

SeedLike = int | np.random.Generator | None

_WEAK_FUNCS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda a: a,
    "rot90": lambda a: np.rot90(a, 1, axes=(-2, -1)),
    "rot180": lambda a: np.rot90(a, 2, axes=(-2, -1)),
    "rot270": lambda a: np.rot90(a, 3, axes=(-2, -1)),
    "flip_h": lambda a: a[..., :, ::-1],
    "flip_v": lambda a: a[..., ::-1, :],
    "transpose": lambda a: np.swapaxes(a, -2, -1),
    "antitranspose": lambda a: np.swapaxes(a, -2, -1)[..., ::-1, ::-1],
}
_AXIS_SWAPPING = {"rot90", "rot270", "transpose", "antitranspose"}


@dataclass(frozen=True)
class AugmentPolicy:
    """
    Op menu and parameter ranges for one augmentation kind.
    """

    kind: str
    op_probabilities: dict[str, float] = field(default_factory=dict)
    gamma_range: tuple[float, float] = (0.7, 1.5)
    brightness_limit: float = 0.1
    contrast_limit: float = 0.1
    clahe_clip_limit: float = 0.01

    def __post_init__(self) -> None:
        allowed = WEAK_OPS if self.kind == "weak" else STRONG_OPS if self.kind == "strong" else None
        if allowed is None:
            raise ValueError(f"AugmentPolicy kind must be 'weak' or 'strong', got '{self.kind}'.")
        unknown = set(self.op_probabilities) - set(allowed)
        if unknown:
            raise ValueError(f"{self.kind} policy has ops outside its kind: {sorted(unknown)}.")
        for name, p in self.op_probabilities.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"Probability for '{name}' must be in [0, 1], got {p}.")

    @classmethod
    def weak(cls, ops: tuple[str, ...] = WEAK_OPS) -> "AugmentPolicy":
        # Uniform over the listed ops plus identity.
        share = 1.0 / (len(ops) + 1)
        return cls(kind="weak", op_probabilities={op: share for op in ops})

    @classmethod
    def strong(
        cls,
        ops: tuple[str, ...] = ("gamma", "brightness_contrast", "clahe"),
        probability: float = 0.5,
        **ranges,
    ) -> "AugmentPolicy":
        return cls(kind="strong", op_probabilities={op: probability for op in ops}, **ranges)

    @classmethod
    def from_config(cls, cfg: AugmentConfig) -> tuple["AugmentPolicy", "AugmentPolicy"]:
        weak = cls.weak(cfg.weak.ops) if cfg.weak.enabled else cls(kind="weak")
        strong_cfg = cfg.strong
        strong = cls.strong(
            strong_cfg.ops if strong_cfg.enabled else (),
            strong_cfg.op_probability,
            gamma_range=strong_cfg.gamma_range,
            brightness_limit=strong_cfg.brightness_limit,
            contrast_limit=strong_cfg.contrast_limit,
            clahe_clip_limit=strong_cfg.clahe_clip_limit,
        )
        return weak, strong


@dataclass(frozen=True)
class StrongParams:
    """
    One draw of photometric parameters; identity by default.
    """

    gamma: float = 1.0
    brightness: float = 0.0
    contrast: float = 0.0
    clahe: bool = False
    clahe_clip_limit: float = 0.01
    equalize: bool = False


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def apply_weak_op(array: np.ndarray, op: str) -> np.ndarray:
    """
    Apply a named geometric op to the last two axes.
    """

    if op not in _WEAK_FUNCS:
        raise ValueError(f"Unknown weak op '{op}'.")
    if op in _AXIS_SWAPPING and array.shape[-1] != array.shape[-2]:
        raise ValueError(f"Weak op '{op}' needs a square input, got {array.shape[-2:]}.")
    return np.ascontiguousarray(_WEAK_FUNCS[op](array))


def sample_weak_op(policy: AugmentPolicy, rng: np.random.Generator) -> str:
    ops = list(policy.op_probabilities)
    probs = [policy.op_probabilities[op] for op in ops]
    identity = 1.0 - sum(probs)
    if identity < -1e-9:
        raise ValueError("Weak op probabilities sum above 1.")
    choices = ["identity", *ops]
    weights = np.asarray([max(identity, 0.0), *probs])
    return str(rng.choice(choices, p=weights / weights.sum()))


def weak_augment(
    s: SliceStack,
    labels: np.ndarray | None = None,
    seed: SeedLike = None,
    *,
    policy: AugmentPolicy | None = None,
) -> tuple[SliceStack, np.ndarray | None]:
    """
    Draw one geometric op and apply it to every channel and to `labels`.
    """

    policy = policy or AugmentPolicy.weak()
    op = sample_weak_op(policy, _rng(seed))
    channels = apply_weak_op(s.channels, op)
    out_labels = apply_weak_op(labels, op) if labels is not None else None
    return SliceStack(channels=channels, center_index=s.center_index, crop_origin=s.crop_origin), out_labels


def sample_strong_params(policy: AugmentPolicy, rng: np.random.Generator) -> StrongParams:
    probs = policy.op_probabilities

    def gate(op: str) -> bool:
        # Always consume a draw so the parameter stream is stable across menus.
        draw = rng.random()
        return op in probs and draw < probs[op]

    gamma = 1.0
    brightness = 0.0
    contrast = 0.0
    if gate("gamma"):
        gamma = float(rng.uniform(*policy.gamma_range))
    if gate("brightness_contrast"):
        brightness = float(rng.uniform(-policy.brightness_limit, policy.brightness_limit))
        contrast = float(rng.uniform(-policy.contrast_limit, policy.contrast_limit))
    clahe = gate("clahe")
    equalize = gate("equalize")
    return StrongParams(
        gamma=gamma,
        brightness=brightness,
        contrast=contrast,
        clahe=clahe,
        clahe_clip_limit=policy.clahe_clip_limit,
        equalize=equalize,
    )


def apply_strong(channels: np.ndarray, params: StrongParams) -> np.ndarray:
    """
    Apply photometric params to a (C, h, w) array; output clipped to [0, 1].
    """

    out = np.clip(np.asarray(channels, dtype=np.float32), 0.0, 1.0)
    if params.equalize:
        out = np.stack([exposure.equalize_hist(ch) for ch in out]).astype(np.float32)
    if params.clahe:
        out = np.stack(
            [exposure.equalize_adapthist(ch, clip_limit=params.clahe_clip_limit) for ch in out]
        ).astype(np.float32)
    if params.gamma != 1.0:
        out = np.power(out, params.gamma, dtype=np.float32)
    if params.brightness != 0.0 or params.contrast != 0.0:
        out = out * (1.0 + params.contrast) + params.brightness
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def strong_augment(
    s: SliceStack,
    seed: SeedLike = None,
    *,
    policy: AugmentPolicy | None = None,
) -> SliceStack:
    """
    Photometric-only perturbation; never touches labels or pixel positions.
    """

    policy = policy or AugmentPolicy.strong()
    params = sample_strong_params(policy, _rng(seed))
    return SliceStack(
        channels=apply_strong(s.channels, params),
        center_index=s.center_index,
        crop_origin=s.crop_origin,
    )
