"""
Grad-CAM maps for segmentation networks and PNG rendering.

Purpose:
- Show which regions of a slice stack drive the network's decision for one
  class.
- Render label maps and heatmaps as 8-bit images for quick inspection.

Logic flow:
1) A forward hook captures the chosen layer's activations A (F, a, b).
2) The class score is the mean logit of target_class over the pixels
   predicted as target_class.
3) Channel weights = spatial mean of d(score)/dA.
4) Heatmap = ReLU(sum_f w_f A_f), bilinearly resized to the input and
   divided by its max (left at zero when it is zero everywhere).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import logging

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .volume_io import SliceStack

logger = logging.getLogger(__name__)

# Class k is drawn with PALETTE[k % len(PALETTE)].
PALETTE: tuple[tuple[int, int, int], ...] = (
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 212),
    (0, 128, 128),
    (220, 190, 255),
    (170, 110, 40),
    (255, 250, 200),
    (128, 0, 0),
)

DEFAULT_LAYER = "bottleneck"


@dataclass(frozen=True)
class CamHeatmap:
    values: np.ndarray
    target_class: int
    layer: str
    empty: bool = False


def _layer(model: nn.Module, name: str) -> nn.Module:
    modules = dict(model.named_modules())
    if name not in modules or name == "":
        candidates = [key for key in modules if key and "." not in key]
        raise ValueError(f"Layer '{name}' not found. Top-level layers: {candidates}.")
    return modules[name]


def grad_cam(
    model: nn.Module,
    s: SliceStack | np.ndarray | torch.Tensor,
    target_class: int,
    layer: str = DEFAULT_LAYER,
) -> CamHeatmap:
    """
    Class activation heatmap (h, w) in [0, 1] for one stack.

    If target_class is predicted nowhere the heatmap is all zero and
    empty=True.
    """

    channels = s.channels if isinstance(s, SliceStack) else s
    x = torch.as_tensor(np.asarray(channels) if not isinstance(channels, torch.Tensor) else channels)
    device = next(model.parameters()).device
    # Input carries the graph so frozen models (the EMA teacher) still yield gradients.
    x = x.to(dtype=torch.float32, device=device).unsqueeze(0).detach().requires_grad_(True)
    h, w = x.shape[-2:]

    captured: dict[str, torch.Tensor] = {}

    def hook(_module: nn.Module, _inputs: tuple, output: torch.Tensor) -> None:
        captured["activations"] = output

    handle = _layer(model, layer).register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(x)[0]
            num_classes = logits.shape[0]
            if not 0 <= target_class < num_classes:
                raise ValueError(f"target_class {target_class} outside [0, {num_classes}).")
            region = logits.argmax(dim=0) == target_class
            if not bool(region.any()):
                logger.info("Class %d not predicted in this stack; empty heatmap.", target_class)
                return CamHeatmap(values=np.zeros((h, w), dtype=np.float32), target_class=target_class, layer=layer, empty=True)

            activations = captured["activations"]
            score = logits[target_class][region].mean()
            (grads,) = torch.autograd.grad(score, activations, allow_unused=True)
            if grads is None:
                raise ValueError(f"Layer '{layer}' does not feed the class scores.")
    finally:
        handle.remove()
        model.train(was_training)

    weights = grads.mean(dim=(-2, -1), keepdim=True)
    cam = F.relu((weights * activations.detach()).sum(dim=1, keepdim=True))
    if cam.shape[-2:] != (h, w):
        cam = F.interpolate(cam, size=(h, w), mode="bilinear", align_corners=False)
    cam = cam[0, 0]
    peak = float(cam.max())
    if peak > 0:
        cam = cam / peak
    return CamHeatmap(values=cam.cpu().numpy().astype(np.float32), target_class=target_class, layer=layer)


def label_overlay(labels: np.ndarray, image: np.ndarray | None = None, opacity: float = 0.5) -> np.ndarray:
    """
    RGB uint8 rendering of a (h, w) label map, optionally blended over a
    grayscale [0, 1] image.
    """

    palette = np.asarray(PALETTE, dtype=np.float32)
    colors = palette[np.asarray(labels, dtype=np.int64) % len(PALETTE)]
    if image is not None:
        gray = np.repeat(np.clip(image, 0.0, 1.0)[..., None] * 255.0, 3, axis=-1)
        colors = (1.0 - opacity) * gray + opacity * colors
    return np.clip(np.rint(colors), 0, 255).astype(np.uint8)


def heatmap_image(cam: CamHeatmap | np.ndarray) -> np.ndarray:
    values = cam.values if isinstance(cam, CamHeatmap) else cam
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: str | Path, pixels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path)
    return path
