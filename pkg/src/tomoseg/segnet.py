"""
Encoder-decoder segmentation network with toggleable skip connections.

Purpose:
- Map a (C, h, w) slice stack to (K, h, w) logits.
- Keep the layout a pure function of ModelConfig so parameter counts and
  checkpoints are reproducible.

Layout (depth L, base width w):
- encoder level i (0..L-1): DoubleConv at width w * 2**i, then 2x2 max-pool.
- bottleneck: DoubleConv at width w * 2**L.
- decoder level i (L-1..0): 2x2 transposed conv up to width w * 2**i, optional
  concat with encoder level i, DoubleConv.
- head: 1x1 conv to K logits.
Every DoubleConv is conv3x3 -> GroupNorm -> PReLU (twice) followed by dropout.
"""

from __future__ import annotations

from typing import Callable
import logging

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .errors import ModelConfigError
from .volume_io import SliceStack

logger = logging.getLogger(__name__)


class DoubleConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, groups: int, dropout_rate: float) -> None:
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.GroupNorm(groups, out_channels),
            nn.PReLU(),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
            nn.GroupNorm(groups, out_channels),
            nn.PReLU(),
            nn.Dropout2d(dropout_rate),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class UpBlock(nn.Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        groups: int,
        dropout_rate: float,
        *,
        skip: bool,
    ) -> None:
        super().__init__()
        self.skip = skip
        self.up = nn.ConvTranspose2d(in_channels, out_channels, kernel_size=2, stride=2)
        merged = out_channels * 2 if skip else out_channels
        self.conv = DoubleConv(merged, out_channels, groups, dropout_rate)

    def forward(self, x: torch.Tensor, encoder_features: torch.Tensor | None = None) -> torch.Tensor:
        x = self.up(x)
        if self.skip:
            if encoder_features is None:
                raise ValueError("UpBlock with skip=True needs encoder features.")
            x = torch.cat([encoder_features, x], dim=1)
        return self.conv(x)


class SegNet(nn.Module):
    """
    U-Net style network; with skip_connections=False it is a plain
    convolutional autoencoder and no encoder feature reaches the decoder.
    """

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        widths = level_widths(cfg)
        groups = cfg.norm_groups

        self.encoders = nn.ModuleList()
        in_ch = cfg.in_channels
        for width in widths[:-1]:
            self.encoders.append(DoubleConv(in_ch, width, groups, cfg.dropout_rate))
            in_ch = width
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = DoubleConv(in_ch, widths[-1], groups, cfg.dropout_rate)

        self.decoders = nn.ModuleList()
        for level in reversed(range(cfg.depth)):
            self.decoders.append(
                UpBlock(
                    widths[level + 1],
                    widths[level],
                    groups,
                    cfg.dropout_rate,
                    skip=cfg.skip_connections,
                )
            )
        self.head = nn.Conv2d(widths[0], cfg.num_classes, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features: list[torch.Tensor] = []
        for encoder in self.encoders:
            x = encoder(x)
            features.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for decoder, skip in zip(self.decoders, reversed(features)):
            x = decoder(x, skip if self.cfg.skip_connections else None)
        return self.head(x)


ARCHITECTURES: dict[str, Callable[[ModelConfig], nn.Module]] = {
    "unet": SegNet,
}


def level_widths(cfg: ModelConfig) -> list[int]:
    """
    Channel widths for encoder levels 0..depth-1 plus the bottleneck.
    """

    return [cfg.base_width * 2**level for level in range(cfg.depth + 1)]


def validate_model_config(cfg: ModelConfig) -> None:
    if cfg.arch not in ARCHITECTURES:
        raise ModelConfigError(
            f"Architecture '{cfg.arch}' is not implemented. Available: {', '.join(sorted(ARCHITECTURES))}."
        )
    if cfg.depth < 1:
        raise ModelConfigError(f"depth must be >= 1, got {cfg.depth}.")
    if cfg.base_width < 1:
        raise ModelConfigError(f"base_width must be >= 1, got {cfg.base_width}.")
    if cfg.in_channels < 1 or cfg.in_channels % 2 == 0:
        raise ModelConfigError(f"in_channels must be a positive odd integer, got {cfg.in_channels}.")
    if cfg.num_classes < 2:
        raise ModelConfigError(f"num_classes must be >= 2, got {cfg.num_classes}.")
    if not 0.0 <= cfg.dropout_rate < 1.0:
        raise ModelConfigError(f"dropout_rate must be in [0, 1), got {cfg.dropout_rate}.")
    if cfg.norm_groups < 1:
        raise ModelConfigError(f"norm_groups must be >= 1, got {cfg.norm_groups}.")
    for level, width in enumerate(level_widths(cfg)):
        if width % cfg.norm_groups:
            raise ModelConfigError(
                f"Width {width} at level {level} is not divisible by norm_groups={cfg.norm_groups}.",
                level=level,
            )
    if cfg.input_size is not None:
        size = cfg.input_size
        for level in range(1, cfg.depth + 1):
            size //= 2
            if size < 1:
                raise ModelConfigError(
                    f"input_size={cfg.input_size} shrinks to zero at level {level} (depth={cfg.depth}).",
                    level=level,
                )


def build_model(cfg: ModelConfig, seed: int = 0) -> nn.Module:
    """
    Build the network with a seed-deterministic initialization.
    """

    validate_model_config(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ARCHITECTURES[cfg.arch](cfg)
    logger.info("Built %s depth=%d width=%d params=%d", cfg.arch, cfg.depth, cfg.base_width, param_count(model))
    return model


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _check_input(model: nn.Module, x: torch.Tensor) -> None:
    cfg: ModelConfig = model.cfg  # type: ignore[assignment]
    if x.shape[-3] != cfg.in_channels:
        raise ModelConfigError(f"Input has {x.shape[-3]} channels, model expects {cfg.in_channels}.")
    factor = 2**cfg.depth
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ModelConfigError(f"Spatial dims {(h, w)} must be divisible by 2**depth={factor}.")


def forward(model: nn.Module, s: SliceStack | np.ndarray | torch.Tensor) -> torch.Tensor:
    """
    Eval-mode logits (K, h, w) for one slice stack.
    """

    channels = s.channels if isinstance(s, SliceStack) else s
    x = torch.as_tensor(np.asarray(channels) if not isinstance(channels, torch.Tensor) else channels)
    x = x.to(dtype=torch.float32, device=next(model.parameters()).device)
    _check_input(model, x)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model(x.unsqueeze(0))[0]
    finally:
        model.train(was_training)
    return logits


def softmax_probs(z: torch.Tensor) -> torch.Tensor:
    """
    Per-pixel softmax over the class axis (-3); max-subtracted for stability.
    """

    shifted = z - z.amax(dim=-3, keepdim=True)
    exp = shifted.exp()
    return exp / exp.sum(dim=-3, keepdim=True)


def predict(p: torch.Tensor) -> torch.Tensor:
    """
    Per-pixel argmax over the class axis; ties go to the lowest index.
    """

    return torch.argmax(p, dim=-3)
