"""
Tomography volume I/O and slice preparation.

Purpose:
- Load volumes from a directory of 2D slices or a raw binary + YAML sidecar.
- Scale intensities to [0, 1], build 2.5D slice stacks and random crops.
- Persist label volumes (raw uint8 + sidecar with num_classes).

Sources:
- Slice directories: *.tif/*.tiff/*.png, zero-padded names define slice order.
- Raw files: `<name>.raw` with `<name>.raw.yaml` giving dtype/depth/height/width.

Logic flow:
1) load_volume() -> Volume (no NaN/Inf, declared shape).
2) normalize() -> Volume in [0, 1] (volume-global statistics).
3) extract_stack() -> SliceStack of C adjacent slices (edge clamped).
4) random_crop() -> SliceStack window shared by every channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any
import logging

import numpy as np
import tifffile
import yaml
from PIL import Image

from .errors import VolumeFormatError

logger = logging.getLogger(__name__)

SLICE_SUFFIXES = (".tif", ".tiff", ".png")
PROVENANCES = ("pseudo", "predicted", "ground_truth")
LABEL_DTYPE = np.uint8


@dataclass(frozen=True)
class Volume:
    """
    3D scalar field indexed (slice, row, col).
    """

    data: np.ndarray
    voxel_size_um: float | None = None

    def __post_init__(self) -> None:
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise VolumeFormatError(f"Volume must be 3D with positive dims, got shape {self.data.shape}.")
        if self.voxel_size_um is not None and self.voxel_size_um <= 0:
            raise VolumeFormatError(f"voxel_size_um must be positive, got {self.voxel_size_um}.")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]

    @property
    def value_range(self) -> tuple[float, float]:
        return float(self.data.min()), float(self.data.max())


@dataclass(frozen=True)
class LabelVolume:
    """
    Per-voxel class indices with the same (D, H, W) as the source volume.
    """

    labels: np.ndarray
    num_classes: int
    provenance: str

    def __post_init__(self) -> None:
        if self.labels.ndim != 3:
            raise VolumeFormatError(f"LabelVolume must be 3D, got shape {self.labels.shape}.")
        if not 2 <= self.num_classes <= 255:
            raise VolumeFormatError(f"num_classes must be in [2, 255], got {self.num_classes}.")
        if self.provenance not in PROVENANCES:
            raise VolumeFormatError(f"provenance must be one of {PROVENANCES}, got '{self.provenance}'.")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise VolumeFormatError(
                f"Label {int(self.labels.max())} out of range for num_classes={self.num_classes}."
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)  # type: ignore[return-value]


@dataclass(frozen=True)
class SliceStack:
    """
    2.5D model input: C adjacent slices as channels of one 2D sample.
    """

    channels: np.ndarray
    center_index: int
    crop_origin: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        if self.channels.ndim != 3:
            raise ValueError(f"SliceStack channels must be (C, h, w), got {self.channels.shape}.")
        if self.channels.shape[0] % 2 != 1:
            raise ValueError(f"SliceStack needs an odd channel count, got {self.channels.shape[0]}.")

    @property
    def num_channels(self) -> int:
        return int(self.channels.shape[0])

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return int(self.channels.shape[1]), int(self.channels.shape[2])


@dataclass(frozen=True)
class FormatSpec:
    """
    How to read a volume path: "slices" (directory) or "raw" (binary + sidecar).
    """

    kind: str = "raw"
    voxel_size_um: float | None = None


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".yaml")


def _check_finite(data: np.ndarray) -> None:
    bad = ~np.isfinite(data)
    if bad.any():
        slice_index = int(np.argwhere(bad.any(axis=(1, 2)))[0][0])
        raise VolumeFormatError(
            f"Volume contains NaN/Inf voxels (first at slice {slice_index}).",
            slice_index=slice_index,
        )


def _read_slice(path: Path) -> np.ndarray:
    if path.suffix.lower() in (".tif", ".tiff"):
        return np.asarray(tifffile.imread(path))
    with Image.open(path) as image:
        return np.asarray(image)


def _load_slices(directory: Path) -> np.ndarray:
    if not directory.is_dir():
        raise VolumeFormatError(f"Slice directory '{directory}' not found.")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in SLICE_SUFFIXES)
    if not files:
        raise VolumeFormatError(f"No slice files ({', '.join(SLICE_SUFFIXES)}) in '{directory}'.")

    slices = []
    for idx, file in enumerate(files):
        image = _read_slice(file)
        if image.ndim != 2:
            raise VolumeFormatError(
                f"Slice {idx} ('{file.name}') must be a 2D grayscale image, got shape {image.shape}.",
                slice_index=idx,
            )
        if slices and image.shape != slices[0].shape:
            raise VolumeFormatError(
                f"Slice {idx} ('{file.name}') has shape {image.shape}, expected {slices[0].shape}.",
                slice_index=idx,
            )
        slices.append(image)
    return np.stack(slices).astype(np.float32)


def read_sidecar(path: str | Path) -> dict[str, Any]:
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise VolumeFormatError(f"Sidecar '{meta_path}' not found for raw file '{path}'.")
    with open(meta_path, "r", encoding="utf-8") as handle:
        meta = yaml.safe_load(handle) or {}
    missing = [key for key in ("dtype", "depth", "height", "width") if key not in meta]
    if missing:
        raise VolumeFormatError(f"Sidecar '{meta_path}' missing key(s): {', '.join(missing)}.")
    return meta


def write_sidecar(path: str | Path, meta: dict[str, Any]) -> Path:
    meta_path = sidecar_path(path)
    with open(meta_path, "w", encoding="utf-8") as handle:
        yaml.safe_dump(meta, handle, sort_keys=False)
    return meta_path


def _load_raw(path: Path) -> tuple[np.ndarray, dict[str, Any]]:
    if not path.exists():
        raise VolumeFormatError(f"Raw volume '{path}' not found.")
    meta = read_sidecar(path)
    shape = (int(meta["depth"]), int(meta["height"]), int(meta["width"]))
    payload = np.fromfile(path, dtype=np.dtype(meta["dtype"]))
    expected = int(np.prod(shape))
    if payload.size != expected:
        raise VolumeFormatError(
            f"Shape mismatch: sidecar declares {shape} ({expected} values) "
            f"but '{path.name}' holds {payload.size} values."
        )
    return payload.reshape(shape), meta


def load_volume(path: str | Path, spec: FormatSpec | str = "raw") -> Volume:
    """
    Load a tomography volume.

    Inputs:
    - path: directory of slices or raw binary file.
    - spec: FormatSpec or its kind ("slices" / "raw").

    Outputs:
    - Volume (float32), slice order preserved.
    """

    if isinstance(spec, str):
        spec = FormatSpec(kind=spec)
    path = Path(path)
    voxel_size = spec.voxel_size_um

    if spec.kind == "slices":
        data = _load_slices(path)
    elif spec.kind == "raw":
        raw, meta = _load_raw(path)
        data = raw.astype(np.float32)
        if voxel_size is None and meta.get("voxel_size_um") is not None:
            voxel_size = float(meta["voxel_size_um"])
    else:
        raise VolumeFormatError(f"Unsupported volume format '{spec.kind}'. Use 'slices' or 'raw'.")

    _check_finite(data)
    logger.info("Loaded volume %s shape=%s", path, data.shape)
    return Volume(data=data, voxel_size_um=voxel_size)


def save_volume(path: str | Path, volume: Volume) -> Path:
    """
    Write a volume as raw float32 + sidecar.
    """

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    volume.data.astype(np.float32).tofile(path)
    depth, height, width = volume.shape
    write_sidecar(
        path,
        {
            "dtype": "float32",
            "depth": depth,
            "height": height,
            "width": width,
            "voxel_size_um": volume.voxel_size_um,
        },
    )
    return path


def save_labels(path: str | Path, labels: LabelVolume, *, voxel_size_um: float | None = None) -> Path:
    """
    Write a LabelVolume as raw uint8 + sidecar (adds num_classes/provenance).
    """

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels.labels.astype(LABEL_DTYPE).tofile(path)
    depth, height, width = labels.shape
    write_sidecar(
        path,
        {
            "dtype": "uint8",
            "depth": depth,
            "height": height,
            "width": width,
            "voxel_size_um": voxel_size_um,
            "num_classes": labels.num_classes,
            "provenance": labels.provenance,
        },
    )
    return path


def load_labels(path: str | Path) -> LabelVolume:
    path = Path(path)
    raw, meta = _load_raw(path)
    if "num_classes" not in meta:
        raise VolumeFormatError(f"Sidecar for '{path}' missing key: num_classes.")
    return LabelVolume(
        labels=raw.astype(LABEL_DTYPE),
        num_classes=int(meta["num_classes"]),
        provenance=str(meta.get("provenance", "pseudo")),
    )


def normalize(
    v: Volume,
    mode: str = "global_minmax",
    *,
    p_lo: float = 2.0,
    p_hi: float = 98.0,
) -> Volume:
    """
    Scale a volume into [0, 1] using volume-global statistics.

    - global_minmax: min -> 0, max -> 1.
    - percentile: clip to [P(p_lo), P(p_hi)] then rescale.
    """

    data = v.data.astype(np.float32)
    if mode == "global_minmax":
        lo, hi = float(data.min()), float(data.max())
        if hi <= lo:
            raise VolumeFormatError(f"Cannot min-max normalize a constant volume (value {lo}).")
    elif mode == "percentile":
        lo, hi = (float(x) for x in np.percentile(data, [p_lo, p_hi]))
        if hi <= lo:
            raise VolumeFormatError(
                f"Percentile range degenerate: P{p_lo}={lo} >= P{p_hi}={hi}."
            )
        data = np.clip(data, lo, hi)
    else:
        raise VolumeFormatError(f"Unknown normalize mode '{mode}'.")

    scaled = (data - lo) / (hi - lo)
    np.clip(scaled, 0.0, 1.0, out=scaled)
    return Volume(data=scaled.astype(np.float32), voxel_size_um=v.voxel_size_um)


def stack_indices(depth: int, center: int, num_slices: int) -> np.ndarray:
    """
    Slice indices feeding a 2.5D stack, clamped to [0, depth).
    """

    if num_slices < 1 or num_slices % 2 == 0:
        raise ValueError(f"num_slices must be a positive odd integer, got {num_slices}.")
    if not 0 <= center < depth:
        raise ValueError(f"center {center} outside [0, {depth}).")
    radius = (num_slices - 1) // 2
    return np.clip(np.arange(center - radius, center + radius + 1), 0, depth - 1)


def extract_stack(v: Volume, center: int, num_slices: int) -> SliceStack:
    """
    Build the C-channel stack around `center`; out-of-range neighbors repeat
    the edge slice.
    """

    indices = stack_indices(v.shape[0], center, num_slices)
    return SliceStack(channels=v.data[indices], center_index=center)


def crop_window(array: np.ndarray, origin: tuple[int, int], size: tuple[int, int]) -> np.ndarray:
    row, col = origin
    h, w = size
    return array[..., row : row + h, col : col + w]


def random_crop(
    s: SliceStack,
    size: tuple[int, int] | int,
    rng: np.random.Generator,
) -> SliceStack:
    """
    Crop the same window out of every channel.

    crop_origin is recorded relative to the full slice so label maps can be
    cut with crop_window().
    """

    if isinstance(size, int):
        size = (size, size)
    h, w = size
    full_h, full_w = s.spatial_shape
    if h > full_h or w > full_w:
        raise ValueError(f"Crop {size} larger than slice {(full_h, full_w)}.")
    row = int(rng.integers(0, full_h - h + 1))
    col = int(rng.integers(0, full_w - w + 1))
    channels = crop_window(s.channels, (row, col), (h, w))
    origin = (s.crop_origin[0] + row, s.crop_origin[1] + col)
    return SliceStack(channels=channels, center_index=s.center_index, crop_origin=origin)
