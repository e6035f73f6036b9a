from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

from tomoseg import gradcam
from tomoseg.config import ModelConfig
from tomoseg.segnet import build_model
from tomoseg.selftrain import TeacherState


class LinearSeg(nn.Module):
    def __init__(self, in_channels: int = 3, features: int = 4, num_classes: int = 3, head_bias: bool = False) -> None:
        super().__init__()
        self.features = nn.Conv2d(in_channels, features, kernel_size=1, bias=False)
        self.head = nn.Conv2d(features, num_classes, kernel_size=1, bias=head_bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def test_linear_model_matches_closed_form() -> None:
    torch.manual_seed(0)
    model = LinearSeg()
    x = torch.rand(3, 8, 8)
    with torch.no_grad():
        activations = model.features(x.unsqueeze(0))[0]
        logits = model.head(activations.unsqueeze(0))[0]
    target = int(logits.argmax(dim=0)[0, 0])

    cam = gradcam.grad_cam(model, x, target, layer="features")

    head = model.head.weight.detach()[target, :, 0, 0]
    expected = torch.relu((head[:, None, None] * activations).sum(dim=0))
    if float(expected.max()) > 0:
        expected = expected / expected.max()
    np.testing.assert_allclose(cam.values, expected.numpy(), atol=1e-5)
    assert not cam.empty
    assert cam.target_class == target


def test_constant_score_gives_zero_map() -> None:
    model = LinearSeg(head_bias=True)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.copy_(torch.tensor([1.0, 0.0, 0.0]))
    cam = gradcam.grad_cam(model, torch.rand(3, 6, 6), 0, layer="features")
    assert not cam.empty
    assert np.all(cam.values == 0.0)


def test_frozen_teacher_copy_matches_student() -> None:
    torch.manual_seed(1)
    student = LinearSeg()
    with torch.no_grad():
        student.features.weight.abs_()
        student.head.weight.abs_()
    teacher = TeacherState.from_student(student, alpha=0.99).model
    assert not any(p.requires_grad for p in teacher.parameters())
    x = torch.rand(3, 8, 8)
    with torch.no_grad():
        target = int(student(x.unsqueeze(0))[0].argmax(dim=0)[0, 0])

    from_student = gradcam.grad_cam(student, x, target, layer="features")
    from_teacher = gradcam.grad_cam(teacher, x, target, layer="features")

    assert from_student.values.max() == pytest.approx(1.0)
    np.testing.assert_allclose(from_teacher.values, from_student.values, atol=1e-6)
    assert not any(p.requires_grad for p in teacher.parameters())


def test_scaling_class_scores_keeps_heatmap() -> None:
    torch.manual_seed(2)
    model = LinearSeg()
    x = torch.rand(3, 8, 8)
    with torch.no_grad():
        target = int(model(x.unsqueeze(0))[0].argmax(dim=0)[0, 0])
    base = gradcam.grad_cam(model, x, target, layer="features")

    with torch.no_grad():
        model.head.weight.mul_(3.5)
    scaled = gradcam.grad_cam(model, x, target, layer="features")

    np.testing.assert_allclose(scaled.values, base.values, atol=1e-5)


def test_unpredicted_class_gives_empty_map() -> None:
    model = LinearSeg(head_bias=True)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.copy_(torch.tensor([1.0, 0.0, 0.0]))
    cam = gradcam.grad_cam(model, torch.rand(3, 6, 6), 2, layer="features")
    assert cam.empty
    assert cam.values.shape == (6, 6)
    assert np.all(cam.values == 0.0)


def test_bad_layer_and_class_raise() -> None:
    model = LinearSeg()
    with pytest.raises(ValueError, match="not found"):
        gradcam.grad_cam(model, torch.rand(3, 4, 4), 0, layer="nope")
    with pytest.raises(ValueError, match="outside"):
        gradcam.grad_cam(model, torch.rand(3, 4, 4), 7, layer="features")


def test_segnet_heatmap_is_input_sized(tiny_model: ModelConfig) -> None:
    model = build_model(tiny_model)
    x = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
    with torch.no_grad():
        predicted = int(model.eval()(torch.as_tensor(x)[None])[0].argmax(dim=0)[0, 0])
    model.train()
    cam = gradcam.grad_cam(model, x, predicted)
    assert cam.values.shape == (32, 32)
    assert cam.values.min() >= 0.0 and cam.values.max() <= 1.0
    assert cam.layer == gradcam.DEFAULT_LAYER
    assert model.training
    assert all(p.grad is None for p in model.parameters())


def test_label_overlay_colors() -> None:
    rgb = gradcam.label_overlay(np.array([[0, 1]]))
    assert rgb.shape == (1, 2, 3) and rgb.dtype == np.uint8
    assert tuple(rgb[0, 0]) == gradcam.PALETTE[0]
    assert tuple(rgb[0, 1]) == gradcam.PALETTE[1]
    blended = gradcam.label_overlay(np.array([[0]]), np.array([[1.0]]), opacity=0.5)
    assert tuple(blended[0, 0]) == (128, 128, 128)


def test_png_output_has_slice_size(tmp_path: Path) -> None:
    cam = gradcam.CamHeatmap(values=np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 4), target_class=1, layer="x")
    path = gradcam.save_png(tmp_path / "cam.png", gradcam.heatmap_image(cam))
    with Image.open(path) as image:
        assert image.size == (4, 3)
        assert np.asarray(image).max() == 255
