from __future__ import annotations

import math

import pytest
import torch

from tomoseg import losses
from tomoseg.config import LossConfig
from tomoseg.errors import ConfigError
from tomoseg.segnet import softmax_probs


def probs(*rows: tuple[float, ...]) -> torch.Tensor:
    """
    One pixel per row: (K, 1, M) probabilities in float64.
    """

    return torch.tensor(rows, dtype=torch.float64).T.reshape(len(rows[0]), 1, len(rows))


def targets(labels: list[int], num_classes: int) -> torch.Tensor:
    return losses.one_hot(torch.tensor([labels]), num_classes, dtype=torch.float64)


def test_one_hot_places_class_axis() -> None:
    q = losses.one_hot(torch.tensor([[2]]), 4)
    assert tuple(q.shape) == (4, 1, 1)
    assert q.reshape(-1).tolist() == [0.0, 0.0, 1.0, 0.0]


def test_one_hot_rejects_out_of_range_with_coordinate() -> None:
    with pytest.raises(ValueError, match=r"\(0, 1\)"):
        losses.one_hot(torch.tensor([[0, 5]]), 4)


def test_uniform_prediction_cross_entropy_is_log_k() -> None:
    p = probs((0.25, 0.25, 0.25, 0.25))
    assert float(losses.cross_entropy(p, targets([1], 4))) == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_averages_pixels() -> None:
    p = probs((0.5, 0.5, 0.0, 0.0), (0.25, 0.25, 0.25, 0.25))
    value = float(losses.cross_entropy(p, targets([0, 0], 4)))
    assert value == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-12)


def test_shape_mismatch_raises() -> None:
    with pytest.raises(ValueError, match="Shape mismatch"):
        losses.cross_entropy(torch.ones(3, 2, 2) / 3, torch.ones(4, 2, 2) / 4)


def test_label_smoothing_targets() -> None:
    q = losses.label_smoothing(targets([0], 4), 0.1).reshape(-1).tolist()
    assert q == pytest.approx([0.925, 0.025, 0.025, 0.025])


def test_bootstrap_targets_mix() -> None:
    q = targets([0], 2)
    p = probs((0.5, 0.5))
    mixed = losses.bootstrap_targets(q, p, 0.5).reshape(-1).tolist()
    assert mixed == pytest.approx([0.75, 0.25])


def test_bootstrap_targets_keep_gradient() -> None:
    p = probs((0.5, 0.5)).requires_grad_(True)
    assert losses.bootstrap_targets(targets([0], 2), p, 0.5).requires_grad


def test_focal_example() -> None:
    value = float(losses.focal_loss(probs((0.5, 0.5)), targets([0], 2), gamma=2.0))
    assert value == pytest.approx(0.25 * math.log(2), abs=1e-12)


@pytest.mark.parametrize("gamma", [0.5, 2.0])
def test_focal_gradient_finite_for_confident_pixels(gamma: float) -> None:
    p = probs((1.0, 0.0), (0.6, 0.4)).requires_grad_(True)
    loss = losses.focal_loss(p, targets([0, 0], 2), gamma=gamma)
    loss.backward()
    assert torch.isfinite(loss)
    assert torch.isfinite(p.grad).all()


def test_focal_with_zero_gamma_is_cross_entropy() -> None:
    p = probs((0.7, 0.2, 0.1), (0.1, 0.3, 0.6))
    q = targets([0, 2], 3)
    assert float(losses.focal_loss(p, q, gamma=0.0)) == pytest.approx(float(losses.cross_entropy(p, q)))


def test_gce_example() -> None:
    value = float(losses.generalized_ce(probs((0.5, 0.5)), targets([0], 2), r=0.7))
    assert value == pytest.approx((1 - 0.5**0.7) / 0.7, abs=1e-12)
    assert value == pytest.approx(0.549183, abs=1e-6)


def test_sce_example() -> None:
    value = float(losses.symmetric_ce(probs((0.9, 0.1)), targets([0], 2), alpha=1.0, beta=1.0, log_zero=-4.0))
    assert value == pytest.approx(-math.log(0.9) + 0.4, abs=1e-12)


@pytest.mark.parametrize(
    "fn",
    [
        losses.cross_entropy,
        lambda p, q: losses.cross_entropy(p, losses.bootstrap_targets(q, p, 0.8)),
        losses.focal_loss,
        losses.generalized_ce,
        losses.symmetric_ce,
    ],
)
def test_losses_vanish_on_exact_one_hot(fn) -> None:
    q = targets([0, 2, 1], 3)
    assert float(fn(q.clone(), q)) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("name", ["ce", "label_smoothing", "bootstrap", "focal", "gce", "sce"])
def test_configured_losses_are_nonnegative_and_differentiable(name: str) -> None:
    criterion = losses.build_criterion(LossConfig(name=name))
    torch.manual_seed(0)
    logits = torch.randn(2, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    q = losses.one_hot(torch.randint(0, 3, (2, 2, 2)), 3, dtype=torch.float64)

    def fn(z: torch.Tensor) -> torch.Tensor:
        return criterion(softmax_probs(z), q)

    assert float(fn(logits)) >= 0.0
    assert torch.autograd.gradcheck(fn, (logits,), eps=1e-6, atol=1e-6, rtol=1e-4)


def test_masked_full_mask_equals_cross_entropy() -> None:
    p = probs((0.7, 0.3), (0.4, 0.6), (0.2, 0.8))
    q = targets([0, 1, 0], 2)
    full = torch.ones(1, 3, dtype=torch.bool)
    assert float(losses.masked_cross_entropy(p, q, full)) == pytest.approx(
        float(losses.cross_entropy(p, q)), abs=1e-12
    )


def test_masked_normalizes_by_kept_pixels() -> None:
    p = probs((0.5, 0.5, 0, 0, 0, 0, 0, 0), (0.25,) + (0.75 / 7,) * 7, (0.125,) * 8)
    q = targets([0, 0, 0], 8)
    mask = torch.tensor([[True, True, False]])
    value = float(losses.masked_cross_entropy(p, q, mask))
    assert value == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-12)
    assert value == pytest.approx(1.03972, abs=1e-5)


def test_masked_empty_returns_sentinel() -> None:
    p = probs((0.5, 0.5))
    result = losses.masked_cross_entropy(p, targets([0], 2), torch.zeros(1, 1, dtype=torch.bool))
    assert result is losses.EMPTY_MASK
    assert not result
    assert float(result) == 0.0


def test_masked_rejects_wrong_mask_shape() -> None:
    p = probs((0.5, 0.5), (0.5, 0.5))
    with pytest.raises(ValueError, match="Mask shape"):
        losses.masked_cross_entropy(p, targets([0, 1], 2), torch.ones(2, 1, dtype=torch.bool))


def test_masked_gradient_ignores_unmasked_pixels() -> None:
    logits = torch.randn(3, 1, 4, dtype=torch.float64, requires_grad=True)
    q = targets([0, 1, 2, 0], 3)
    mask = torch.tensor([[True, False, True, False]])
    losses.masked_cross_entropy(softmax_probs(logits), q, mask).backward()
    assert torch.all(logits.grad[..., 1] == 0)
    assert torch.all(logits.grad[..., 3] == 0)
    assert torch.any(logits.grad[..., 0] != 0)


def test_unknown_loss_param_raises() -> None:
    with pytest.raises(ConfigError, match="Unknown loss.params"):
        losses.build_criterion(LossConfig(name="focal", params={"alpha": 0.5}))


def test_masked_label_smoothing_uses_configured_epsilon() -> None:
    cfg = LossConfig(name="label_smoothing", params={"epsilon": 0.2}, stage3_name="masked_label_smoothing")
    criterion = losses.build_masked_criterion(cfg)
    p = probs((0.6, 0.4))
    q = targets([0], 2)
    mask = torch.ones(1, 1, dtype=torch.bool)
    expected = -(0.9 * math.log(0.6) + 0.1 * math.log(0.4))
    assert float(criterion(p, q, mask)) == pytest.approx(expected, abs=1e-12)
