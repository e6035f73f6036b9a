from __future__ import annotations

import numpy as np
import pytest

from tomoseg import augment
from tomoseg.augment import AugmentPolicy, StrongParams
from tomoseg.config import WEAK_OPS, AugmentConfig, StrongAugmentConfig
from tomoseg.volume_io import SliceStack


def make_stack(size: int = 6, channels: int = 3, seed: int = 0) -> SliceStack:
    rng = np.random.default_rng(seed)
    return SliceStack(channels=rng.random((channels, size, size)).astype(np.float32), center_index=1)


def test_flip_h_example() -> None:
    labels = np.array([[0, 1], [2, 3]])
    assert augment.apply_weak_op(labels, "flip_h").tolist() == [[1, 0], [3, 2]]


@pytest.mark.parametrize("op", ["flip_h", "flip_v", "transpose", "antitranspose", "rot180"])
def test_involutions_undo_themselves(op: str) -> None:
    array = np.arange(16).reshape(4, 4)
    np.testing.assert_array_equal(augment.apply_weak_op(augment.apply_weak_op(array, op), op), array)


def test_rot90_and_rot270_are_inverse() -> None:
    array = np.arange(16).reshape(4, 4)
    once = augment.apply_weak_op(array, "rot90")
    np.testing.assert_array_equal(augment.apply_weak_op(once, "rot270"), array)
    four = array
    for _ in range(4):
        four = augment.apply_weak_op(four, "rot90")
    np.testing.assert_array_equal(four, array)


def test_weak_ops_are_distinct_group_elements() -> None:
    array = np.arange(16).reshape(4, 4)
    images = {augment.apply_weak_op(array, op).tobytes() for op in WEAK_OPS}
    images.add(array.tobytes())
    assert len(images) == 8


def test_axis_swapping_op_needs_square_input() -> None:
    with pytest.raises(ValueError, match="square"):
        augment.apply_weak_op(np.zeros((2, 3)), "rot90")
    assert augment.apply_weak_op(np.zeros((2, 3)), "flip_v").shape == (2, 3)


def test_weak_moves_labels_with_channels() -> None:
    labels = np.arange(36).reshape(6, 6)
    stack = SliceStack(channels=np.stack([labels, labels, labels]).astype(np.float32), center_index=0)
    for seed in range(16):
        out, out_labels = augment.weak_augment(stack, labels, seed)
        np.testing.assert_array_equal(out.channels[1], out_labels.astype(np.float32))


def test_weak_same_seed_same_output() -> None:
    stack = make_stack()
    first, _ = augment.weak_augment(stack, seed=42)
    second, _ = augment.weak_augment(stack, seed=42)
    np.testing.assert_array_equal(first.channels, second.channels)


def test_weak_disabled_policy_is_identity() -> None:
    stack = make_stack()
    out, _ = augment.weak_augment(stack, seed=3, policy=AugmentPolicy(kind="weak"))
    np.testing.assert_array_equal(out.channels, stack.channels)


def test_policy_rejects_ops_of_the_other_kind() -> None:
    with pytest.raises(ValueError):
        AugmentPolicy(kind="weak", op_probabilities={"gamma": 0.5})
    with pytest.raises(ValueError):
        AugmentPolicy(kind="strong", op_probabilities={"rot90": 0.5})


def test_gamma_on_constant_image() -> None:
    channels = np.full((1, 4, 4), 0.5, dtype=np.float32)
    out = augment.apply_strong(channels, StrongParams(gamma=2.0))
    np.testing.assert_allclose(out, 0.25, atol=1e-7)


def test_identity_params_leave_pixels() -> None:
    stack = make_stack()
    np.testing.assert_array_equal(augment.apply_strong(stack.channels, StrongParams()), stack.channels)


def test_equalize_keeps_two_levels_and_separates_them() -> None:
    image = np.full((8, 8), 0.4, dtype=np.float32)
    image[:, 4:] = 0.6
    out = augment.apply_strong(image[None], StrongParams(equalize=True))[0]
    levels = np.unique(out)
    assert levels.size == 2
    assert levels[1] - levels[0] >= 0.2 - 1e-6


def test_pointwise_ops_map_equal_inputs_to_equal_outputs() -> None:
    rng = np.random.default_rng(0)
    channels = rng.choice([0.1, 0.3, 0.6, 0.9], size=(3, 8, 8)).astype(np.float32)
    stack = SliceStack(channels=channels, center_index=1)
    policy = AugmentPolicy.strong(("gamma", "brightness_contrast"), probability=1.0)
    out = augment.strong_augment(stack, 5, policy=policy).channels
    assert out.shape == channels.shape
    for level in np.unique(channels):
        assert np.unique(out[channels == level]).size == 1
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_strong_params_stay_in_ranges() -> None:
    policy = AugmentPolicy.strong(("gamma", "brightness_contrast"), probability=1.0, gamma_range=(0.8, 1.2))
    rng = np.random.default_rng(1)
    for _ in range(200):
        params = augment.sample_strong_params(policy, rng)
        assert 0.8 <= params.gamma <= 1.2
        assert abs(params.brightness) <= policy.brightness_limit
        assert abs(params.contrast) <= policy.contrast_limit
        assert not params.clahe and not params.equalize


def test_clahe_stays_in_unit_range() -> None:
    stack = make_stack(size=32)
    out = augment.apply_strong(stack.channels, StrongParams(clahe=True, clahe_clip_limit=0.02))
    assert out.shape == stack.channels.shape
    assert out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_strong_keeps_geometry_metadata() -> None:
    stack = SliceStack(channels=make_stack().channels, center_index=4, crop_origin=(3, 5))
    out = augment.strong_augment(stack, 0)
    assert out.center_index == 4
    assert out.crop_origin == (3, 5)


def test_from_config_respects_disabled_strong() -> None:
    cfg = AugmentConfig(strong=StrongAugmentConfig(enabled=False))
    weak, strong = AugmentPolicy.from_config(cfg)
    assert set(weak.op_probabilities) == set(WEAK_OPS)
    assert strong.op_probabilities == {}
    stack = make_stack()
    np.testing.assert_array_equal(augment.strong_augment(stack, 9, policy=strong).channels, stack.channels)
