import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fkt.augment import (AugmentPolicy, eval_transform, identity_policy, light_policy, make_view_pair,
                         simclr_policy)
from fkt.data import ImageBatch
from fkt.errors import InvalidConfig, InvalidInput


def image_batch(n=4, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return ImageBatch(torch.rand(n, 3, size, size, generator=g), torch.arange(n) % 3, torch.arange(100, 100 + n))


def test_identity_policy_is_resize_plus_normalize():
    batch = image_batch(size=40)
    policy = identity_policy(32, normalization_mean=(0.4, 0.5, 0.6), normalization_std=(0.2, 0.25, 0.3))
    pair = make_view_pair(batch, policy, rng_seed=3)
    expected = eval_transform(batch, policy).pixels
    assert torch.equal(pair.view_a, pair.view_b)
    assert torch.equal(pair.view_a, expected)


def test_view_pair_is_deterministic():
    batch = image_batch()
    policy = simclr_policy(32)
    first, second = make_view_pair(batch, policy, 7), make_view_pair(batch, policy, 7)
    assert torch.equal(first.view_a, second.view_a) and torch.equal(first.view_b, second.view_b)


def test_views_differ_for_almost_every_seed():
    batch = image_batch(n=1, seed=5)
    policy = simclr_policy(32)
    differing = sum(not torch.equal(p.view_a, p.view_b)
                    for p in (make_view_pair(batch, policy, s) for s in range(100)))
    assert differing >= 99


def test_randomness_is_per_sample_not_per_batch():
    batch = image_batch(n=6)
    policy = simclr_policy(32)
    whole = make_view_pair(batch, policy, 1, epoch=2)
    half = make_view_pair(ImageBatch(batch.pixels[3:], batch.labels[3:], batch.sample_ids[3:]), policy, 1, epoch=2)
    assert torch.equal(whole.view_a[3:], half.view_a)
    assert torch.equal(whole.view_b[3:], half.view_b)


def test_workers_do_not_change_output():
    batch = image_batch(n=8)
    policy = simclr_policy(32)
    serial, threaded = make_view_pair(batch, policy, 4), make_view_pair(batch, policy, 4, workers=3)
    assert torch.equal(serial.view_a, threaded.view_a) and torch.equal(serial.view_b, threaded.view_b)


def test_epoch_changes_views():
    batch = image_batch(n=2)
    policy = simclr_policy(32)
    assert not torch.equal(make_view_pair(batch, policy, 0, epoch=0).view_a,
                           make_view_pair(batch, policy, 0, epoch=1).view_a)


@settings(max_examples=25, deadline=None)
@given(st.integers(8, 70), st.integers(8, 48), st.integers(0, 1000))
def test_shape_labels_and_finiteness(in_size, out_size, seed):
    batch = image_batch(n=3, size=in_size, seed=seed)
    policy = simclr_policy(out_size, blur_enabled=True, normalization_mean=(0.5,) * 3, normalization_std=(0.2,) * 3)
    pair = make_view_pair(batch, policy, seed)
    assert pair.view_a.shape == pair.view_b.shape == (3, 3, out_size, out_size)
    assert torch.equal(pair.labels, batch.labels)
    assert torch.isfinite(pair.view_a).all() and torch.isfinite(pair.view_b).all()


def test_non_square_inputs_resize_to_output_size():
    batch = ImageBatch(torch.rand(2, 3, 20, 50), torch.tensor([0, 1]), torch.tensor([0, 1]))
    assert make_view_pair(batch, simclr_policy(16), 0).view_a.shape[-2:] == (16, 16)
    assert eval_transform(batch, simclr_policy(16)).pixels.shape[-2:] == (16, 16)


def test_empty_batch_rejected():
    empty = ImageBatch(torch.zeros(0, 3, 32, 32), torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long))
    with pytest.raises(InvalidInput):
        make_view_pair(empty, simclr_policy(32), 0)
    with pytest.raises(InvalidInput):
        eval_transform(empty, simclr_policy(32))


def test_tiny_image_rejected():
    with pytest.raises(InvalidInput):
        make_view_pair(image_batch(size=6), simclr_policy(32), 0)


def test_eval_transform_deterministic_and_identity_normalization():
    batch = image_batch(size=32)
    policy = simclr_policy(32)
    out = eval_transform(batch, policy).pixels
    assert torch.equal(out, eval_transform(batch, policy).pixels)
    assert torch.equal(out, batch.pixels)
    explicit = dataclasses.replace(policy, normalization_mean=(0.0,) * 3, normalization_std=(1.0,) * 3)
    assert torch.equal(eval_transform(batch, explicit).pixels, batch.pixels)


def test_eval_transform_analytic_normalization():
    batch = ImageBatch(torch.full((2, 3, 16, 16), 0.5), torch.tensor([0, 1]), torch.tensor([0, 1]))
    policy = simclr_policy(16, normalization_mean=(0.5,) * 3, normalization_std=(0.5,) * 3)
    assert torch.equal(eval_transform(batch, policy).pixels, torch.zeros(2, 3, 16, 16))


def test_policy_defaults_follow_input_size():
    small, large = simclr_policy(32), simclr_policy(224)
    assert small.crop_scale_range == (0.2, 1.0) and not small.blur_enabled
    assert large.crop_scale_range == (0.08, 1.0) and large.blur_enabled
    assert (small.flip_probability, small.jitter_strength, small.jitter_probability, small.grayscale_probability) == \
        (0.5, 0.5, 0.8, 0.2)
    light = light_policy(small)
    assert light.jitter_probability == light.grayscale_probability == 0 and not light.blur_enabled


@pytest.mark.parametrize("kwargs", [
    dict(flip_probability=1.5), dict(crop_scale_range=(0.9, 0.2)), dict(output_size=4),
    dict(jitter_strength=-1.0), dict(normalization_std=(0.0, 1.0, 1.0)),
])
def test_policy_validation(kwargs):
    with pytest.raises(InvalidConfig):
        AugmentPolicy(**kwargs)
