"""Stochastic view generation for contrastive training and deterministic eval preprocessing.

Randomness is counter-based: every (seed, epoch, sample id, view) tuple maps
to its own generator, so results do not depend on batch composition, batch
order or how many workers apply the transforms.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF

from .data import ImageBatch
from .errors import InvalidConfig, InvalidInput

MIN_IMAGE_SIZE = 8
CROP_RATIO = (3 / 4, 4 / 3)
IDENTITY_NORM = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale_range: tuple = (0.2, 1.0)
    flip_probability: float = 0.5
    jitter_strength: float = 0.5
    jitter_probability: float = 0.8
    grayscale_probability: float = 0.2
    blur_enabled: bool = False
    blur_probability: float = 0.5
    output_size: int = 32
    # None means "compute from the training split"
    normalization_mean: Optional[tuple] = None
    normalization_std: Optional[tuple] = None

    def __post_init__(self):
        for name in ("flip_probability", "jitter_probability", "grayscale_probability", "blur_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidConfig(f"augment.{name}", f"probability must be in [0, 1], got {p}")
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise InvalidConfig("augment.crop_scale_range", f"need 0 < low <= high <= 1, got {(lo, hi)}")
        if self.jitter_strength < 0:
            raise InvalidConfig("augment.jitter_strength", "must be non-negative")
        if self.output_size < MIN_IMAGE_SIZE:
            raise InvalidConfig("augment.output_size", f"must be >= {MIN_IMAGE_SIZE}")
        for name in ("normalization_mean", "normalization_std"):
            value = getattr(self, name)
            if value is not None and len(value) != 3:
                raise InvalidConfig(f"augment.{name}", "need one value per RGB channel")
        if self.normalization_std is not None and min(self.normalization_std) <= 0:
            raise InvalidConfig("augment.normalization_std", "must be positive")

    @property
    def normalization(self) -> tuple:
        mean = self.normalization_mean if self.normalization_mean is not None else IDENTITY_NORM[0]
        std = self.normalization_std if self.normalization_std is not None else IDENTITY_NORM[1]
        return tuple(mean), tuple(std)


def simclr_policy(image_size: int, **overrides) -> AugmentPolicy:
    """SimCLR augmentation defaults scaled to the input resolution.

    Small inputs (< 96 px) use a milder crop and no blur.
    """
    small = image_size < 96
    base = AugmentPolicy(
        crop_scale_range=(0.2, 1.0) if small else (0.08, 1.0),
        blur_enabled=not small,
        output_size=image_size,
    )
    return replace(base, **overrides)


def light_policy(policy: AugmentPolicy) -> AugmentPolicy:
    """Crop and flip only; the default for purely supervised training."""
    return replace(policy, jitter_probability=0.0, grayscale_probability=0.0, blur_enabled=False)


def identity_policy(output_size: int, **overrides) -> AugmentPolicy:
    return replace(AugmentPolicy(crop_scale_range=(1.0, 1.0), flip_probability=0.0, jitter_probability=0.0,
                                 grayscale_probability=0.0, blur_enabled=False, output_size=output_size),
                   **overrides)


@dataclass
class ViewPair:
    view_a: torch.Tensor
    view_b: torch.Tensor
    labels: torch.Tensor
    sample_ids: torch.Tensor

    def __len__(self) -> int:
        return self.labels.shape[0]


def sample_generator(seed: int, epoch: int, sample_id: int, view: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, epoch, sample_id, view]).generate_state(2, dtype=np.uint32)
    g = torch.Generator()
    g.manual_seed(int(state[0]) << 32 | int(state[1]))
    return g


def _uniform(g: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * torch.rand((), generator=g, dtype=torch.float64).item()


def _coin(g: torch.Generator, p: float) -> bool:
    # always draw, so the stream layout does not depend on p
    return torch.rand((), generator=g, dtype=torch.float64).item() < p


def _crop_box(g: torch.Generator, height: int, width: int, scale: tuple) -> tuple:
    if scale == (1.0, 1.0):
        return 0, 0, height, width
    area = height * width
    log_ratio = (math.log(CROP_RATIO[0]), math.log(CROP_RATIO[1]))
    for _ in range(10):
        target = area * _uniform(g, *scale)
        ratio = math.exp(_uniform(g, *log_ratio))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = int(torch.randint(0, height - h + 1, (), generator=g))
            left = int(torch.randint(0, width - w + 1, (), generator=g))
            return top, left, h, w
    # fallback: central crop clamped to the ratio range
    in_ratio = width / height
    if in_ratio < CROP_RATIO[0]:
        w, h = width, int(round(width / CROP_RATIO[0]))
    elif in_ratio > CROP_RATIO[1]:
        h, w = height, int(round(height * CROP_RATIO[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def _blur_kernel(size: int) -> int:
    k = max(3, int(0.1 * size))
    return k if k % 2 else k + 1


def augment_image(img: torch.Tensor, policy: AugmentPolicy, g: torch.Generator) -> torch.Tensor:
    """Apply one random augmentation chain to a single 3 x H x W image in [0, 1]."""
    _, height, width = img.shape
    top, left, h, w = _crop_box(g, height, width, tuple(policy.crop_scale_range))
    out = TF.resized_crop(img, top, left, h, w, [policy.output_size, policy.output_size], antialias=True)

    if _coin(g, policy.flip_probability):
        out = TF.horizontal_flip(out)

    s = policy.jitter_strength
    apply_jitter = _coin(g, policy.jitter_probability)
    factors = (
        _uniform(g, max(0.0, 1 - 0.8 * s), 1 + 0.8 * s),
        _uniform(g, max(0.0, 1 - 0.8 * s), 1 + 0.8 * s),
        _uniform(g, max(0.0, 1 - 0.8 * s), 1 + 0.8 * s),
        _uniform(g, -min(0.5, 0.2 * s), min(0.5, 0.2 * s)),
    )
    order = torch.randperm(4, generator=g).tolist()
    if apply_jitter:
        for op in order:
            if op == 0:
                out = TF.adjust_brightness(out, factors[0])
            elif op == 1:
                out = TF.adjust_contrast(out, factors[1])
            elif op == 2:
                out = TF.adjust_saturation(out, factors[2])
            else:
                out = TF.adjust_hue(out, factors[3])

    if _coin(g, policy.grayscale_probability):
        out = TF.rgb_to_grayscale(out, num_output_channels=3)

    apply_blur = _coin(g, policy.blur_probability)
    sigma = _uniform(g, 0.1, 2.0)
    if policy.blur_enabled and apply_blur:
        k = _blur_kernel(policy.output_size)
        out = TF.gaussian_blur(out, [k, k], [sigma, sigma])
    return out.clamp(0.0, 1.0)


def _normalize(pixels: torch.Tensor, policy: AugmentPolicy) -> torch.Tensor:
    mean, std = policy.normalization
    if (mean, std) == IDENTITY_NORM:
        return pixels
    return TF.normalize(pixels, list(mean), list(std))


def _check_batch(batch: ImageBatch):
    if len(batch) == 0:
        raise InvalidInput("empty batch")
    if batch.pixels.ndim != 4 or batch.pixels.shape[1] != 3:
        raise InvalidInput(f"expected N x 3 x H x W pixels, got {tuple(batch.pixels.shape)}")
    if min(batch.pixels.shape[-2:]) < MIN_IMAGE_SIZE:
        raise InvalidInput(f"images smaller than the {MIN_IMAGE_SIZE}px minimum crop: {tuple(batch.pixels.shape[-2:])}")
    if not batch.pixels.is_floating_point():
        raise InvalidInput("pixels must be decoded to floats")


def make_view_pair(batch: ImageBatch, policy: AugmentPolicy, rng_seed: int, epoch: int = 0,
                   workers: int = 0) -> ViewPair:
    """Two independently augmented, normalised views of every image in ``batch``.

    ``workers > 0`` spreads images over a thread pool; output order and
    values are unchanged.
    """
    _check_batch(batch)
    ids = batch.sample_ids.tolist()

    def one(i: int) -> tuple:
        img = batch.pixels[i]
        a = augment_image(img, policy, sample_generator(rng_seed, epoch, ids[i], 0))
        b = augment_image(img, policy, sample_generator(rng_seed, epoch, ids[i], 1))
        return a, b

    if workers > 0:
        with ThreadPoolExecutor(workers) as pool:
            views = list(pool.map(one, range(len(batch))))
    else:
        views = [one(i) for i in range(len(batch))]
    view_a = _normalize(torch.stack([v[0] for v in views]), policy)
    view_b = _normalize(torch.stack([v[1] for v in views]), policy)
    return ViewPair(view_a, view_b, batch.labels.clone(), batch.sample_ids.clone())


def eval_transform(batch: ImageBatch, policy: AugmentPolicy) -> ImageBatch:
    """Deterministic resize to ``policy.output_size`` followed by normalisation."""
    _check_batch(batch)
    size = [policy.output_size, policy.output_size]
    pixels = torch.stack([TF.resized_crop(img, 0, 0, img.shape[1], img.shape[2], size, antialias=True)
                          for img in batch.pixels])
    return ImageBatch(_normalize(pixels.clamp(0.0, 1.0), policy), batch.labels.clone(), batch.sample_ids.clone())
