"""Stochastic image transforms and positive-pair construction.

The transform family: random square crop of 50-100% of the image area,
horizontal flip, per-pixel multiplicative Gaussian noise, brightness scaling,
and contrast scaling about the image mean. Transforms fire independently with
their configured probabilities and are applied in the order
crop -> flip -> noise -> {brightness, contrast}, where contrast precedes
brightness with probability ``contrast_first_prob``. Intensity outputs are
clipped into [0, 1] after each transform.

All randomness flows through an explicit ``numpy.random.Generator``, so the
functions are stateless and safe to use concurrently with per-worker streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .data import IMAGE_SIZE, DataError, resize_bilinear


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_prob: float = 0.8
    crop_area_range: tuple[float, float] = (0.5, 1.0)
    flip_prob: float = 0.5
    noise_prob: float = 0.5
    noise_sigma_range: tuple[float, float] = (0.0, 0.1)
    brightness_prob: float = 0.7
    brightness_range: tuple[float, float] = (0.5, 1.5)
    contrast_prob: float = 0.7
    contrast_range: tuple[float, float] = (0.6, 1.0)
    contrast_first_prob: float = 0.5

    def __post_init__(self) -> None:
        for name in (
            "crop_prob",
            "flip_prob",
            "noise_prob",
            "brightness_prob",
            "contrast_prob",
            "contrast_first_prob",
        ):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise DataError(f"{name} must be in [0, 1], got {p}")
        for name in ("crop_area_range", "noise_sigma_range", "brightness_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise DataError(f"{name} low must be <= high, got ({lo}, {hi})")
        lo, hi = self.crop_area_range
        if not (0.0 < lo and hi <= 1.0):
            raise DataError(f"crop_area_range must lie in (0, 1], got ({lo}, {hi})")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("crop_area_range", "noise_sigma_range", "brightness_range", "contrast_range"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        kwargs = dict(d)
        for key in ("crop_area_range", "noise_sigma_range", "brightness_range", "contrast_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class _Plan:
    """One sampled realization of the transform family.

    The noise field itself is drawn at execution time from the same stream;
    the plan carries which transforms fire and their scalar parameters.
    """

    crop: Optional[tuple[int, int, int]]  # (side, top, left)
    flip: bool
    noise_sigma: Optional[float]
    contrast_first: bool
    brightness: Optional[float]
    contrast: Optional[float]


def _draw_plan(policy: AugmentationPolicy, rng: np.random.Generator) -> _Plan:
    # Draw order is fixed: crop gate (+params), flip gate, noise gate (+sigma),
    # order coin, brightness gate (+factor), contrast gate (+factor).
    crop = None
    if rng.random() < policy.crop_prob:
        area = rng.uniform(*policy.crop_area_range)
        side = max(1, min(IMAGE_SIZE, int(round(math.sqrt(area) * IMAGE_SIZE))))
        top = int(rng.integers(0, IMAGE_SIZE - side + 1))
        left = int(rng.integers(0, IMAGE_SIZE - side + 1))
        crop = (side, top, left)
    flip = bool(rng.random() < policy.flip_prob)
    noise_sigma = None
    if rng.random() < policy.noise_prob:
        noise_sigma = float(rng.uniform(*policy.noise_sigma_range))
    contrast_first = bool(rng.random() < policy.contrast_first_prob)
    brightness = None
    if rng.random() < policy.brightness_prob:
        brightness = float(rng.uniform(*policy.brightness_range))
    contrast = None
    if rng.random() < policy.contrast_prob:
        contrast = float(rng.uniform(*policy.contrast_range))
    return _Plan(crop, flip, noise_sigma, contrast_first, brightness, contrast)


def _execute(image: np.ndarray, plan: _Plan, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(image, dtype=np.float32)
    if plan.crop is not None:
        side, top, left = plan.crop
        window = x[top : top + side, left : left + side]
        x = resize_bilinear(window, IMAGE_SIZE, IMAGE_SIZE)
    if plan.flip:
        x = x[:, ::-1]
    if plan.noise_sigma is not None:
        field = rng.standard_normal((IMAGE_SIZE, IMAGE_SIZE)).astype(np.float32)
        x = np.clip(x * (1.0 + plan.noise_sigma * field), 0.0, 1.0)

    def apply_brightness(arr: np.ndarray) -> np.ndarray:
        if plan.brightness is None or plan.brightness == 1.0:
            return arr
        return np.clip(plan.brightness * arr, 0.0, 1.0)

    def apply_contrast(arr: np.ndarray) -> np.ndarray:
        if plan.contrast is None or plan.contrast == 1.0:
            return arr
        mean = arr.mean(dtype=np.float32)
        return np.clip(mean + plan.contrast * (arr - mean), 0.0, 1.0)

    if plan.contrast_first:
        x = apply_brightness(apply_contrast(x))
    else:
        x = apply_contrast(apply_brightness(x))
    return np.ascontiguousarray(x, dtype=np.float32)


def apply(policy: AugmentationPolicy, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply one random realization of the transform family to a frame."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise DataError(f"expected a {IMAGE_SIZE}x{IMAGE_SIZE} image, got {image.shape}")
    return _execute(image, _draw_plan(policy, rng), rng)


def make_pair(
    policy: AugmentationPolicy, image: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Two independent augmented views of the same source frame."""
    return apply(policy, image, rng), apply(policy, image, rng)
