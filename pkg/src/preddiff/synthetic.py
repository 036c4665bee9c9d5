"""Planted-evidence benchmark tasks with a known ground-truth region.

Images are a spatially smooth random background plus i.i.d. pixel noise; the
pixels under the evidence mask are instead drawn independently and uniformly
from [0, 1]. The label is 1 exactly when the mean of the masked pixels
exceeds 0.5, so only the mask carries class information, and (unlike the
background) masked pixels cannot be predicted from their neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .samplers import ReferenceDataset
from .tensor import RelevanceMap


@dataclass(frozen=True)
class SyntheticSpec:
    shape: tuple[int, ...] = (20, 20)
    mask_pixels: int | None = None
    mask_fraction: float = 0.05
    noise: float = 0.1
    smoothness: float = 2.0
    background_std: float = 0.2
    num_images: int = 2000
    seed: int = 0


@dataclass(frozen=True)
class SyntheticTask:
    shape: tuple[int, ...]
    evidence_mask: np.ndarray
    noise: float
    rule: str
    seed: int


def planted_mask(shape, count: int, rng: np.random.Generator) -> np.ndarray:
    """A compact block of ``count`` pixels (row-major fill of a near-square) at a random spot."""
    shape = tuple(shape)
    total = int(np.prod(shape))
    if not 0 < count < total:
        raise ValueError(f"mask must cover between 1 and {total - 1} pixels, got {count}")
    side = int(np.ceil(count ** (1.0 / len(shape))))
    box = tuple(min(side, n) for n in shape)
    while int(np.prod(box)) < count:
        box = tuple(min(b + 1, n) for b, n in zip(box, shape))
    block = np.zeros(int(np.prod(box)), dtype=bool)
    block[:count] = True
    origin = tuple(int(rng.integers(0, n - b + 1)) for n, b in zip(shape, box))
    mask = np.zeros(shape, dtype=bool)
    mask[tuple(slice(o, o + b) for o, b in zip(origin, box))] = block.reshape(box)
    return mask


def make_synthetic_task(spec: SyntheticSpec) -> tuple[ReferenceDataset, np.ndarray, SyntheticTask]:
    rng = np.random.default_rng(spec.seed)
    shape = tuple(spec.shape)
    count = spec.mask_pixels if spec.mask_pixels is not None else round(spec.mask_fraction * np.prod(shape))
    mask = planted_mask(shape, int(count), rng)

    white = rng.standard_normal((spec.num_images,) + shape)
    axes = tuple(range(1, 1 + len(shape)))
    smooth = ndimage.gaussian_filter(white, sigma=(0,) + (spec.smoothness,) * len(shape), mode="wrap")
    smooth /= smooth.std(axis=axes, keepdims=True).mean()
    images = 0.5 + spec.background_std * smooth
    if spec.noise > 0:
        images += spec.noise * rng.standard_normal(images.shape)
    images[:, mask] = rng.random((spec.num_images, int(mask.sum())))
    np.clip(images, 0.0, 1.0, out=images)
    labels = (images[:, mask].mean(axis=1) > 0.5).astype(np.int64)

    task = SyntheticTask(shape, mask, spec.noise, "label = 1 iff mean(masked pixels) > 0.5", spec.seed)
    return ReferenceDataset(images, len(shape), (0.0, 1.0), source=f"synthetic:{spec.seed}"), labels, task


def localization_score(rmap, mask) -> float:
    """Share of the total absolute relevance that falls inside ``mask``.

    Maps with a channel axis are compared after summing |relevance| over
    channels. An all-zero map scores 0.
    """
    values = rmap.values if isinstance(rmap, RelevanceMap) else np.asarray(rmap, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    mass = np.abs(values)
    while mass.ndim > mask.ndim:
        mass = mass.sum(axis=-1)
    if mass.shape != mask.shape:
        raise ValueError(f"map shape {mass.shape} does not match mask {mask.shape}")
    total = mass.sum()
    if total == 0:
        return 0.0
    return float(mass[mask].sum() / total)
