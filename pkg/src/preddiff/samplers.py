"""Replacement values for a removed window.

Two families are provided:

* marginal: the window's content at the same location in other images of a
  reference dataset (the empirical distribution);
* conditional: a multivariate normal over outer patches, conditioned on the
  part of the outer patch that surrounds the window. A :class:`LocationGrid`
  additionally keys the Gaussian on the coarse position of the patch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from . import pdt1
from .seeding import derive_seed, window_rng
from .tensor import ImageTensor, PatchGeometry, WindowIndex

EPSILON_SCALE = 1e-5
EPSILON_FLOOR = 1e-10
MIN_CELL_PATCHES = 50


class SamplerError(RuntimeError):
    pass


class DatasetTooSmall(SamplerError):
    pass


class SingularCovariance(SamplerError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    num_samples: int = 10
    rng_seed: int = 0
    clip_to_range: bool = True

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


@dataclass(frozen=True)
class ReferenceDataset:
    """A stack of same-shaped images, ``images[i]`` being one sample."""

    images: np.ndarray
    spatial_ndim: int = None  # type: ignore[assignment]
    value_range: tuple[float, float] = (0.0, 1.0)
    source: str = ""

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64, order="C")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)
        if images.ndim < 2 or len(images) == 0:
            raise DatasetTooSmall("reference dataset is empty")
        nd = images.ndim - 1 if self.spatial_ndim is None else int(self.spatial_ndim)
        object.__setattr__(self, "spatial_ndim", nd)
        lo, hi = (float(v) for v in self.value_range)
        object.__setattr__(self, "value_range", (lo, hi))
        if not np.all(np.isfinite(images)):
            raise ValueError("dataset contains non-finite values")
        if images.min() < lo or images.max() > hi:
            raise ValueError(f"dataset values outside value_range {self.value_range}")

    @classmethod
    def from_tensors(cls, tensors: Sequence[ImageTensor], source: str = "") -> "ReferenceDataset":
        if not tensors:
            raise DatasetTooSmall("reference dataset is empty")
        first = tensors[0]
        for i, t in enumerate(tensors):
            if t.shape != first.shape or t.value_range != first.value_range:
                raise ValueError(f"image {i} has shape {t.shape}, expected {first.shape}")
        return cls(np.stack([t.data for t in tensors]), first.spatial_ndim, first.value_range, source)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.images.shape[1:]

    def tensor(self, i: int) -> ImageTensor:
        return ImageTensor(self.images[i], self.spatial_ndim, self.value_range)


@dataclass(frozen=True)
class _Conditional:
    inner: np.ndarray  # indices of the removed coordinates
    outer: np.ndarray  # indices of the observed coordinates
    gain: np.ndarray  # Sigma_ab Sigma_bb^-1
    cov: np.ndarray
    factor: np.ndarray  # cov = factor @ factor.T


@dataclass(frozen=True, eq=False)
class GaussianPatchModel:
    """Multivariate normal over flattened outer patches.

    ``covariance`` holds the raw sample covariance; every factorisation uses
    ``covariance + epsilon * I``.
    """

    patch_shape: tuple[int, ...]
    mean: np.ndarray
    covariance: np.ndarray
    epsilon: float
    fitted_from: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", tuple(int(s) for s in self.patch_shape))
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        p = int(np.prod(self.patch_shape))
        if mean.shape != (p,) or cov.shape != (p, p):
            raise ValueError(f"moments do not match patch shape {self.patch_shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("non-finite Gaussian moments")
        if not np.array_equal(cov, cov.T):
            raise ValueError("covariance is not symmetric")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def size(self) -> int:
        return self.mean.size

    @property
    def regularized(self) -> np.ndarray:
        return self.covariance + self.epsilon * np.eye(self.size)

    def conditional(self, inner_mask) -> _Conditional:
        """Gain and covariance of the masked coordinates given the rest (cached per mask)."""
        mask = np.asarray(inner_mask, dtype=bool)
        if mask.shape != (self.size,):
            raise ValueError(f"mask of length {mask.size} for a {self.size}-dim model")
        key = mask.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        a = np.flatnonzero(mask)
        b = np.flatnonzero(~mask)
        if len(a) == 0:
            raise ValueError("inner mask selects nothing")
        sigma = self.regularized
        s_aa = sigma[np.ix_(a, a)]
        if len(b):
            s_ab = sigma[np.ix_(a, b)]
            try:
                cho = linalg.cho_factor(sigma[np.ix_(b, b)], lower=True, check_finite=False)
            except linalg.LinAlgError as exc:
                raise SingularCovariance("outer-patch covariance is not positive definite") from exc
            gain = linalg.cho_solve(cho, s_ab.T, check_finite=False).T
            cov = s_aa - gain @ s_ab.T
        else:
            gain = np.zeros((len(a), 0))
            cov = s_aa.copy()
        cov = 0.5 * (cov + cov.T)
        result = _Conditional(a, b, gain, cov, _sqrt_factor(cov))
        self._cache[key] = result
        return result


def _sqrt_factor(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        # Schur complements lose definiteness to rounding when epsilon is tiny
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def conditional_distribution(model: GaussianPatchModel, inner_mask, observed_outer):
    """Mean and covariance of the masked coordinates given the observed ones.

    ``observed_outer`` is either a full length-P patch (masked entries are
    ignored) or just the values at the unmasked positions, in order.
    """
    cond = model.conditional(inner_mask)
    observed = np.asarray(observed_outer, dtype=np.float64).ravel()
    if observed.size == model.size:
        observed = observed[cond.outer]
    elif observed.size != len(cond.outer):
        raise ValueError(f"{observed.size} observed values for {len(cond.outer)} outer positions")
    mean = model.mean[cond.inner] + cond.gain @ (observed - model.mean[cond.outer])
    return mean, cond.cov.copy()


def _patch_views(dataset: ReferenceDataset, outer: tuple[int, ...], spans_channels: bool):
    """All outer patches as a strided view ``(N, *positions, [C,] *patch)`` plus the patch shape."""
    images = dataset.images
    nd = dataset.spatial_ndim
    has_channels = images.ndim - 1 > nd
    spatial = images.shape[1 : 1 + nd]
    if len(outer) != nd:
        raise ValueError(f"patch has {len(outer)} spatial dims, dataset has {nd}")
    if any(l > n for l, n in zip(outer, spatial)):
        raise DatasetTooSmall(f"images {spatial} smaller than patch {outer}")
    axes = tuple(range(1, 1 + nd))
    if has_channels and not spans_channels:
        # treat every channel as a separate gray image
        images = np.moveaxis(images, -1, 1).reshape((-1,) + spatial)
        has_channels = False
    view = np.lib.stride_tricks.sliding_window_view(images, outer, axis=axes)
    if has_channels:
        # (N, *pos, C, *patch) -> (N, *pos, *patch, C)
        view = np.moveaxis(view, 1 + nd, -1)
        return view, tuple(outer) + (images.shape[-1],)
    return view, tuple(outer)


def _moments(patches: np.ndarray, patch_shape, epsilon, what: str) -> GaussianPatchModel:
    if len(patches) < 2:
        raise DatasetTooSmall(f"{what}: need at least 2 patches, have {len(patches)}")
    mean = patches.mean(axis=0)
    centred = patches - mean
    cov = centred.T @ centred / (len(patches) - 1)
    cov = 0.5 * (cov + cov.T)
    if epsilon is None:
        epsilon = max(EPSILON_SCALE * float(np.mean(np.diag(cov))), EPSILON_FLOOR)
    model = GaussianPatchModel(patch_shape, mean, cov, float(epsilon), len(patches))
    try:
        np.linalg.cholesky(model.regularized)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(f"{what}: covariance not positive definite after regularization") from exc
    return model


def _select(total: int, max_patches: int, seed: int) -> np.ndarray:
    if total <= max_patches:
        return np.arange(total)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(total, size=max_patches, replace=False))


def fit_gaussian(
    dataset: ReferenceDataset,
    patch_shape,
    max_patches: int = 20000,
    epsilon: float | None = None,
    rng_seed: int = 0,
    spans_channels: bool = True,
) -> GaussianPatchModel:
    """Sample mean and covariance of outer patches drawn from every valid position.

    ``patch_shape`` is the spatial outer size (int or per-dim tuple); the
    channel axis is appended when the data has channels and
    ``spans_channels`` is set. ``epsilon=None`` picks a small multiple of the
    mean variance.
    """
    outer = _spatial_tuple(patch_shape, dataset.spatial_ndim)
    view, full_shape = _patch_views(dataset, outer, spans_channels)
    lead = view.shape[: 1 + dataset.spatial_ndim]
    idx = _select(int(np.prod(lead)), max_patches, derive_seed(rng_seed, "fit_gaussian"))
    patches = view[np.unravel_index(idx, lead)].reshape(len(idx), -1)
    return _moments(patches, full_shape, epsilon, "global fit")


def _spatial_tuple(value, nd: int) -> tuple[int, ...]:
    if np.isscalar(value):
        return (int(value),) * nd
    return tuple(int(v) for v in value)[:nd]


def cell_of(position: Sequence[int], extent: Sequence[int], grid_dims: Sequence[int]) -> tuple[int, ...]:
    """Grid cell containing ``position`` in an image of the given spatial extent."""
    return tuple(min(p * g // n, g - 1) for p, n, g in zip(position, extent, grid_dims))


@dataclass(frozen=True, eq=False)
class LocationGrid:
    """Per-cell Gaussians; cells without a fitted model use ``global_model``."""

    grid_dims: tuple[int, ...]
    extent: tuple[int, ...]
    global_model: GaussianPatchModel
    cells: dict = field(default_factory=dict)

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.grid_dims))

    @property
    def patch_shape(self) -> tuple[int, ...]:
        return self.global_model.patch_shape

    def model_for(self, outer_origin: Sequence[int]) -> GaussianPatchModel:
        cell = cell_of(outer_origin, self.extent, self.grid_dims)
        flat = int(np.ravel_multi_index(cell, self.grid_dims))
        return self.cells.get(flat, self.global_model)


def fit_location_grid(
    dataset: ReferenceDataset,
    patch_shape,
    grid_dims,
    epsilon: float | None = None,
    rng_seed: int = 0,
    max_patches: int = 20000,
    spans_channels: bool = True,
) -> LocationGrid:
    """Fit one Gaussian per grid cell, keyed by the outer patch origin.

    Cells holding fewer than ``max(P, 50)`` patches keep the global model.
    """
    nd = dataset.spatial_ndim
    grid_dims = _spatial_tuple(grid_dims, nd)
    if any(g < 1 for g in grid_dims):
        raise ValueError(f"grid dims must be >= 1, got {grid_dims}")
    extent = dataset.images.shape[1 : 1 + nd]
    global_model = fit_gaussian(dataset, patch_shape, max_patches, epsilon, rng_seed, spans_channels)
    grid = LocationGrid(grid_dims, tuple(extent), global_model)
    if grid.num_cells == 1:
        return grid

    outer = _spatial_tuple(patch_shape, nd)
    view, full_shape = _patch_views(dataset, outer, spans_channels)
    p = int(np.prod(full_shape))
    positions = view.shape[1 : 1 + nd]
    cell_axes = [
        np.minimum(np.arange(m) * g // n, g - 1) for m, n, g in zip(positions, extent, grid_dims)
    ]
    cell_ids = np.ravel_multi_index(np.meshgrid(*cell_axes, indexing="ij"), grid_dims)
    need = max(p, MIN_CELL_PATCHES)
    n_images = view.shape[0]
    for cell in np.unique(cell_ids):
        where = np.nonzero(cell_ids == cell)
        total = n_images * len(where[0])
        if total < need:
            continue
        idx = _select(total, max_patches, derive_seed(rng_seed, f"cell:{int(cell)}"))
        img, pos = np.divmod(idx, len(where[0]))
        patches = view[(img,) + tuple(w[pos] for w in where)].reshape(len(idx), p)
        try:
            grid.cells[int(cell)] = _moments(patches, full_shape, epsilon, f"cell {int(cell)}")
        except SingularCovariance:
            continue
    return grid


def _check_patch(model: GaussianPatchModel, geometry: PatchGeometry, outer_values: np.ndarray):
    if tuple(model.patch_shape[: geometry.ndim]) != tuple(geometry.outer) or model.size != outer_values.size:
        raise SamplerError(
            f"sampler fitted on patches {model.patch_shape}, window needs {geometry.outer} "
            f"with {outer_values.size} values"
        )


class ConditionalSampler:
    """Draws the inner window from the Gaussian conditioned on its outer patch."""

    def __init__(self, model: GaussianPatchModel | LocationGrid, clip_to_range: bool = True,
                 reference_size: int | None = None):
        self.model = model
        self.clip_to_range = clip_to_range
        self.reference_size = reference_size

    @property
    def name(self) -> str:
        if isinstance(self.model, LocationGrid) and self.model.num_cells > 1:
            return "conditional+grid"
        return "conditional"

    def _model_for(self, window: WindowIndex) -> GaussianPatchModel:
        if isinstance(self.model, LocationGrid):
            return self.model.model_for(window.outer_origin)
        return self.model

    def draw(self, image: ImageTensor, window: WindowIndex, geometry: PatchGeometry,
             num_samples: int, rng: np.random.Generator) -> np.ndarray:
        model = self._model_for(window)
        region = window.outer_region(geometry)
        outer_values = image.data[region]
        _check_patch(model, geometry, outer_values)
        channels = outer_values.shape[-1] if outer_values.ndim > geometry.ndim else 1
        mask = window.inner_mask(geometry, channels)
        mean, _ = conditional_distribution(model, mask, outer_values.ravel())
        factor = model.conditional(mask).factor
        noise = rng.standard_normal((num_samples, len(mean)))
        samples = mean + noise @ factor.T
        if self.clip_to_range:
            lo, hi = image.value_range
            np.clip(samples, lo, hi, out=samples)
        return samples


class MarginalSampler:
    """Window content of random reference images at the same location.

    With ``exhaustive=True`` every reference image is used once, so the
    sample mean is the exact expectation under the empirical distribution.
    """

    name = "marginal"

    def __init__(self, dataset: ReferenceDataset, exhaustive: bool = False):
        if len(dataset) == 0:
            raise DatasetTooSmall("reference dataset is empty")
        self.dataset = dataset
        self.exhaustive = exhaustive
        self.reference_size = len(dataset)

    def draw(self, image: ImageTensor, window: WindowIndex, geometry: PatchGeometry,
             num_samples: int, rng: np.random.Generator) -> np.ndarray:
        if self.dataset.image_shape != image.shape:
            raise SamplerError(
                f"reference images have shape {self.dataset.image_shape}, input has {image.shape}"
            )
        if self.exhaustive:
            chosen = np.arange(len(self.dataset))
        else:
            chosen = rng.integers(0, len(self.dataset), size=num_samples)
        region = (slice(None),) + window.inner_region(geometry)
        block = self.dataset.images[region]
        return block[chosen].reshape(len(chosen), -1)


def sample_conditional(model, window: WindowIndex, image: ImageTensor, config: SamplingConfig,
                       geometry: PatchGeometry) -> np.ndarray:
    """``config.num_samples`` conditional draws for one window, seeded by its position."""
    rng = window_rng(config.rng_seed, window.origin, window.channel)
    sampler = ConditionalSampler(model, config.clip_to_range)
    return sampler.draw(image, window, geometry, config.num_samples, rng)


def sample_marginal(dataset: ReferenceDataset, window: WindowIndex, config: SamplingConfig,
                    geometry: PatchGeometry, image: ImageTensor | None = None) -> np.ndarray:
    rng = window_rng(config.rng_seed, window.origin, window.channel)
    if image is None:
        image = dataset.tensor(0)
    return MarginalSampler(dataset).draw(image, window, geometry, config.num_samples, rng)


# persistence -----------------------------------------------------------------

SAMPLER_FORMAT = "preddiff-sampler/1"


def save_sampler(path, model: GaussianPatchModel | LocationGrid, seed: int = 0, **extra) -> None:
    if isinstance(model, LocationGrid) and model.num_cells == 1:
        model = model.global_model
    if isinstance(model, GaussianPatchModel):
        grid = None
        glob = model
        cells = {}
    else:
        grid = model
        glob = model.global_model
        cells = model.cells
    header = {
        "format": SAMPLER_FORMAT,
        "patch_shape": list(glob.patch_shape),
        "epsilon": glob.epsilon,
        "fitted_from": glob.fitted_from,
        "seed": int(seed),
        "grid_dims": list(grid.grid_dims) if grid is not None else None,
        "extent": list(grid.extent) if grid is not None else None,
        "cells": [
            {"cell": c, "epsilon": m.epsilon, "fitted_from": m.fitted_from}
            for c, m in sorted(cells.items())
        ],
    }
    header.update(extra)
    blobs = [(glob.mean, np.float64), (glob.covariance, np.float64)]
    for _, m in sorted(cells.items()):
        blobs += [(m.mean, np.float64), (m.covariance, np.float64)]
    pdt1.write_container(path, header, blobs)


def load_sampler(path) -> tuple[GaussianPatchModel | LocationGrid, dict]:
    header, arrays = pdt1.read_container(path)
    if header.get("format") != SAMPLER_FORMAT:
        raise pdt1.FormatError(f"{path}: not a sampler file")
    shape = tuple(header["patch_shape"])
    glob = GaussianPatchModel(shape, arrays[0], arrays[1], header["epsilon"], header["fitted_from"])
    if header.get("extent") is None:
        return glob, header
    grid = LocationGrid(tuple(header["grid_dims"]), tuple(header["extent"]), glob)
    for i, cell in enumerate(header["cells"]):
        mean, cov = arrays[2 + 2 * i], arrays[3 + 2 * i]
        grid.cells[int(cell["cell"])] = GaussianPatchModel(
            shape, mean, cov, cell["epsilon"], cell["fitted_from"]
        )
    return grid, header
