"""Dense image tensors, sliding-window enumeration and relevance accumulation.

Tensors are plain numpy arrays laid out spatial-dims-first with an optional
trailing channel axis. All flattening is row-major (C order), so a window over
a colour image yields ``k * k * C`` values with the channel varying fastest.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ImageTensor",
    "PatchGeometry",
    "WindowIndex",
    "RelevanceMap",
    "enumerate_windows",
    "extract",
    "write",
    "coverage_counts",
]

KINDS = ("weight_of_evidence", "activation_difference", "sensitivity")


def _as_tuple(value, ndim: int, name: str) -> tuple[int, ...]:
    if np.isscalar(value):
        out = (int(value),) * ndim
    else:
        out = tuple(int(v) for v in value)
    if len(out) != ndim:
        raise ValueError(f"{name} has {len(out)} entries, expected {ndim}")
    if any(v < 1 for v in out):
        raise ValueError(f"{name} must be positive, got {out}")
    return out


@dataclass(frozen=True)
class ImageTensor:
    """An input ``x`` together with the interval its values live in.

    Args:
        data: array of shape ``spatial + (channels,)`` or ``spatial``.
        spatial_ndim: number of leading spatial axes (1 to 3). Defaults to
            ``data.ndim``, i.e. no channel axis.
        value_range: closed interval the values are asserted to lie in.
    """

    data: np.ndarray
    spatial_ndim: int = None  # type: ignore[assignment]
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        nd = data.ndim if self.spatial_ndim is None else int(self.spatial_ndim)
        object.__setattr__(self, "spatial_ndim", nd)
        if not 1 <= nd <= 3:
            raise ValueError(f"spatial_ndim must be 1..3, got {nd}")
        if data.ndim not in (nd, nd + 1):
            raise ValueError(f"array of rank {data.ndim} cannot have {nd} spatial dims")
        if data.size == 0:
            raise ValueError("empty tensor")
        lo, hi = (float(v) for v in self.value_range)
        if not lo <= hi:
            raise ValueError(f"bad value_range {self.value_range}")
        object.__setattr__(self, "value_range", (lo, hi))
        if not np.all(np.isfinite(data)):
            raise ValueError("tensor contains non-finite values")
        if data.min() < lo or data.max() > hi:
            raise ValueError(
                f"values [{data.min()}, {data.max()}] outside value_range {self.value_range}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.data.shape[: self.spatial_ndim]

    @property
    def has_channels(self) -> bool:
        return self.data.ndim > self.spatial_ndim

    @property
    def channels(self) -> int:
        return self.data.shape[-1] if self.has_channels else 1

    def replace(self, data: np.ndarray) -> "ImageTensor":
        return dataclasses.replace(self, data=data)


@dataclass(frozen=True)
class PatchGeometry:
    """Inner window ``k``, outer conditioning patch ``l`` and stride.

    Scalars are broadcast over the spatial dims when ``ndim`` is given via
    :meth:`cubic`; otherwise pass per-dim tuples.
    """

    inner: tuple[int, ...]
    outer: tuple[int, ...]
    stride: tuple[int, ...] = None  # type: ignore[assignment]
    spans_channels: bool = True

    def __post_init__(self):
        ndim = len(tuple(self.inner))
        inner = _as_tuple(self.inner, ndim, "inner")
        outer = _as_tuple(self.outer, ndim, "outer")
        stride = _as_tuple(1 if self.stride is None else self.stride, ndim, "stride")
        if any(o < i for i, o in zip(inner, outer)):
            raise ValueError(f"outer size {outer} smaller than inner size {inner}")
        object.__setattr__(self, "inner", inner)
        object.__setattr__(self, "outer", outer)
        object.__setattr__(self, "stride", stride)

    @classmethod
    def cubic(cls, k: int, l: int, ndim: int, stride: int = 1, spans_channels: bool = True):
        return cls((k,) * ndim, (l,) * ndim, (stride,) * ndim, spans_channels)

    @property
    def ndim(self) -> int:
        return len(self.inner)

    def check(self, shape: Sequence[int]) -> tuple[tuple[int, ...], int | None]:
        """Validate against a tensor shape; return (spatial shape, channels or None)."""
        shape = tuple(int(s) for s in shape)
        if len(shape) == self.ndim:
            spatial, channels = shape, None
        elif len(shape) == self.ndim + 1:
            spatial, channels = shape[:-1], shape[-1]
        else:
            raise ValueError(
                f"geometry has {self.ndim} spatial dims but tensor shape is {shape}"
            )
        for d, (n, k, l) in enumerate(zip(spatial, self.inner, self.outer)):
            if k > n:
                raise ValueError(f"inner size {k} exceeds extent {n} on axis {d}")
            if l > n:
                raise ValueError(f"outer size {l} exceeds extent {n} on axis {d}")
        return spatial, channels


@dataclass(frozen=True)
class WindowIndex:
    """One inner window and its resolved outer patch.

    ``channel`` is None when the window spans all channels (or the tensor has
    none); otherwise the window is restricted to that channel.
    """

    origin: tuple[int, ...]
    outer_origin: tuple[int, ...]
    channel: int | None = None

    def inner_region(self, geometry: PatchGeometry) -> tuple[slice, ...]:
        region = tuple(slice(o, o + k) for o, k in zip(self.origin, geometry.inner))
        if self.channel is not None:
            region += (slice(self.channel, self.channel + 1),)
        return region

    def outer_region(self, geometry: PatchGeometry) -> tuple[slice, ...]:
        region = tuple(slice(o, o + l) for o, l in zip(self.outer_origin, geometry.outer))
        if self.channel is not None:
            region += (slice(self.channel, self.channel + 1),)
        return region

    def offset(self) -> tuple[int, ...]:
        """Position of the inner window inside the outer patch."""
        return tuple(a - b for a, b in zip(self.origin, self.outer_origin))

    def inner_mask(self, geometry: PatchGeometry, channels: int = 1) -> np.ndarray:
        """Flat boolean mask over the outer patch selecting the inner window.

        ``channels`` is the trailing channel extent of the patch (1 for gray
        tensors and for per-channel windows).
        """
        mask = np.zeros(tuple(geometry.outer) + (channels,), dtype=bool)
        region = tuple(slice(o, o + k) for o, k in zip(self.offset(), geometry.inner))
        mask[region] = True
        return mask.ravel()


def _outer_start(origin: int, k: int, l: int, n: int) -> int:
    # centre the outer patch on the window, then shift it back inside the image
    start = origin - (l - k) // 2
    return min(max(start, 0), n - l)


def enumerate_windows(shape: Sequence[int], geometry: PatchGeometry) -> list[WindowIndex]:
    """All inner windows fully inside ``shape``, in row-major order of origin.

    When the geometry does not span channels and the shape has a channel axis,
    every spatial origin is visited once per channel, channel varying fastest.
    """
    spatial, channels = geometry.check(shape)
    axes = [range(0, n - k + 1, s) for n, k, s in zip(spatial, geometry.inner, geometry.stride)]
    per_channel = channels is not None and not geometry.spans_channels
    windows = []
    for origin in np.ndindex(*(len(a) for a in axes)):
        origin = tuple(axes[d][i] for d, i in enumerate(origin))
        outer = tuple(
            _outer_start(o, k, l, n)
            for o, k, l, n in zip(origin, geometry.inner, geometry.outer, spatial)
        )
        if per_channel:
            windows.extend(WindowIndex(origin, outer, c) for c in range(channels))
        else:
            windows.append(WindowIndex(origin, outer))
    return windows


def _region(tensor: np.ndarray, origin: Sequence[int], size: Sequence[int], channel):
    if len(origin) != len(size):
        raise ValueError("origin and size disagree in rank")
    if len(origin) > tensor.ndim:
        raise ValueError(f"{len(origin)}-d region on a rank-{tensor.ndim} tensor")
    for d, (o, s) in enumerate(zip(origin, size)):
        if o < 0 or s < 1 or o + s > tensor.shape[d]:
            raise IndexError(
                f"region [{o}, {o + s}) out of bounds for axis {d} of extent {tensor.shape[d]}"
            )
    region = tuple(slice(o, o + s) for o, s in zip(origin, size))
    if channel is not None:
        if len(origin) != tensor.ndim - 1 or not 0 <= channel < tensor.shape[-1]:
            raise IndexError(f"channel {channel} invalid for shape {tensor.shape}")
        region += (slice(channel, channel + 1),)
    return region


def extract(tensor: np.ndarray, origin: Sequence[int], size: Sequence[int], channel=None) -> np.ndarray:
    """Copy out a box as a flat row-major vector (all trailing axes included)."""
    return np.asarray(tensor)[_region(tensor, origin, size, channel)].ravel().copy()


def write(tensor: np.ndarray, origin: Sequence[int], size: Sequence[int], values, channel=None) -> None:
    """Inverse of :func:`extract`; writes ``values`` into ``tensor`` in place."""
    region = _region(tensor, origin, size, channel)
    target = tensor[region]
    values = np.asarray(values)
    if values.size != target.size:
        raise ValueError(f"{values.size} values for a region of {target.size} elements")
    tensor[region] = values.reshape(target.shape)


def coverage_counts(shape: Sequence[int], geometry: PatchGeometry) -> np.ndarray:
    """Number of enumerated windows containing each element.

    Windows are boxes, so the count factorises into a product of 1-d counts.
    """
    spatial, channels = geometry.check(shape)
    counts = np.ones((), dtype=np.int64)
    for n, k, s in zip(spatial, geometry.inner, geometry.stride):
        c = np.zeros(n, dtype=np.int64)
        for start in range(0, n - k + 1, s):
            c[start : start + k] += 1
        counts = np.multiply.outer(counts, c)
    if channels is not None:
        counts = np.repeat(counts[..., None], channels, axis=-1)
    return counts


@dataclass
class RelevanceMap:
    """Accumulated window scores and per-element coverage.

    ``sums`` and ``counts`` have the explained tensor's full shape; the
    user-facing map is :attr:`values` (sums / counts, 0 where uncovered).
    """

    sums: np.ndarray
    counts: np.ndarray
    kind: str
    target: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    window_samples: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown relevance kind {self.kind!r}")
        self.sums = np.asarray(self.sums, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.sums.shape != self.counts.shape:
            raise ValueError("sums and counts differ in shape")

    @classmethod
    def empty(cls, shape, kind: str, target: dict | None = None) -> "RelevanceMap":
        return cls(np.zeros(shape), np.zeros(shape, dtype=np.int64), kind, dict(target or {}))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.sums.shape

    @property
    def values(self) -> np.ndarray:
        out = np.zeros_like(self.sums)
        covered = self.counts > 0
        out[covered] = self.sums[covered] / self.counts[covered]
        return out

    @property
    def uncovered(self) -> int:
        return int(np.count_nonzero(self.counts == 0))

    def add(self, region: tuple[slice, ...], score: float) -> None:
        self.sums[region] += score
        self.counts[region] += 1
