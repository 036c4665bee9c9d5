"""Heatmap overlays: red for evidence for the target, blue against.

The colour scale is symmetric around zero with its extremes at the largest
absolute value. A painted pixel is blended over the gray base with opacity
``overlay_alpha * |value| / max``, so the strongest evidence is drawn in pure
colour and faint evidence lets the anatomy show through. Values below
``threshold_fraction`` of the maximum are left unpainted.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import ImageTensor, RelevanceMap

RED = np.array([255.0, 0.0, 0.0])
BLUE = np.array([0.0, 0.0, 255.0])


@dataclass(frozen=True)
class HeatmapStyle:
    overlay_alpha: float = 1.0
    threshold_fraction: float = 0.15
    reduce_channels: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.overlay_alpha <= 1.0 or not 0.0 <= self.threshold_fraction <= 1.0:
            raise ValueError("overlay_alpha and threshold_fraction must lie in [0, 1]")
        if self.reduce_channels not in ("mean", "max"):
            raise ValueError("reduce_channels must be 'mean' or 'max'")


def reduce_channels(values: np.ndarray, how: str) -> np.ndarray:
    """Collapse a trailing channel axis; ``max`` keeps the signed value of largest magnitude."""
    if how == "mean":
        return values.mean(axis=-1)
    idx = np.abs(values).argmax(axis=-1)
    return np.take_along_axis(values, idx[..., None], -1)[..., 0]


def _spatial_ndim(rmap: RelevanceMap, base: ImageTensor | None) -> int:
    if base is not None:
        return base.spatial_ndim
    return int(rmap.meta.get("spatial_ndim", min(rmap.sums.ndim, 3)))


def _plane(values: np.ndarray, nd: int, how: str, axis: int, index: int | None) -> np.ndarray:
    if values.ndim > nd:
        values = reduce_channels(values, how)
    if nd == 3:
        if index is None:
            index = values.shape[axis] // 2
        values = np.take(values, index, axis=axis)
    elif nd == 1:
        values = values[None, :]
    return values


def base_gray(base: ImageTensor | None, shape, axis: int = 0, index: int | None = None) -> np.ndarray:
    """Base image as gray RGB floats in [0, 255]; white when there is none."""
    if base is None:
        return np.full(tuple(shape) + (3,), 255.0)
    lo, hi = base.value_range
    span = hi - lo if hi > lo and np.isfinite(hi - lo) else 1.0
    gray = _plane((base.data - lo) / span, base.spatial_ndim, "mean", axis, index)
    gray = np.clip(gray, 0.0, 1.0) * 255.0
    return np.repeat(np.rint(gray)[..., None], 3, axis=-1)


def heatmap_rgb(rmap: RelevanceMap, base: ImageTensor | None = None, style: HeatmapStyle = HeatmapStyle(),
                slice_index: int | None = None, axis: int = 0) -> np.ndarray:
    """Overlay as a ``(H, W, 3)`` uint8 array (volumes: one slice along ``axis``)."""
    nd = _spatial_ndim(rmap, base)
    values = _plane(rmap.values, nd, style.reduce_channels, axis, slice_index)
    out = base_gray(base, values.shape, axis, slice_index)
    if base is not None and out.shape[:2] != values.shape:
        raise ValueError(f"map plane {values.shape} does not match base {out.shape[:2]}")
    top = float(np.max(np.abs(values))) if values.size else 0.0
    if top > 0:
        scaled = values / top
        scaled[np.abs(values) < style.threshold_fraction * top] = 0.0
        opacity = style.overlay_alpha * np.abs(scaled)[..., None]
        colour = np.where(scaled[..., None] >= 0, RED, BLUE)
        out = (1.0 - opacity) * out + opacity * colour
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _sidecar(path: Path, info: dict) -> None:
    path.with_name(path.name + ".json").write_text(json.dumps(info, indent=2, sort_keys=True))


def render_heatmap(rmap: RelevanceMap, base: ImageTensor | None, style: HeatmapStyle, path,
                   slice_index: int | None = None, axis: int = 0) -> np.ndarray:
    """Write the overlay as an 8-bit RGB PNG plus a ``.json`` sidecar."""
    rgb = heatmap_rgb(rmap, base, style, slice_index, axis)
    path = Path(path)
    Image.fromarray(rgb, "RGB").save(path)
    _sidecar(path, {
        "style": asdict(style), "kind": rmap.kind, "target": rmap.target,
        "max_abs": float(np.max(np.abs(rmap.values))), "slice": slice_index, "axis": axis,
    })
    return rgb


def render_volume(rmap: RelevanceMap, base: ImageTensor | None, style: HeatmapStyle, out_dir,
                  axis: int = 0, slices=None, columns: int = 6) -> list[Path]:
    """Per-slice PNGs plus a ``grid.png`` contact sheet for a 3-d map."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    depth = rmap.values.shape[axis]
    slices = range(depth) if slices is None else slices
    written, tiles = [], []
    for s in slices:
        path = out_dir / f"slice_{axis}_{s:03d}.png"
        tiles.append(render_heatmap(rmap, base, style, path, s, axis))
        written.append(path)
    if tiles:
        h, w, _ = tiles[0].shape
        cols = min(columns, len(tiles))
        rows = -(-len(tiles) // cols)
        sheet = np.full((rows * h, cols * w, 3), 255, dtype=np.uint8)
        for i, tile in enumerate(tiles):
            r, c = divmod(i, cols)
            sheet[r * h : (r + 1) * h, c * w : (c + 1) * w] = tile
        grid = out_dir / "grid.png"
        Image.fromarray(sheet, "RGB").save(grid)
        _sidecar(grid, {"style": asdict(style), "axis": axis, "slices": list(slices), "columns": cols})
        written.append(grid)
    return written
