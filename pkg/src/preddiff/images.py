"""Loading inputs and datasets; relevance archive persistence.

PNG and PGM/PPM are decoded with Pillow and scaled to [0, 1]; colour images
come back channel-last (``H x W x 3``). PDT1 files are taken as-is and must
already lie in the requested value range.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import pdt1
from .samplers import ReferenceDataset
from .tensor import ImageTensor, RelevanceMap

IMAGE_SUFFIXES = {".png": "png", ".pgm": "pgm", ".ppm": "pgm", ".pnm": "pgm", ".pdt1": "pdt1", ".pdt": "pdt1"}
RELEVANCE_FORMAT = "preddiff-relevance/1"


class ImageReadError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


def _format_of(path: Path, fmt: str | None) -> str:
    if fmt:
        return fmt
    try:
        return IMAGE_SUFFIXES[path.suffix.lower()]
    except KeyError:
        raise ImageReadError(f"{path}: unknown image format") from None


def _decode(path: Path) -> tuple[np.ndarray, bool]:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L"):
                return np.asarray(im, dtype=np.float64) / 65535.0, False
            if mode == "I":
                arr = np.asarray(im, dtype=np.float64)
                return arr / (65535.0 if arr.max() > 255 else 255.0), False
            if mode in ("1", "L", "LA"):
                return np.asarray(im.convert("L"), dtype=np.float64) / 255.0, False
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0, True
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageReadError(f"{path}: cannot decode image ({exc})") from exc


def load_image(path, fmt: str | None = None, spatial_ndim: int | None = None,
               value_range=(0.0, 1.0)) -> ImageTensor:
    """Read one input. For PDT1, ``spatial_ndim`` says whether a trailing axis is channels."""
    path = Path(path)
    kind = _format_of(path, fmt)
    if kind == "pdt1":
        try:
            data = pdt1.read(path)
        except (OSError, pdt1.FormatError) as exc:
            raise ImageReadError(f"{path}: {exc}") from exc
        try:
            return ImageTensor(data.astype(np.float64), spatial_ndim, value_range)
        except ValueError as exc:
            raise ImageReadError(f"{path}: {exc}") from exc
    data, _ = _decode(path)
    return ImageTensor(data, 2, (0.0, 1.0))


def load_dataset(path, fmt: str | None = None, spatial_ndim: int | None = None,
                 value_range=(0.0, 1.0)) -> ReferenceDataset:
    """A directory of images (sorted by name) or one stacked PDT1 file ``(N, ...)``."""
    path = Path(path)
    if path.is_file():
        stack = pdt1.read(path).astype(np.float64)
        if spatial_ndim is None:
            spatial_ndim = stack.ndim - 1
        try:
            return ReferenceDataset(stack, spatial_ndim, value_range, source=str(path))
        except ValueError as exc:
            raise ImageReadError(f"{path}: {exc}") from exc
    if not path.is_dir():
        raise ImageReadError(f"{path}: no such file or directory")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if fmt:
        files = [p for p in files if IMAGE_SUFFIXES[p.suffix.lower()] == fmt]
    if not files:
        raise ImageReadError(f"{path}: no images found")
    tensors = []
    for p in files:
        t = load_image(p, fmt, spatial_ndim, value_range)
        if tensors and t.shape != tensors[0].shape:
            raise ShapeMismatchError(
                f"{p.name} has shape {t.shape}, expected {tensors[0].shape} (from {files[0].name})", p
            )
        tensors.append(t)
    return ReferenceDataset.from_tensors(tensors, source=str(path))


def dataset_files(path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def save_image(path, tensor: ImageTensor) -> None:
    """Write a tensor as PDT1 (float32) or as 8-bit PNG/PGM depending on suffix."""
    path = Path(path)
    kind = _format_of(path, None)
    if kind == "pdt1":
        pdt1.save(path, tensor.data)
        return
    lo, hi = tensor.value_range
    scaled = np.rint((tensor.data - lo) / (hi - lo) * 255.0).astype(np.uint8)
    Image.fromarray(scaled).save(path)


def save_relevance(path, rmap: RelevanceMap) -> None:
    """Archive = JSON header + finalized values (float32) + counts + exact sums."""
    header = {
        "format": RELEVANCE_FORMAT,
        "kind": rmap.kind,
        "target": rmap.target,
        "meta": rmap.meta,
        "shape": list(rmap.shape),
    }
    pdt1.write_container(path, header, [
        (rmap.values, np.float32),
        (rmap.counts, np.int64),
        (rmap.sums, np.float64),
    ])


def load_relevance(path) -> RelevanceMap:
    header, arrays = pdt1.read_container(path)
    if header.get("format") != RELEVANCE_FORMAT or len(arrays) != 3:
        raise pdt1.FormatError(f"{path}: not a relevance archive")
    _, counts, sums = arrays
    return RelevanceMap(sums, counts, header["kind"], header["target"], header["meta"])
