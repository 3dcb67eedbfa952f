"""Rasters and pose-normalized region extraction.

Pixel centres sit at integer coordinates, so a ``W x H`` image covers
``[0, W-1] x [0, H-1]`` in the continuous frame warps act on.  Resampling is
inverse-mapped bilinear interpolation; output pixels whose source location
falls outside that rectangle get the fill value and a false mask bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import KeypointSet, Warp, WarpFitResult, family_of_matrix, fit_region_warp, invert_warp

DEFAULT_FILL = 0.5


@dataclass(frozen=True, eq=False)
class ImageRaster:
    """Row-major (H, W, C) samples in [0, 1]; C is 1 or 3."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=float)
        if a.ndim == 2:
            a = a[..., None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise ValueError(f"raster must be HxW, HxWx1 or HxWx3, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("raster samples must be finite")
        a = np.array(a, copy=True)
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def gray(self) -> np.ndarray:
        if self.channels == 1:
            return self.data[..., 0]
        return self.data @ np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class RegionCrop:
    raster: ImageRaster
    source_warp: Warp
    valid_mask: np.ndarray
    fit: WarpFitResult | None = None

    @property
    def size(self) -> int:
        return self.raster.width


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) ``img`` at in-bounds continuous positions ``x``, ``y``."""
    H, W = img.shape[:2]
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    # keep x0 + 1 addressable; a sample exactly on the last column gets fx = 1
    x0 = np.clip(x0, 0, max(W - 2, 0))
    y0 = np.clip(y0, 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def warp_image(src: ImageRaster, w: Warp, out_size, fill: float = DEFAULT_FILL) -> RegionCrop:
    """Resample ``src`` into the frame ``w`` maps it to.

    ``out_size`` is an int (square output) or ``(width, height)``.  Raises
    :class:`~posenorm.errors.SingularWarp` when ``w`` cannot be inverted.
    """
    if np.isscalar(out_size):
        ow = oh = int(out_size)
    else:
        ow, oh = (int(v) for v in out_size)
    inv = invert_warp(w)
    qy, qx = np.mgrid[0:oh, 0:ow].astype(float)
    px = inv.A[0, 0] * qx + inv.A[0, 1] * qy + inv.t[0]
    py = inv.A[1, 0] * qx + inv.A[1, 1] * qy + inv.t[1]
    H, W = src.height, src.width
    valid = (px >= 0) & (px <= W - 1) & (py >= 0) & (py <= H - 1)
    out = np.full((oh, ow, src.channels), float(fill))
    if valid.any():
        out[valid] = bilinear_sample(src.data, px[valid], py[valid])
    return RegionCrop(ImageRaster(out), w, valid)


def extract_prototype_region(
    img: ImageRaster, detected: KeypointSet, proto, fill: float = DEFAULT_FILL
) -> RegionCrop:
    """Pose-normalized crop of ``img`` for one prototype.

    Raises :class:`~posenorm.errors.InsufficientPoints` when the prototype's
    anchors are not visible enough to fit its warp.
    """
    fit = fit_region_warp(detected, proto)
    crop = warp_image(img, fit.warp, int(round(proto.canonical_size)), fill)
    return RegionCrop(crop.raster, crop.source_warp, crop.valid_mask, fit)


def whole_image_region(img: ImageRaster, out_size: int, fill: float = DEFAULT_FILL) -> RegionCrop:
    """The full image squeezed into an ``out_size`` square."""
    sx = (out_size - 1) / max(img.width - 1, 1)
    sy = (out_size - 1) / max(img.height - 1, 1)
    m = np.array([[sx, 0.0, 0.0], [0.0, sy, 0.0]])
    return warp_image(img, Warp(family_of_matrix(m), m), out_size, fill)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def read_image(path, mode: str = "RGB") -> ImageRaster:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert(mode), dtype=float) / 255.0
    return ImageRaster(arr)


def write_png(raster: ImageRaster | np.ndarray, path) -> None:
    from PIL import Image

    data = raster.data if isinstance(raster, ImageRaster) else np.asarray(raster, float)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    arr = np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")
