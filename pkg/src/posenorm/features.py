"""Region descriptors and assembly of the multi-region feature vector.

The combined vector is a fixed-order concatenation of blocks, one per
(region, extractor) pair.  Each present block is scaled to unit L2 norm on
its own; blocks for regions whose warp could not be fit stay exactly zero.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol

import numpy as np

from .errors import DimensionMismatch, FormatError, LayoutMismatch
from .imaging import RegionCrop

EXTERNAL_MAGIC = "pnf1"

HOG_CELLS = 16
HOG_DIMS = 31
HOG_CLIP = 0.2
HOG_EPS = 1e-4
HOG_TEXTURE_SCALE = 0.2357


class FeatureExtractor(Protocol):
    name: str

    def dimension(self, out_size: int, channels: int) -> int: ...

    def extract(self, crop: RegionCrop) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# raw pixels
# ---------------------------------------------------------------------------


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) averaging weights for box-downsampling a 1-D signal."""
    edges = np.linspace(0.0, n_in, n_out + 1)
    M = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = edges[i], edges[i + 1]
        for j in range(int(math.floor(a)), min(int(math.ceil(b)), n_in)):
            M[i, j] = min(b, j + 1) - max(a, j)
        M[i] /= b - a
    return M


def box_downsample(img: np.ndarray, side: int) -> np.ndarray:
    """Area-average an (H, W, C) array down to (side, side, C)."""
    H, W = img.shape[:2]
    Ry = _area_matrix(H, side)
    Rx = _area_matrix(W, side)
    return np.einsum("ih,hwc,jw->ijc", Ry, img, Rx)


def extract_raw_pixels(crop: RegionCrop, side: int) -> np.ndarray:
    return box_downsample(crop.raster.data, side).reshape(-1)


@dataclass(frozen=True)
class RawPixels:
    side: int = 8
    name: str = "raw"

    def dimension(self, out_size: int = 0, channels: int = 1) -> int:
        return self.side * self.side * channels

    def extract(self, crop: RegionCrop) -> np.ndarray:
        return extract_raw_pixels(crop, self.side)


# ---------------------------------------------------------------------------
# HOG, 31-channel cell descriptor
# ---------------------------------------------------------------------------

_ORIENT = np.arange(9) * math.pi / 9
_UU = np.cos(_ORIENT)
_VV = np.sin(_ORIENT)


def hog_cell_histograms(img: np.ndarray, sbin: float, blocks: int) -> np.ndarray:
    """Orientation histograms (blocks, blocks, 18) with bilinear spatial voting.

    Per pixel, the channel with the strongest gradient wins; its direction is
    snapped to one of 18 signed orientations 20 degrees apart.
    """
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    H, W = img.shape[:2]
    dx = img[1:-1, 2:] - img[1:-1, :-2]
    dy = img[2:, 1:-1] - img[:-2, 1:-1]
    mag2 = dx * dx + dy * dy
    best_c = np.argmax(mag2, axis=2)[..., None]
    dx = np.take_along_axis(dx, best_c, 2)[..., 0]
    dy = np.take_along_axis(dy, best_c, 2)[..., 0]
    v = np.sqrt(np.take_along_axis(mag2, best_c, 2)[..., 0])

    dots = _UU[:, None, None] * dx + _VV[:, None, None] * dy  # (9, h, w)
    # interleave +dot/-dot so argmax reproduces the scan order o, o+9, o+1, ...
    both = np.empty((18,) + dots.shape[1:])
    both[0::2] = dots
    both[1::2] = -dots
    pick = np.argmax(both, axis=0)
    orient = pick // 2 + 9 * (pick % 2)

    ys, xs = np.mgrid[1 : H - 1, 1 : W - 1].astype(float)
    xp = (xs + 0.5) / sbin - 0.5
    yp = (ys + 0.5) / sbin - 0.5
    ixp = np.floor(xp).astype(int)
    iyp = np.floor(yp).astype(int)
    vx0 = xp - ixp
    vy0 = yp - iyp
    vx1 = 1.0 - vx0
    vy1 = 1.0 - vy0

    hist = np.zeros((blocks, blocks, 18))
    for ox, oy, wgt in (
        (0, 0, vx1 * vy1),
        (1, 0, vx0 * vy1),
        (0, 1, vx1 * vy0),
        (1, 1, vx0 * vy0),
    ):
        cx = ixp + ox
        cy = iyp + oy
        ok = (cx >= 0) & (cx < blocks) & (cy >= 0) & (cy < blocks) & (v > 0)
        np.add.at(hist, (cy[ok], cx[ok], orient[ok]), (wgt * v)[ok])
    return hist


def hog_from_histograms(hist: np.ndarray) -> np.ndarray:
    """Normalize (B, B, 18) cell histograms into (B-2, B-2, 31) features."""
    B = hist.shape[0]
    energy = np.sum((hist[..., :9] + hist[..., 9:]) ** 2, axis=-1)
    # 2x2 block energies; blk[y, x] sums cells (y..y+1, x..x+1)
    blk = energy[:-1, :-1] + energy[1:, :-1] + energy[:-1, 1:] + energy[1:, 1:]
    n = B - 2
    inv = 1.0 / np.sqrt(blk + HOG_EPS)
    # the four blocks touching interior cell (y+1, x+1)
    norms = np.stack([inv[1:, 1:], inv[:-1, 1:], inv[1:, :-1], inv[:-1, :-1]])  # (4, n, n)
    src = hist[1:-1, 1:-1]  # (n, n, 18)

    sens = np.minimum(src[None] * norms[..., None], HOG_CLIP)  # (4, n, n, 18)
    unsigned = src[..., :9] + src[..., 9:]
    insens = np.minimum(unsigned[None] * norms[..., None], HOG_CLIP)
    out = np.empty((n, n, HOG_DIMS))
    out[..., :18] = 0.5 * sens.sum(axis=0)
    out[..., 18:27] = 0.5 * insens.sum(axis=0)
    out[..., 27:31] = HOG_TEXTURE_SCALE * np.moveaxis(sens.sum(axis=-1), 0, -1)
    return out


def extract_hog(crop: RegionCrop | np.ndarray, cells: int = HOG_CELLS) -> np.ndarray:
    """16 x 16 x 31 HOG descriptor of a square crop, flattened (cell row, cell col, channel).

    Channels 0-17 are contrast-sensitive orientations, 18-26 contrast-
    insensitive ones, 27-30 the per-block gradient energies.  Samples are
    taken on a 0-255 scale so the normalization epsilon matches the usual
    8-bit setting.
    """
    data = crop.raster.data if isinstance(crop, RegionCrop) else np.asarray(crop, float)
    side = data.shape[0]
    if data.shape[1] != side:
        raise ValueError(f"HOG needs a square crop, got {data.shape[1]}x{side}")
    blocks = cells + 2
    hist = hog_cell_histograms(data * 255.0, side / blocks, blocks)
    return hog_from_histograms(hist).reshape(-1)


@dataclass(frozen=True)
class HOG:
    cells: int = HOG_CELLS
    name: str = "hog"

    def dimension(self, out_size: int = 0, channels: int = 1) -> int:
        return self.cells * self.cells * HOG_DIMS

    def extract(self, crop: RegionCrop) -> np.ndarray:
        return extract_hog(crop, self.cells)


def make_extractor(text: str):
    """``"hog"``, ``"raw"`` or ``"raw:<side>"``."""
    name, _, arg = text.partition(":")
    if name == "hog":
        return HOG()
    if name == "raw":
        return RawPixels(int(arg) if arg else 8)
    raise ValueError(f"unknown extractor {text!r}")


# ---------------------------------------------------------------------------
# external feature files
# ---------------------------------------------------------------------------


@dataclass
class ExternalFeatures:
    name: str
    dimension: int
    vectors: dict = field(default_factory=dict)

    def get(self, image_id: str, region: int):
        return self.vectors.get((image_id, int(region)))

    def missing(self, keys: Iterable[tuple[str, int]]) -> list[tuple[str, int]]:
        return [k for k in keys if (k[0], int(k[1])) not in self.vectors]


def load_external_features(path, expected_dimension: int | None = None) -> ExternalFeatures:
    """Read a ``pnf1`` feature file.

    The header ``pnf1 <dimension> <extractor_name>`` is followed by one
    ``image_id<TAB>region_index<TAB>v1,...,vD`` record per line.  Lines
    starting with ``#`` are comments.
    """
    path = Path(path)
    header = None
    feats = None
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            where = f"{path}:{lineno}"
            if header is None:
                header = line.split()
                if len(header) != 3 or header[0] != EXTERNAL_MAGIC:
                    raise FormatError(f"{where}: expected header '{EXTERNAL_MAGIC} <dimension> <name>'")
                try:
                    dim = int(header[1])
                except ValueError:
                    raise FormatError(f"{where}: dimension {header[1]!r} is not an integer") from None
                if dim <= 0:
                    raise FormatError(f"{where}: dimension must be positive")
                if expected_dimension is not None and dim != expected_dimension:
                    raise DimensionMismatch(
                        f"{where}: header declares dimension {dim}, manifest expects {expected_dimension}"
                    )
                feats = ExternalFeatures(header[2], dim)
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise FormatError(f"{where}: expected 3 tab-separated fields, got {len(fields)}")
            image_id, region, values = fields
            try:
                region = int(region)
            except ValueError:
                raise FormatError(f"{where}: region index {region!r} is not an integer") from None
            try:
                vec = np.array([float(v) for v in values.split(",")], dtype=float)
            except ValueError as e:
                raise FormatError(f"{where}: bad value ({e})") from None
            if vec.size != feats.dimension:
                raise DimensionMismatch(
                    f"{where}: record ({image_id}, {region}) has {vec.size} values, expected {feats.dimension}"
                )
            if not np.all(np.isfinite(vec)):
                raise FormatError(f"{where}: non-finite value in record ({image_id}, {region})")
            key = (image_id, region)
            if key in feats.vectors:
                raise FormatError(f"{where}: duplicate record ({image_id}, {region})")
            feats.vectors[key] = vec
    if header is None:
        raise FormatError(f"{path}: missing '{EXTERNAL_MAGIC}' header")
    return feats


def save_external_features(path, feats: ExternalFeatures) -> None:
    lines = [f"{EXTERNAL_MAGIC} {feats.dimension} {feats.name}"]
    for (image_id, region), vec in sorted(feats.vectors.items()):
        lines.append(f"{image_id}\t{region}\t" + ",".join(repr(float(v)) for v in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayoutEntry:
    region: int
    extractor: str
    length: int


@dataclass(frozen=True)
class Layout:
    entries: tuple[LayoutEntry, ...]

    def __post_init__(self):
        keys = [(e.region, e.extractor) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise LayoutMismatch("layout lists a (region, extractor) pair twice")

    @property
    def offsets(self) -> list[int]:
        return np.concatenate([[0], np.cumsum([e.length for e in self.entries])[:-1]]).astype(int).tolist()

    @property
    def total(self) -> int:
        return int(sum(e.length for e in self.entries))

    def table(self) -> list[tuple[int, str, int, int]]:
        return [(e.region, e.extractor, o, e.length) for e, o in zip(self.entries, self.offsets)]

    def to_json(self) -> list:
        return [[e.region, e.extractor, e.length] for e in self.entries]

    @classmethod
    def from_json(cls, rows) -> "Layout":
        return cls(tuple(LayoutEntry(int(r), str(x), int(n)) for r, x, n in rows))

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json()).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class FeatureBlock:
    region_index: int
    extractor_name: str
    values: np.ndarray
    present: bool = True


@dataclass(frozen=True, eq=False)
class CombinedFeature:
    blocks: tuple[FeatureBlock, ...]
    layout: Layout
    vector: np.ndarray


def _l2(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else np.zeros_like(v)


def assemble(blocks: Iterable[FeatureBlock] | Mapping, layout: Layout) -> CombinedFeature:
    """Concatenate per-region blocks in layout order, each L2-normalized.

    ``blocks`` may arrive in any order; a mapping from ``(region, extractor)``
    to a vector (or ``None`` for an absent block) is also accepted.
    """
    if isinstance(blocks, Mapping):
        blocks = [
            FeatureBlock(r, x, np.zeros(0) if v is None else np.asarray(v, float), v is not None)
            for (r, x), v in blocks.items()
        ]
    by_key = {}
    for b in blocks:
        key = (b.region_index, b.extractor_name)
        if key in by_key:
            raise LayoutMismatch(f"block {key} supplied twice")
        by_key[key] = b
    expected = {(e.region, e.extractor) for e in layout.entries}
    if set(by_key) != expected:
        extra = sorted(set(by_key) - expected, key=str)
        missing = sorted(expected - set(by_key), key=str)
        raise LayoutMismatch(f"blocks do not match layout (missing {missing[:5]}, unexpected {extra[:5]})")
    out = np.zeros(layout.total)
    ordered = []
    for e, off in zip(layout.entries, layout.offsets):
        b = by_key[(e.region, e.extractor)]
        if b.present:
            v = np.asarray(b.values, dtype=float).reshape(-1)
            if v.size != e.length:
                raise LayoutMismatch(
                    f"block ({e.region}, {e.extractor}) has length {v.size}, layout says {e.length}"
                )
            v = _l2(v)
            out[off : off + e.length] = v
            ordered.append(FeatureBlock(e.region, e.extractor, v, bool(np.any(v))))
        else:
            ordered.append(FeatureBlock(e.region, e.extractor, np.zeros(e.length), False))
    return CombinedFeature(tuple(ordered), layout, out)
