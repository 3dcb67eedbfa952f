"""Glue from keypoints and images to assembled feature vectors.

Region index 0 is the whole image; prototype ``p`` (0-based) is region
``p + 1``.  A prototype whose warp cannot be fit on an image contributes an
all-zero block, so every image yields a vector of the same length.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import Dataset
from .errors import DegenerateConfiguration, FormatError, InsufficientPoints
from .features import CombinedFeature, ExternalFeatures, Layout, LayoutEntry, assemble
from .geometry import KeypointSet
from .imaging import DEFAULT_FILL, ImageRaster, RegionCrop, extract_prototype_region, whole_image_region
from .prototypes import Prototype

log = logging.getLogger(__name__)

WHOLE_IMAGE = 0


@dataclass(frozen=True)
class RegionPlan:
    prototypes: tuple[Prototype, ...]
    region_extractors: tuple = ()
    whole_extractors: tuple = ()
    externals: tuple[ExternalFeatures, ...] = ()
    whole_size: int = 64
    channels: int = 1
    fill: float = DEFAULT_FILL
    _layout: Layout = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "prototypes", tuple(self.prototypes))
        entries = [
            LayoutEntry(WHOLE_IMAGE, ex.name, ex.dimension(self.whole_size, self.channels))
            for ex in self.whole_extractors
        ]
        for p, proto in enumerate(self.prototypes):
            size = int(round(proto.canonical_size))
            entries += [LayoutEntry(p + 1, ex.name, ex.dimension(size, self.channels)) for ex in self.region_extractors]
        for ext in self.externals:
            entries += [LayoutEntry(r, ext.name, ext.dimension) for r in range(len(self.prototypes) + 1)]
        object.__setattr__(self, "_layout", Layout(tuple(entries)))

    @property
    def layout(self) -> Layout:
        return self._layout

    def crops(self, img: ImageRaster, kp: KeypointSet) -> list[RegionCrop | None]:
        """Whole-image crop followed by one crop per prototype (None if unfittable)."""
        out: list[RegionCrop | None] = [whole_image_region(img, self.whole_size, self.fill)]
        for proto in self.prototypes:
            try:
                out.append(extract_prototype_region(img, kp, proto, self.fill))
            except (InsufficientPoints, DegenerateConfiguration):
                out.append(None)
        return out

    def blocks(self, image_id: str, img: ImageRaster, kp: KeypointSet) -> dict:
        crops = self.crops(_match_channels(img, self.channels), kp)
        blocks = {}
        for ex in self.whole_extractors:
            blocks[(WHOLE_IMAGE, ex.name)] = ex.extract(crops[0])
        for p in range(len(self.prototypes)):
            crop = crops[p + 1]
            for ex in self.region_extractors:
                blocks[(p + 1, ex.name)] = None if crop is None else ex.extract(crop)
        for ext in self.externals:
            for r, crop in enumerate(crops):
                if crop is None:
                    blocks[(r, ext.name)] = None
                    continue
                vec = ext.get(image_id, r)
                if vec is None:
                    raise FormatError(f"external features {ext.name!r} lack image {image_id} region {r}")
                blocks[(r, ext.name)] = vec
        return blocks

    def features(self, image_id: str, img: ImageRaster, kp: KeypointSet) -> CombinedFeature:
        return assemble(self.blocks(image_id, img, kp), self.layout)


def _match_channels(img: ImageRaster, channels: int) -> ImageRaster:
    if img.channels == channels:
        return img
    if channels == 1:
        return ImageRaster(img.gray())
    return ImageRaster(np.repeat(img.data, 3, axis=2))


def dataset_features(
    plan: RegionPlan,
    data: Dataset,
    images: Mapping[str, ImageRaster] | Callable[[str], ImageRaster],
    workers: int = 1,
) -> list[CombinedFeature]:
    """Assembled features for every image of ``data``, in dataset order."""
    get = images.__getitem__ if isinstance(images, Mapping) else images

    def one(i: int) -> CombinedFeature:
        rec = data.images[i]
        return plan.features(rec.id, get(rec.id), data.keypoints[i])

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, range(len(data))))


def feature_matrix(feats: Sequence[CombinedFeature]) -> np.ndarray:
    return np.vstack([f.vector for f in feats]) if feats else np.zeros((0, 0))
