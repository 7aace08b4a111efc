"""Thresholding, connected components and bounding-box crops of heatmaps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass
class ActivationComponent:
    pixels: np.ndarray  # (area, 2) row/col, raster order
    bbox: tuple  # (row_min, col_min, row_max, col_max), inclusive

    @property
    def area(self):
        return len(self.pixels)

    @property
    def height(self):
        return self.bbox[2] - self.bbox[0] + 1

    @property
    def width(self):
        return self.bbox[3] - self.bbox[1] + 1


@dataclass
class CropRecord:
    code: int
    episode: int
    step: int
    bbox: tuple
    image: np.ndarray  # h x w x 3
    mask: np.ndarray  # h x w ground-truth ids
    descriptor: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.image.shape[:2]


def threshold_mask(heatmap, act_threshold=0.5):
    values = getattr(heatmap, "values", heatmap)
    values = np.asarray(values, dtype=np.float64)
    if not np.any(values > 0):
        return np.zeros(values.shape, dtype=bool)
    return values >= act_threshold


def connected_components(mask, connectivity=8):
    """Maximal connected sets of on-pixels, ordered by (row_min, col_min)."""
    if connectivity not in _STRUCTURES:
        raise ConfigurationError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if count == 0:
        return []
    comps = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        rows, cols = np.nonzero(labels[sl] == lab)
        pixels = np.stack([rows + sl[0].start, cols + sl[1].start], axis=1)
        bbox = (sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1)
        comps.append(ActivationComponent(pixels, bbox))
    comps.sort(key=lambda c: (c.bbox[0], c.bbox[1], tuple(c.pixels[0])))
    return comps


def filter_by_area(components, area_threshold=9):
    return [c for c in components if c.area >= area_threshold]


def crop(observation, component, code=-1, episode=-1, step=-1):
    """Pixel-exact sub-image and sub-mask under the component's bounding box."""
    bbox = component.bbox if isinstance(component, ActivationComponent) else tuple(component)
    r0, c0, r1, c1 = bbox
    frame, mask = observation.frame, observation.mask
    h, w = mask.shape
    if not (0 <= r0 <= r1 < h and 0 <= c0 <= c1 < w):
        raise ConfigurationError(f"bounding box {bbox} outside {h}x{w} observation")
    return CropRecord(int(code), int(episode), int(step), (int(r0), int(c0), int(r1), int(c1)),
                      frame[r0:r1 + 1, c0:c1 + 1], mask[r0:r1 + 1, c0:c1 + 1])


def extract_regions(heatmap, act_threshold=0.5, area_threshold=9, connectivity=8):
    """threshold -> components -> area filter, in one call."""
    return filter_by_area(connected_components(threshold_mask(heatmap, act_threshold), connectivity), area_threshold)
