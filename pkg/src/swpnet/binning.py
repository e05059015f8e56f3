"""Binned-classification encoding of bounding boxes and the crop/resize
geometry used by the two-stage localise-then-classify flow.

Boxes are (centre x, centre y, width, height) in pixels, x rightward and y
downward from the top-left corner.  A bin b covers the half-open interval
[b*size, (b+1)*size); values at or beyond the covered range clamp into the
last bin, and a prediction decodes to its bin midpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BinSpec:
    n_bins: int
    bin_size: float = 7.0

    def __post_init__(self):
        if self.n_bins < 1 or self.bin_size <= 0:
            raise ValueError(f"invalid bin spec {self}")

    @property
    def covered_range(self) -> float:
        return self.n_bins * self.bin_size


# 25 bins of 7 px cover locations 0..175; 40 bins of 7 px cover sizes 0..280.
LOCATION_BINS = BinSpec(25, 7.0)
SIZE_BINS = BinSpec(40, 7.0)


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name, v in (("cx", self.cx), ("cy", self.cy), ("w", self.w), ("h", self.h)):
            if not math.isfinite(v):
                raise ValueError(f"box {name} is not finite")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")


@dataclass(frozen=True)
class LocTarget:
    bx: int
    by: int
    bw: int
    bh: int


def encode_value(v: float, spec: BinSpec) -> int:
    v = float(v)
    if not math.isfinite(v) or v < 0:
        raise ValueError(f"cannot encode value {v}")
    return min(int(v // spec.bin_size), spec.n_bins - 1)


def decode_bin(b: int, spec: BinSpec) -> float:
    if not 0 <= b < spec.n_bins:
        raise ValueError(f"bin {b} outside [0, {spec.n_bins})")
    return b * spec.bin_size + spec.bin_size / 2.0


def encode_box(box: BoundingBox, loc_spec: BinSpec = LOCATION_BINS,
               size_spec: BinSpec = SIZE_BINS) -> LocTarget:
    return LocTarget(encode_value(box.cx, loc_spec), encode_value(box.cy, loc_spec),
                     encode_value(box.w, size_spec), encode_value(box.h, size_spec))


def decode_box(target: LocTarget, loc_spec: BinSpec = LOCATION_BINS,
               size_spec: BinSpec = SIZE_BINS) -> BoundingBox:
    return BoundingBox(decode_bin(target.bx, loc_spec), decode_bin(target.by, loc_spec),
                       decode_bin(target.bw, size_spec), decode_bin(target.bh, size_spec))


def enlarge_box(box: BoundingBox, factor: float = 1.10) -> BoundingBox:
    """Scale width and height about the unchanged centre."""
    if factor < 1.0:
        raise ValueError(f"enlargement factor must be >= 1, got {factor}")
    return BoundingBox(box.cx, box.cy, box.w * factor, box.h * factor)


def crop_to_box(image: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Crop the pixel rectangle under the box, rounded outward to whole
    pixels and intersected with the image bounds."""
    if image.size == 0:
        raise ValueError("empty image")
    h, w = image.shape[:2]
    x0 = max(0, math.floor(box.cx - box.w / 2.0))
    x1 = min(w, math.ceil(box.cx + box.w / 2.0))
    y0 = max(0, math.floor(box.cy - box.h / 2.0))
    y1 = min(h, math.ceil(box.cy + box.h / 2.0))
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"box {box} does not intersect a {w}x{h} image")
    return np.ascontiguousarray(image[y0:y1, x0:x1])


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resample; uint8 input comes back rounded to uint8."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bad output size {out_h}x{out_w}")
    h, w = image.shape[:2]
    src = image.astype(np.float32)
    if src.ndim == 2:
        src = src[:, :, None]

    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[:, None, None]
    wx = (xs - x0).astype(np.float32)[None, :, None]

    rows = src[y0] * (1 - wy) + src[y1] * wy
    out = rows[:, x0] * (1 - wx) + rows[:, x1] * wx
    if image.ndim == 2:
        out = out[:, :, 0]
    if image.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(image.dtype)


def largest_side_scale(image: np.ndarray, target: int) -> float:
    return target / max(image.shape[0], image.shape[1])


def resize_largest_side(image: np.ndarray, target: int = 224) -> np.ndarray:
    """Aspect-preserving resize so the largest side equals `target`, then
    zero-pad (bottom/right) to a target x target square."""
    if image.size == 0:
        raise ValueError("empty image")
    h, w = image.shape[:2]
    if h >= w:
        new_h, new_w = target, max(1, round(w * target / h))
    else:
        new_h, new_w = max(1, round(h * target / w)), target
    resized = bilinear_resize(image, new_h, new_w)
    if (new_h, new_w) == (target, target):
        return resized
    pad_shape = (target, target) + image.shape[2:]
    out = np.zeros(pad_shape, dtype=image.dtype)
    out[:new_h, :new_w] = resized
    return out
