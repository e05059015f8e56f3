"""Deterministic synthetic dataset of vehicle-like glyphs with exact
bounding boxes, manifest I/O, train/eval pre-processing, and bin-occupancy
histograms.

A glyph is a side-view silhouette: a body slab, a cabin block whose
horizontal position varies by class, and two wheels.  Classes are points on
a parameter grid whose axes are spaced by a similarity margin, so any two
classes differ in at least one parameter by that margin.
"""

from __future__ import annotations

import hashlib
import itertools
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binning import BinSpec, BoundingBox, bilinear_resize, encode_value
from .imgio import read_ppm, write_ppm


class DataSynthError(ValueError):
    pass


# -- class specs --------------------------------------------------------------

_ASPECT_RANGE = (1.6, 3.0)        # body width / glyph height
_CABIN_RANGE = (0.05, 0.5)        # cabin offset as fraction of free span
_WHEEL_RANGE = (0.10, 0.24)       # wheel radius as fraction of glyph height
_HUE_RANGE = (0.0, 1.0)           # position on a fixed colour wheel


@dataclass(frozen=True)
class GlyphClassSpec:
    class_id: int
    body_aspect: float
    cabin_offset: float
    wheel_radius: float
    body_rgb: tuple[int, int, int]
    cabin_rgb: tuple[int, int, int]


def _levels(lo: float, hi: float, margin: float, periodic: bool = False) -> list[float]:
    n = max(2, int(1.0 / margin) + 1)
    return list(np.linspace(lo, hi, n, endpoint=not periodic))


def _hue_rgb(h: float, value: float) -> tuple[int, int, int]:
    # crude saturated colour wheel; enough to make classes chromatic
    r = 0.5 + 0.5 * math.cos(2 * math.pi * h)
    g = 0.5 + 0.5 * math.cos(2 * math.pi * (h - 1 / 3))
    b = 0.5 + 0.5 * math.cos(2 * math.pi * (h - 2 / 3))
    return tuple(int(round(value * c)) for c in (r, g, b))


def make_class_specs(n_classes: int, similarity_margin: float = 0.25) -> list[GlyphClassSpec]:
    """First n_classes points of a deterministic grid over the glyph
    parameters; axis levels are spaced at least `similarity_margin` apart
    in normalised units."""
    if n_classes < 2:
        raise DataSynthError("a classification task needs at least 2 classes")
    if not 0 < similarity_margin <= 1:
        raise DataSynthError(f"similarity margin must lie in (0, 1], got {similarity_margin}")
    # last axis varies fastest: hue first, geometry later
    axes = [
        _levels(*_ASPECT_RANGE, similarity_margin),
        _levels(*_WHEEL_RANGE, similarity_margin),
        _levels(*_CABIN_RANGE, similarity_margin),
        _levels(*_HUE_RANGE, similarity_margin, periodic=True),
    ]
    combos = itertools.product(*axes)
    specs = []
    for class_id, (aspect, wheel, cabin, hue) in enumerate(itertools.islice(combos, n_classes)):
        specs.append(GlyphClassSpec(
            class_id=class_id,
            body_aspect=aspect,
            cabin_offset=cabin,
            wheel_radius=wheel,
            body_rgb=_hue_rgb(hue, 150.0),
            cabin_rgb=_hue_rgb(hue + 0.17, 95.0),
        ))
    if len(specs) < n_classes:
        raise DataSynthError(f"margin {similarity_margin} only yields "
                             f"{len(specs)} distinguishable classes")
    return specs


# -- rendering ----------------------------------------------------------------

_WHEEL_RGB = (28, 28, 34)


def render_glyph(canvas: np.ndarray, spec: GlyphClassSpec, cx: float, cy: float,
                 height: float) -> tuple[BoundingBox, np.ndarray]:
    """Paint one glyph onto the canvas in place; returns the exact pixel
    bounding box and the boolean glyph mask."""
    h_img, w_img = canvas.shape[:2]
    gh = height
    gw = gh * spec.body_aspect
    x0, y0 = cx - gw / 2.0, cy - gh / 2.0
    ys, xs = np.mgrid[0:h_img, 0:w_img]
    mask = np.zeros((h_img, w_img), dtype=bool)

    def rect(rx0, ry0, rx1, ry1):
        return (xs >= rx0) & (xs < rx1) & (ys >= ry0) & (ys < ry1)

    # body slab across the full glyph width
    body = rect(x0, y0 + 0.34 * gh, x0 + gw, y0 + 0.80 * gh)
    # cabin block on top, shifted by the class's offset fraction
    cab_w = 0.42 * gw
    cab_x = x0 + spec.cabin_offset * (gw - cab_w)
    cabin = rect(cab_x, y0, cab_x + cab_w, y0 + 0.36 * gh)
    # wheels tangent to the glyph bottom
    r = spec.wheel_radius * gh
    wy = y0 + gh - r
    wheels = np.zeros_like(mask)
    for wx in (x0 + 0.22 * gw, x0 + 0.78 * gw):
        wheels |= (xs - wx) ** 2 + (ys - wy) ** 2 <= r * r

    for part, rgb in ((body, spec.body_rgb), (cabin, spec.cabin_rgb), (wheels, _WHEEL_RGB)):
        canvas[part] = rgb
        mask |= part

    if not mask.any():
        raise DataSynthError("glyph fell entirely outside the canvas")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    py0, py1 = int(rows[0]), int(rows[-1]) + 1
    px0, px1 = int(cols[0]), int(cols[-1]) + 1
    box = BoundingBox((px0 + px1) / 2.0, (py0 + py1) / 2.0, float(px1 - px0), float(py1 - py0))
    return box, mask


def _paint_background(canvas: np.ndarray, rng: np.random.Generator, clutter: int) -> None:
    h, w = canvas.shape[:2]
    base = int(rng.integers(168, 212))
    noise = rng.integers(-6, 7, size=(h, w, 1), dtype=np.int16)
    canvas[:] = np.clip(base + noise, 0, 255).astype(np.uint8)
    for _ in range(clutter):
        shade = int(rng.integers(120, 160))
        cw = int(rng.integers(max(2, w // 10), max(3, w // 3)))
        ch = int(rng.integers(max(2, h // 10), max(3, h // 3)))
        x = int(rng.integers(0, max(1, w - cw)))
        y = int(rng.integers(0, max(1, h - ch)))
        canvas[y:y + ch, x:x + cw] = (shade, shade, shade + 6)


@dataclass
class Sample:
    image: np.ndarray
    class_id: int
    box: BoundingBox
    glyph_mask: np.ndarray


def synthesize(n_classes: int, per_class: int, canvas: int, similarity_margin: float = 0.25,
               seed: int = 0, scale_range: tuple[float, float] = (0.45, 0.70),
               center_jitter: float = 0.10, clutter: int = 3) -> list[Sample]:
    """Render the full sample list in memory, reproducibly from the seed.

    Glyph width is drawn from scale_range (fractions of the canvas side) and
    the centre is jittered by up to center_jitter * canvas in each axis.
    """
    if per_class < 1:
        raise DataSynthError("per_class must be at least 1")
    if not 0 < scale_range[0] <= scale_range[1] <= 0.92:
        raise DataSynthError(f"scale range must lie in (0, 0.92], got {scale_range}")
    specs = make_class_specs(n_classes, similarity_margin)
    max_aspect = max(s.body_aspect for s in specs)
    if scale_range[0] * canvas / max_aspect < 10:
        raise DataSynthError(f"canvas {canvas} too small: min-scale glyph height "
                             f"{scale_range[0] * canvas / max_aspect:.1f} px is unrenderable")

    streams = np.random.SeedSequence(seed).spawn(n_classes * per_class)
    samples = []
    for idx, stream in enumerate(streams):
        spec = specs[idx // per_class]
        rng = np.random.default_rng(stream)
        image = np.zeros((canvas, canvas, 3), dtype=np.uint8)
        _paint_background(image, rng, clutter)
        gw = rng.uniform(*scale_range) * canvas
        gh = gw / spec.body_aspect
        jit = center_jitter * canvas
        lo_x, hi_x = gw / 2.0 + 1, canvas - gw / 2.0 - 1
        lo_y, hi_y = gh / 2.0 + 1, canvas - gh / 2.0 - 1
        cx = float(np.clip(canvas / 2.0 + rng.uniform(-jit, jit), lo_x, hi_x))
        cy = float(np.clip(canvas / 2.0 + rng.uniform(-jit, jit), lo_y, hi_y))
        box, mask = render_glyph(image, spec, cx, cy, gh)
        samples.append(Sample(image, spec.class_id, box, mask))
    return samples


# -- manifests ----------------------------------------------------------------

@dataclass
class ManifestRecord:
    path: str
    class_id: int
    box: BoundingBox


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    n_classes: int
    split: str
    id_mapping: dict[int, int] | None = None

    def __len__(self) -> int:
        return len(self.records)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = [f"classes={manifest.n_classes} split={manifest.split}"]
    for rec in manifest.records:
        rel = os.path.relpath(rec.path, path.parent)
        b = rec.box
        lines.append(f"{rel},{rec.class_id},{b.cx!r},{b.cy!r},{b.w!r},{b.h!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataSynthError(f"empty manifest {path}")
    header = dict(tok.split("=", 1) for tok in lines[0].split())
    records = []
    for line in lines[1:]:
        if not line.strip():
            continue
        rel, cid, cx, cy, w, h = line.split(",")
        img_path = (path.parent / rel).resolve()
        if not img_path.exists():
            raise DataSynthError(f"manifest references missing image {img_path}")
        records.append(ManifestRecord(str(img_path), int(cid),
                                      BoundingBox(float(cx), float(cy), float(w), float(h))))
    n_classes = int(header["classes"])
    ids = {r.class_id for r in records}
    if ids and (min(ids) < 0 or max(ids) >= n_classes):
        raise DataSynthError(f"class ids {sorted(ids)} not dense in [0, {n_classes})")
    return DatasetManifest(records, n_classes, header.get("split", "train"))


def generate_dataset(n_classes: int, per_class: int, canvas: int, out_dir,
                     similarity_margin: float = 0.25, seed: int = 0, split: str = "train",
                     scale_range: tuple[float, float] = (0.45, 0.70),
                     center_jitter: float = 0.10, clutter: int = 3) -> DatasetManifest:
    """Render, write PPM images plus a manifest file, and return the manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    samples = synthesize(n_classes, per_class, canvas, similarity_margin, seed,
                         scale_range, center_jitter, clutter)
    records = []
    for idx, sample in enumerate(samples):
        name = f"{split}_{idx:05d}_c{sample.class_id}.ppm"
        img_path = out_dir / "images" / name
        write_ppm(img_path, sample.image)
        records.append(ManifestRecord(str(img_path.resolve()), sample.class_id, sample.box))
    manifest = DatasetManifest(records, n_classes, split)
    save_manifest(manifest, out_dir / f"{split}.txt")
    return manifest


def manifest_path(out_dir, split: str) -> Path:
    return Path(out_dir) / f"{split}.txt"


def subset_classes(manifest: DatasetManifest, class_ids) -> DatasetManifest:
    """Filter to the given classes and re-densify ids; the old-to-new mapping
    rides along on the returned manifest."""
    wanted = sorted(set(int(c) for c in class_ids))
    if not wanted:
        raise DataSynthError("empty class selection")
    known = {r.class_id for r in manifest.records}
    missing = [c for c in wanted if c not in known]
    if missing:
        raise DataSynthError(f"classes {missing} not present in manifest")
    mapping = {old: new for new, old in enumerate(wanted)}
    records = [ManifestRecord(r.path, mapping[r.class_id], r.box)
               for r in manifest.records if r.class_id in mapping]
    return DatasetManifest(records, len(wanted), manifest.split, id_mapping=mapping)


# -- pre-processing -----------------------------------------------------------

@dataclass(frozen=True)
class PreprocessConfig:
    """Train-time random rescale + crop, and eval-time centre crop.

    The rescale range is a declared default; crop_size must fit inside the
    smallest rescaled image and eval_scale must be at least crop_size.
    """

    crop_size: int = 224
    eval_scale: int = 256
    scale_range: tuple[float, float] = (0.8, 1.3)
    seed: int = 0

    def __post_init__(self):
        if self.crop_size < 8:
            raise DataSynthError(f"crop size {self.crop_size} too small")
        if self.eval_scale < self.crop_size:
            raise DataSynthError(f"eval scale {self.eval_scale} below crop size {self.crop_size}")
        if not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise DataSynthError(f"bad scale range {self.scale_range}")


def transform_box(box: BoundingBox, sx: float, sy: float, ox: float, oy: float) -> BoundingBox:
    """Scale then translate a box: output pixels = input * s - offset."""
    return BoundingBox(box.cx * sx - ox, box.cy * sy - oy, box.w * sx, box.h * sy)


def clip_box(box: BoundingBox, width: int, height: int, min_side: float = 2.0) -> BoundingBox | None:
    """Intersect the box with [0, width) x [0, height); None when degenerate."""
    x0 = max(0.0, box.cx - box.w / 2.0)
    x1 = min(float(width), box.cx + box.w / 2.0)
    y0 = max(0.0, box.cy - box.h / 2.0)
    y1 = min(float(height), box.cy + box.h / 2.0)
    if x1 - x0 < min_side or y1 - y0 < min_side:
        return None
    return BoundingBox((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)


_CROP_RETRIES = 8


def preprocess_train(image: np.ndarray, box: BoundingBox, config: PreprocessConfig,
                     rng: np.random.Generator) -> tuple[np.ndarray, BoundingBox]:
    """Random rescale then random crop; the box rides the same transform and
    is clipped to the crop.  Crops that lose the glyph are resampled a bounded
    number of times, then the crop window is re-centred on the glyph."""
    h, w = image.shape[:2]
    crop = config.crop_size
    factor = rng.uniform(*config.scale_range)
    new_h, new_w = round(h * factor), round(w * factor)
    if new_h < crop or new_w < crop:
        raise DataSynthError(f"rescaled image {new_w}x{new_h} smaller than crop {crop}")
    resized = bilinear_resize(image, new_h, new_w)
    sx, sy = new_w / w, new_h / h
    scaled_box = transform_box(box, sx, sy, 0.0, 0.0)

    for _ in range(_CROP_RETRIES):
        ox = int(rng.integers(0, new_w - crop + 1))
        oy = int(rng.integers(0, new_h - crop + 1))
        shifted = transform_box(scaled_box, 1.0, 1.0, ox, oy)
        clipped = clip_box(shifted, crop, crop)
        if clipped is not None:
            return np.ascontiguousarray(resized[oy:oy + crop, ox:ox + crop]), clipped

    ox = int(np.clip(round(scaled_box.cx - crop / 2.0), 0, new_w - crop))
    oy = int(np.clip(round(scaled_box.cy - crop / 2.0), 0, new_h - crop))
    shifted = transform_box(scaled_box, 1.0, 1.0, ox, oy)
    clipped = clip_box(shifted, crop, crop)
    if clipped is None:
        raise DataSynthError("glyph unrecoverable after crop resampling")
    return np.ascontiguousarray(resized[oy:oy + crop, ox:ox + crop]), clipped


def center_crop_transform(image: np.ndarray, config: PreprocessConfig
                          ) -> tuple[np.ndarray, float, float, float, float]:
    """Resize the shortest side to eval_scale, take the central crop, and
    return (crop, sx, sy, ox, oy) so boxes can ride or invert the transform."""
    h, w = image.shape[:2]
    if h <= w:
        new_h, new_w = config.eval_scale, max(config.crop_size, round(w * config.eval_scale / h))
    else:
        new_h, new_w = max(config.crop_size, round(h * config.eval_scale / w)), config.eval_scale
    resized = bilinear_resize(image, new_h, new_w)
    ox = (new_w - config.crop_size) // 2
    oy = (new_h - config.crop_size) // 2
    crop = np.ascontiguousarray(resized[oy:oy + config.crop_size, ox:ox + config.crop_size])
    return crop, new_w / w, new_h / h, float(ox), float(oy)


def preprocess_eval_center(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    return center_crop_transform(image, config)[0]


def to_network_input(images) -> np.ndarray:
    """Stack HWC uint8 rasters into a [B, 3, H, W] float32 batch in [0, 1]."""
    arr = np.stack([np.asarray(im) for im in images]) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2).astype(np.float32) / 255.0)


def load_image(record: ManifestRecord) -> np.ndarray:
    return read_ppm(record.path)


# -- histograms ---------------------------------------------------------------

def _record_rng(seed: int, path: str) -> np.random.Generator:
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def bin_histogram(manifest: DatasetManifest, loc_spec: BinSpec, size_spec: BinSpec,
                  preprocess: PreprocessConfig | None = None) -> dict[str, np.ndarray]:
    """Occupancy counts per bin for cx, cy (loc_spec) and w, h (size_spec),
    optionally after train pre-processing.  Per-record rng streams derive from
    the image path, so totals are invariant under manifest reordering."""
    counts = {
        "cx": np.zeros(loc_spec.n_bins, dtype=np.int64),
        "cy": np.zeros(loc_spec.n_bins, dtype=np.int64),
        "w": np.zeros(size_spec.n_bins, dtype=np.int64),
        "h": np.zeros(size_spec.n_bins, dtype=np.int64),
    }
    for rec in manifest.records:
        box = rec.box
        if preprocess is not None:
            rng = _record_rng(preprocess.seed, rec.path)
            _, box = preprocess_train(load_image(rec), rec.box, preprocess, rng)
        counts["cx"][encode_value(box.cx, loc_spec)] += 1
        counts["cy"][encode_value(box.cy, loc_spec)] += 1
        counts["w"][encode_value(box.w, size_spec)] += 1
        counts["h"][encode_value(box.h, size_spec)] += 1
    return counts


def save_histograms(counts: dict[str, np.ndarray], prefix) -> list[Path]:
    """One CSV per output, rows of bin,count."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for key in ("cx", "cy", "w", "h"):
        p = prefix.parent / f"{prefix.name}_{key}.csv"
        lines = ["bin,count"] + [f"{i},{int(c)}" for i, c in enumerate(counts[key])]
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths.append(p)
    return paths


# -- derived datasets ---------------------------------------------------------

def crop_dataset_to_boxes(manifest: DatasetManifest, out_dir, target_size: int,
                          enlarge_factor: float = 1.10, split: str | None = None,
                          quantize_boxes: bool = False) -> DatasetManifest:
    """Write a derived dataset of per-record box crops (enlarged, cropped,
    resized largest-side-to-target) for training the second-stage classifier.

    quantize_boxes routes each box through the bin codec first, so the crop
    framing matches what decoded predictions produce at inference time.
    """
    from .binning import crop_to_box, decode_box, encode_box, enlarge_box, resize_largest_side

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    split = split or f"{manifest.split}_boxcrop"
    records = []
    for idx, rec in enumerate(manifest.records):
        box = decode_box(encode_box(rec.box)) if quantize_boxes else rec.box
        crop = crop_to_box(load_image(rec), enlarge_box(box, enlarge_factor))
        image = resize_largest_side(crop, target_size)
        name = f"{split}_{idx:05d}_c{rec.class_id}.ppm"
        img_path = out_dir / "images" / name
        write_ppm(img_path, image)
        full = BoundingBox(target_size / 2.0, target_size / 2.0, float(target_size), float(target_size))
        records.append(ManifestRecord(str(img_path.resolve()), rec.class_id, full))
    derived = DatasetManifest(records, manifest.n_classes, split)
    save_manifest(derived, out_dir / f"{split}.txt")
    return derived
