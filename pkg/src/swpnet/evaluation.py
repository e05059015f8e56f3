"""Evaluation surface: top-k metrics, per-output localisation accuracy with
bin-distance statistics, the two-stage localise-then-classify pipeline, and
the inference throughput benchmark."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, numerics_checks
from .binning import (
    LOCATION_BINS,
    SIZE_BINS,
    BinSpec,
    BoundingBox,
    LocTarget,
    crop_to_box,
    decode_box,
    encode_box,
    enlarge_box,
    resize_largest_side,
)
from .datasynth import (
    DatasetManifest,
    PreprocessConfig,
    center_crop_transform,
    load_image,
    to_network_input,
)
from .models import Model, ModelBuildError

log = logging.getLogger(__name__)


def default_eval_config(input_size: int) -> PreprocessConfig:
    """Centre-crop config scaled from the 256-to-224 eval ratio."""
    return PreprocessConfig(crop_size=input_size, eval_scale=max(input_size, round(input_size * 256 / 224)),
                            scale_range=(1.0, 1.0), seed=0)


@dataclass
class MetricsReport:
    sample_count: int
    top1: float | None = None
    top5: float | None = None
    per_output_accuracy: tuple[float, float, float, float] | None = None
    mean_accuracy: float | None = None

    def summary(self) -> str:
        lines = [f"samples: {self.sample_count}"]
        if self.top1 is not None:
            lines.append(f"top-1: {self.top1:.3f}%")
        if self.top5 is not None:
            lines.append(f"top-5: {self.top5:.3f}%")
        if self.per_output_accuracy is not None:
            cx, cy, w, h = self.per_output_accuracy
            lines.append(f"centre-x: {cx:.3f}%  centre-y: {cy:.3f}%  width: {w:.3f}%  height: {h:.3f}%")
            lines.append(f"mean: {self.mean_accuracy:.3f}%")
        return "\n".join(lines)


LOC_OUTPUT_NAMES = ("cx", "cy", "w", "h")


@dataclass
class BinErrorStats:
    """Distribution of |predicted bin - true bin| per output."""

    counts: dict[str, np.ndarray]

    def fraction_at(self, output: str, distance: int) -> float:
        c = self.counts[output]
        total = c.sum()
        return float(c[distance] / total) if distance < len(c) and total else 0.0

    def fraction_at_least(self, output: str, distance: int) -> float:
        c = self.counts[output]
        total = c.sum()
        return float(c[distance:].sum() / total) if total else 0.0

    def summary(self) -> str:
        lines = []
        for name in LOC_OUTPUT_NAMES:
            lines.append(f"{name}: dist0 {self.fraction_at(name, 0):.3f}  "
                         f"dist1 {self.fraction_at(name, 1):.3f}  "
                         f"dist>=3 {self.fraction_at_least(name, 3):.3f}")
        return "\n".join(lines)


def mean_output_accuracy(per_output) -> float:
    values = tuple(float(v) for v in per_output)
    if len(values) != 4:
        raise ValueError("expected four per-output accuracies")
    return float(np.mean(values))


def loc_metrics(per_output, sample_count: int) -> MetricsReport:
    per_output = tuple(float(v) for v in per_output)
    return MetricsReport(sample_count=sample_count, per_output_accuracy=per_output,
                         mean_accuracy=mean_output_accuracy(per_output))


# -- top-k --------------------------------------------------------------------

def topk_predictions(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest logits per row; ties break to the lower
    class id via a stable sort."""
    order = np.argsort(-logits, axis=1, kind="stable")
    return order[:, :k]


def topk_hits(logits: np.ndarray, targets: np.ndarray, k: int) -> int:
    preds = topk_predictions(logits, k)
    return int((preds == np.asarray(targets).reshape(-1, 1)).any(axis=1).sum())


def _forward_batched(model: Model, rasters: list[np.ndarray], batch_size: int) -> np.ndarray:
    rows = []
    for start in range(0, len(rasters), batch_size):
        batch = Tensor(to_network_input(rasters[start:start + batch_size]))
        rows.append(model.forward(batch, train=False).data)
    return np.concatenate(rows, axis=0)


def evaluate_topk(target, manifest: DatasetManifest, ks=(1, 5),
                  eval_config: PreprocessConfig | None = None,
                  batch_size: int = 32) -> MetricsReport:
    """Top-k accuracy of a classification model (central-crop preprocessing)
    or a TwoStagePipeline (its own preprocessing)."""
    labels = np.array([r.class_id for r in manifest.records], dtype=np.int64)
    if isinstance(target, TwoStagePipeline):
        logits = target.predict_manifest(manifest, batch_size=batch_size)
    else:
        cfg = eval_config or default_eval_config(target.config.input_size)
        rasters = [center_crop_transform(load_image(r), cfg)[0] for r in manifest.records]
        logits = _forward_batched(target, rasters, batch_size)
    report = MetricsReport(sample_count=len(labels))
    accs = {k: 100.0 * topk_hits(logits, labels, k) / len(labels) for k in ks}
    report.top1 = accs.get(1)
    report.top5 = accs.get(5)
    return report


# -- localisation evaluation ----------------------------------------------------

def evaluate_localisation(model: Model, manifest: DatasetManifest,
                          eval_config: PreprocessConfig | None = None,
                          preprocess: str = "center", batch_size: int = 32,
                          loc_spec: BinSpec = LOCATION_BINS,
                          size_spec: BinSpec = SIZE_BINS) -> tuple[MetricsReport, BinErrorStats]:
    """Per-output bin accuracy via argmax against encoded ground truth.

    preprocess='center' runs the eval centre crop and transforms boxes with
    it; preprocess='none' feeds the raw image resized largest-side-to-input
    (boxes scaled by the same factor).
    """
    if model.config.head != "loc_head":
        raise ModelBuildError("evaluate_localisation needs a loc_head model")
    if preprocess not in ("center", "none"):
        raise ValueError(f"preprocess must be 'center' or 'none', got {preprocess!r}")
    from .datasynth import clip_box, transform_box

    input_size = model.config.input_size
    cfg = eval_config or default_eval_config(input_size)
    rasters, boxes = [], []
    for rec in manifest.records:
        image = load_image(rec)
        if preprocess == "center":
            crop, sx, sy, ox, oy = center_crop_transform(image, cfg)
            box = transform_box(rec.box, sx, sy, ox, oy)
            box = clip_box(box, cfg.crop_size, cfg.crop_size) or box
        else:
            from .binning import largest_side_scale
            s = largest_side_scale(image, input_size)
            crop = resize_largest_side(image, input_size)
            box = transform_box(rec.box, s, s, 0.0, 0.0)
        rasters.append(crop)
        boxes.append(box)

    targets = np.array([[t.bx, t.by, t.bw, t.bh]
                        for t in (encode_box(b, loc_spec, size_spec) for b in boxes)], dtype=np.int64)
    preds = np.zeros_like(targets)
    row = 0
    for start in range(0, len(rasters), batch_size):
        batch = Tensor(to_network_input(rasters[start:start + batch_size]))
        outputs = model.forward(batch, train=False)
        n = outputs[0].shape[0]
        for col, out in enumerate(outputs):
            # stable argmax: ties break to the lower bin id
            preds[row:row + n, col] = topk_predictions(out.data, 1)[:, 0]
        row += n

    per_output = tuple(100.0 * float((preds[:, c] == targets[:, c]).mean()) for c in range(4))
    report = loc_metrics(per_output, len(rasters))
    max_bins = max(loc_spec.n_bins, size_spec.n_bins)
    counts = {}
    for col, name in enumerate(LOC_OUTPUT_NAMES):
        dist = np.abs(preds[:, col] - targets[:, col])
        counts[name] = np.bincount(dist, minlength=max_bins)
    return report, BinErrorStats(counts)


# -- two-stage pipeline ---------------------------------------------------------

@dataclass
class PipelineDetails:
    predicted_box: BoundingBox      # decoded, in localiser input coordinates
    image_box: BoundingBox          # mapped back onto the raw image
    enlarged_box: BoundingBox
    crop_shape: tuple
    used_fallback: bool


class TwoStagePipeline:
    """Localise then classify.

    With loc_model=None the pipeline runs in ground-truth-oracle mode: the
    manifest box is encoded and decoded through the bin codec in place of a
    network prediction, giving the pipeline's accuracy upper bound.
    """

    def __init__(self, loc_model: Model | None, cls_model: Model,
                 loc_eval_config: PreprocessConfig | None = None,
                 enlarge_factor: float = 1.10,
                 loc_spec: BinSpec = LOCATION_BINS, size_spec: BinSpec = SIZE_BINS):
        if loc_model is not None and loc_model.config.head != "loc_head":
            raise ModelBuildError("two-stage pipeline needs a loc_head localiser")
        if cls_model.config.head == "loc_head":
            raise ModelBuildError("two-stage pipeline needs a classification second stage")
        self.loc_model = loc_model
        self.cls_model = cls_model
        size = loc_model.config.input_size if loc_model is not None else cls_model.config.input_size
        self.loc_eval_config = loc_eval_config or default_eval_config(size)
        self.enlarge_factor = enlarge_factor
        self.loc_spec = loc_spec
        self.size_spec = size_spec

    def _stage_one(self, images: list[np.ndarray], gt_boxes) -> list[tuple]:
        """(LocTarget, sx, sy, ox, oy) per image."""
        if self.loc_model is None:
            if gt_boxes is None or any(b is None for b in gt_boxes):
                raise ValueError("oracle mode needs a ground-truth box per image")
            return [(encode_box(b, self.loc_spec, self.size_spec), 1.0, 1.0, 0.0, 0.0)
                    for b in gt_boxes]
        crops, transforms = [], []
        for image in images:
            crop, sx, sy, ox, oy = center_crop_transform(image, self.loc_eval_config)
            crops.append(crop)
            transforms.append((sx, sy, ox, oy))
        outputs = self.loc_model.forward(Tensor(to_network_input(crops)), train=False)
        bins = [topk_predictions(o.data, 1)[:, 0] for o in outputs]
        return [(LocTarget(int(bins[0][i]), int(bins[1][i]), int(bins[2][i]), int(bins[3][i])),
                 *transforms[i]) for i in range(len(images))]

    def _stage_two_crop(self, image: np.ndarray, stage_one: tuple
                        ) -> tuple[np.ndarray, PipelineDetails]:
        target, sx, sy, ox, oy = stage_one
        decoded = decode_box(target, self.loc_spec, self.size_spec)
        image_box = BoundingBox((decoded.cx + ox) / sx, (decoded.cy + oy) / sy,
                                decoded.w / sx, decoded.h / sy)
        grown = enlarge_box(image_box, self.enlarge_factor)
        used_fallback = False
        try:
            crop = crop_to_box(image, grown)
        except ValueError:
            log.warning("decoded box %s misses the image; falling back to a central crop", grown)
            used_fallback = True
            h, w = image.shape[:2]
            side = min(h, w)
            y0, x0 = (h - side) // 2, (w - side) // 2
            crop = image[y0:y0 + side, x0:x0 + side]
        resized = resize_largest_side(crop, self.cls_model.config.input_size)
        details = PipelineDetails(decoded, image_box, grown, crop.shape, used_fallback)
        return resized, details

    def predict_batch(self, images: list[np.ndarray], gt_boxes=None) -> np.ndarray:
        """Logit rows for a batch of raw images, batching both stages."""
        stage_one = self._stage_one(images, gt_boxes)
        crops = [self._stage_two_crop(img, s1)[0] for img, s1 in zip(images, stage_one)]
        batch = Tensor(to_network_input(crops))
        return self.cls_model.forward(batch, train=False).data

    def predict(self, image: np.ndarray, gt_box: BoundingBox | None = None,
                return_details: bool = False):
        """Class probability distribution for one raw image."""
        from .layers import softmax
        stage_one = self._stage_one([image], [gt_box] if gt_box is not None else None)
        resized, details = self._stage_two_crop(image, stage_one[0])
        logits = self.cls_model.forward(Tensor(to_network_input([resized])), train=False).data
        probs = softmax(logits)[0]
        return (probs, details) if return_details else probs

    def predict_manifest(self, manifest: DatasetManifest, batch_size: int = 32) -> np.ndarray:
        """Logit rows for every record; oracle mode reads manifest boxes."""
        rows = []
        for start in range(0, len(manifest.records), batch_size):
            chunk = manifest.records[start:start + batch_size]
            images = [load_image(r) for r in chunk]
            rows.append(self.predict_batch(images, gt_boxes=[r.box for r in chunk]))
        return np.concatenate(rows, axis=0)


def two_stage_predict(loc_model: Model, cls_model: Model, image: np.ndarray,
                      loc_eval_config: PreprocessConfig | None = None,
                      enlarge_factor: float = 1.10, return_details: bool = False):
    """One-shot wrapper around TwoStagePipeline.predict."""
    pipeline = TwoStagePipeline(loc_model, cls_model, loc_eval_config, enlarge_factor)
    return pipeline.predict(image, return_details=return_details)


# -- throughput benchmark --------------------------------------------------------

@dataclass
class BenchEntry:
    batch_size: int
    images: int
    seconds: float

    @property
    def fps(self) -> float:
        return self.images / self.seconds


@dataclass
class BenchReport:
    entries: dict[int, BenchEntry]
    echo: list[str]

    def summary(self) -> str:
        lines = list(self.echo)
        for bs in sorted(self.entries):
            e = self.entries[bs]
            lines.append(f"batch {bs}: {e.fps:.1f} images/s ({e.images} images in {e.seconds:.2f}s)")
        return "\n".join(lines)


def _synthetic_rasters(n: int, side: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, size=(side, side, 3), dtype=np.uint8) for _ in range(n)]


def _bench_echo(target, is_pipeline: bool, n_images: int) -> list[str]:
    cfg = (target.cls_model if is_pipeline else target).config
    return [f"target: {'two-stage pipeline' if is_pipeline else 'single model'}",
            f"depth: {cfg.depth_variant}  width: {cfg.width_multiplier}  head: {cfg.head}",
            f"input: {cfg.input_size}  dtype: float32  images: {n_images}"]


def _make_runner(target, bs: int, seed: int, n_batches: int, pool_batches: int):
    """Pre-generated input pool plus a callable that runs one batch."""
    is_pipeline = isinstance(target, TwoStagePipeline)
    pool_size = min(n_batches, pool_batches)
    if is_pipeline:
        side = (target.loc_model.config.input_size if target.loc_model is not None
                else target.cls_model.config.input_size)
        pool = [_synthetic_rasters(bs, side, seed + i) for i in range(pool_size)]
        oracle_boxes = None
        if target.loc_model is None:
            oracle_boxes = [BoundingBox(side / 2, side / 2, side / 2, side / 2)] * bs

        def run(i):
            target.predict_batch(pool[i % pool_size], gt_boxes=oracle_boxes)
    else:
        side = target.config.input_size
        pool = [Tensor(to_network_input(_synthetic_rasters(bs, side, seed + i)))
                for i in range(pool_size)]

        def run(i):
            target.forward(pool[i % pool_size], train=False)

    return run, pool_size


def bench_fps(target, batch_sizes=(1, 32), n_images: int = 10000, seed: int = 0,
              warmup_batches: int = 2, pool_batches: int = 16) -> BenchReport:
    """Wall-clock images/second per batch size over pre-generated in-memory
    batches; warm-up runs and input generation are excluded from timing."""
    if n_images < 1:
        raise ValueError("n_images must be positive")
    is_pipeline = isinstance(target, TwoStagePipeline)
    entries = {}
    for bs in batch_sizes:
        n_batches = (n_images + bs - 1) // bs
        run, pool_size = _make_runner(target, bs, seed, n_batches, pool_batches)
        # fallback warnings on synthetic noise inputs would flood the log
        prev_level = log.level
        log.setLevel(logging.ERROR)
        try:
            with numerics_checks(False):
                for i in range(min(warmup_batches, pool_size)):
                    run(i)
                start = time.perf_counter()
                for i in range(n_batches):
                    run(i)
                elapsed = time.perf_counter() - start
        finally:
            log.setLevel(prev_level)
        entries[bs] = BenchEntry(bs, n_batches * bs, elapsed)
    return BenchReport(entries, _bench_echo(target, is_pipeline, n_images))


def bench_fps_paired(targets: dict[str, object], batch_sizes=(1, 32), n_images: int = 10000,
                     seed: int = 0, chunks: int = 10, warmup_batches: int = 2,
                     pool_batches: int = 16) -> dict[str, BenchReport]:
    """Benchmark several targets with interleaved timing chunks so slow clock
    or load drift cancels out of their FPS ratios.  Each target still covers
    n_images per batch size."""
    if n_images < 1:
        raise ValueError("n_images must be positive")
    reports = {name: {} for name in targets}
    for bs in batch_sizes:
        n_batches = (n_images + bs - 1) // bs
        per_chunk = max(1, n_batches // chunks)
        runners = {}
        prev_level = log.level
        log.setLevel(logging.ERROR)
        try:
            with numerics_checks(False):
                for name, target in targets.items():
                    run, pool_size = _make_runner(target, bs, seed, n_batches, pool_batches)
                    for i in range(min(warmup_batches, pool_size)):
                        run(i)
                    runners[name] = {"run": run, "done": 0, "seconds": 0.0}
                while any(r["done"] < n_batches for r in runners.values()):
                    for r in runners.values():
                        todo = min(per_chunk, n_batches - r["done"])
                        if todo == 0:
                            continue
                        start = time.perf_counter()
                        for i in range(r["done"], r["done"] + todo):
                            r["run"](i)
                        r["seconds"] += time.perf_counter() - start
                        r["done"] += todo
        finally:
            log.setLevel(prev_level)
        for name, r in runners.items():
            reports[name][bs] = BenchEntry(bs, r["done"] * bs, r["seconds"])
    return {name: BenchReport(per_bs, _bench_echo(targets[name],
                                                  isinstance(targets[name], TwoStagePipeline), n_images))
            for name, per_bs in reports.items()}
