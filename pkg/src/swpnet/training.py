"""Training loops for the classifier and the four-output localiser, plus
head transfer.  Everything is deterministic given (config, seed, manifest)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .binning import LOCATION_BINS, SIZE_BINS, BinSpec, encode_box
from .datasynth import DatasetManifest, PreprocessConfig, load_image, preprocess_train, to_network_input
from .layers import Dense, softmax_cross_entropy
from .models import Model, ModelBuildError


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"training diverged at epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 30
    seed: int = 0
    # per-output weights for the localiser loss: cx, cy, w, h
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    decay_milestones: tuple[float, ...] = (0.5, 0.75)
    decay_factor: float = 0.1
    early_stop_accuracy: float | None = None

    def __post_init__(self):
        # lr == 0 is allowed as a degenerate no-op (useful for harness checks)
        if self.lr < 0:
            raise ValueError(f"lr must not be negative, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if any(w < 0 for w in self.loss_weights) or not any(w > 0 for w in self.loss_weights):
            raise ValueError("loss weights must be non-negative with at least one positive")


@dataclass
class EpochStats:
    epoch: int
    steps: int            # cumulative optimiser steps, for iteration-based reading
    loss: float
    accuracy: float
    lr: float


def history_to_csv(history: list[EpochStats], path) -> None:
    lines = ["epoch,steps,loss,accuracy,lr"]
    lines += [f"{h.epoch},{h.steps},{h.loss!r},{h.accuracy!r},{h.lr!r}" for h in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class MomentumSGD:
    """v = momentum*v + grad + wd*param; param -= lr * v"""

    def __init__(self, params: list[Tensor], momentum: float, weight_decay: float):
        self.params = [p for p in params if p.requires_grad]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    lr = config.lr
    for milestone in config.decay_milestones:
        if epoch >= int(config.max_epochs * milestone):
            lr *= config.decay_factor
    return lr


def _load_all(manifest: DatasetManifest):
    images = [load_image(r) for r in manifest.records]
    labels = np.array([r.class_id for r in manifest.records], dtype=np.int64)
    boxes = [r.box for r in manifest.records]
    return images, labels, boxes


def _run_epochs(model: Model, manifest: DatasetManifest, config: TrainConfig,
                preprocess: PreprocessConfig, step_fn) -> list[EpochStats]:
    images, labels, boxes = _load_all(manifest)
    rng = np.random.default_rng(config.seed)
    params = [t for _, t in model.parameters()]
    opt = MomentumSGD(params, config.momentum, config.weight_decay)
    history: list[EpochStats] = []
    steps = 0
    n = len(images)
    epoch_base = model.trained_epochs  # resumed runs continue the numbering
    for epoch in range(config.max_epochs):
        lr = lr_at_epoch(config, epoch)
        order = rng.permutation(n)
        epoch_loss = 0.0
        hits = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            crops, crop_boxes = [], []
            for i in idx:
                crop, box = preprocess_train(images[i], boxes[i], preprocess, rng)
                crops.append(crop)
                crop_boxes.append(box)
            batch = Tensor(to_network_input(crops))
            try:
                loss_val, batch_hits = step_fn(model, opt, batch, labels[idx], crop_boxes, lr)
            except ad.NumericsError as err:
                raise TrainingDiverged(epoch, str(err)) from err
            if not np.isfinite(loss_val):
                raise TrainingDiverged(epoch, f"loss became {loss_val}")
            epoch_loss += loss_val * len(idx)
            hits += batch_hits
            steps += 1
        acc = 100.0 * hits / n
        history.append(EpochStats(epoch_base + epoch, steps, epoch_loss / n, acc, lr))
        model.trained_epochs += 1
        if config.early_stop_accuracy is not None and acc >= config.early_stop_accuracy:
            break
    return history


def train_classifier(model: Model, manifest: DatasetManifest, config: TrainConfig,
                     preprocess: PreprocessConfig) -> list[EpochStats]:
    """Momentum-SGD over softmax cross-entropy with train-time augmentation."""
    if model.config.head == "loc_head":
        raise ModelBuildError("train_classifier needs a classification head")
    head_classes = model.config.num_classes
    if head_classes != manifest.n_classes:
        raise ModelBuildError(f"model head has {head_classes} classes, "
                              f"manifest has {manifest.n_classes}")
    if preprocess.crop_size != model.config.input_size:
        raise ModelBuildError("preprocess crop size must match the model input size")

    def step(model, opt, batch, targets, _boxes, lr):
        with GradTape():
            logits = model.forward(batch, train=True)
            loss = softmax_cross_entropy(logits, targets)
            ad.backward(loss)
        opt.step(lr)
        opt.zero_grad()
        hits = int((logits.data.argmax(axis=1) == targets).sum())
        return loss.item(), hits

    return _run_epochs(model, manifest, config, preprocess, step)


def train_localiser(model: Model, manifest: DatasetManifest, config: TrainConfig,
                    preprocess: PreprocessConfig, loc_spec: BinSpec = LOCATION_BINS,
                    size_spec: BinSpec = SIZE_BINS) -> list[EpochStats]:
    """Weighted sum of the four per-output cross-entropies against binned
    box targets; outputs with zero weight are skipped entirely, so their
    heads see no gradient."""
    if model.config.head != "loc_head":
        raise ModelBuildError("train_localiser needs a loc_head model")
    if preprocess.crop_size != model.config.input_size:
        raise ModelBuildError("preprocess crop size must match the model input size")
    weights = config.loss_weights

    def step(model, opt, batch, _targets, crop_boxes, lr):
        encoded = [encode_box(b, loc_spec, size_spec) for b in crop_boxes]
        target_cols = [np.array([getattr(t, f) for t in encoded], dtype=np.int64)
                       for f in ("bx", "by", "bw", "bh")]
        with GradTape():
            outputs = model.forward(batch, train=True)
            total = None
            for out, tgt, w in zip(outputs, target_cols, weights):
                if w == 0.0:
                    continue
                part = softmax_cross_entropy(out, tgt)
                part = part if w == 1.0 else ad.scale(part, w)
                total = part if total is None else ad.add(total, part)
            ad.backward(total)
        opt.step(lr)
        opt.zero_grad()
        hit_rates = [float((out.data.argmax(axis=1) == tgt).mean())
                     for out, tgt in zip(outputs, target_cols)]
        return total.item(), float(np.mean(hit_rates)) * len(crop_boxes)

    return _run_epochs(model, manifest, config, preprocess, step)


def transfer_head(model: Model, new_class_count: int, freeze_backbone: bool = False,
                  seed: int = 0) -> Model:
    """Re-initialise the classifier for a new class set, keeping every
    backbone weight; optional freezing leaves backbone grads unpopulated."""
    if new_class_count < 2:
        raise ModelBuildError("transfer needs at least 2 target classes")
    if model.config.head == "loc_head":
        raise ModelBuildError("transfer_head applies to classification models")
    rng = np.random.default_rng(seed)
    if model.config.head == "plain_avgpool_fc":
        in_features = model.head.fc.in_features
        model.head.fc = Dense(in_features, new_class_count, rng=rng, dtype=model.dtype)
    else:
        in_features = model.head.classifier.in_features
        model.head.classifier = Dense(in_features, new_class_count, rng=rng, dtype=model.dtype)
    model.config = dataclasses.replace(model.config, num_classes=new_class_count)
    if freeze_backbone:
        head_params = {id(t) for _, t in model.head.parameters()}
        for _, t in model.parameters():
            if id(t) not in head_params:
                t.requires_grad = False
    return model
