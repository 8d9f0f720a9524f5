"""SGD training with poly learning-rate decay, and evaluation.

Randomness comes from ``default_rng([seed, epoch])`` created fresh at the
start of each epoch, so a run resumed from a checkpoint at an epoch boundary
draws exactly what an uninterrupted run would.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, TrainingError
from .head import multiscale_infer
from .metrics import ConfusionMatrix, metrics
from .model import as_leaves, cast_params, forward
from .tensor import bilinear_upsample, cross_entropy

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    power: float = 0.9
    weight_decay: float = 0.0
    momentum: float = 0.0
    epochs: int = 100
    batch_size: int = 16
    crop_size: int = 0          # 0: the model's image size
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.power < 0 or self.crop_size < 0:
            raise ConfigError("weight_decay, power and crop_size must be >= 0")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


def poly_lr(epoch, total, base_lr=1e-3, power=0.9):
    """base_lr * (1 - epoch / total) ** power, for 0 <= epoch <= total."""
    if total < 1 or not 0 <= epoch <= total:
        raise ConfigError(f"poly_lr needs 0 <= epoch <= total with total >= 1, got epoch={epoch}, total={total}")
    if epoch == total:
        return 0.0
    return base_lr * (1.0 - epoch / total) ** power


def sgd_step(params, grads, lr, weight_decay=0.0, momentum=0.0, velocity=None):
    """One plain SGD update; returns (new params, new velocity).

    p <- p - lr * v with v = momentum * v + g + weight_decay * p.
    With momentum 0 the velocity dict stays empty.
    """
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise ConfigError(f"parameter and gradient names differ: {missing[:3]}")
    velocity = dict(velocity or {})
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        dt = p.dtype.type
        step = g + dt(weight_decay) * p if weight_decay else g
        if momentum:
            v = velocity.get(name)
            step = step if v is None else dt(momentum) * v + step
            velocity[name] = step
        out[name] = p - dt(lr) * step
    return out, velocity


@dataclass
class TrainState:
    epoch: int = 0              # completed epochs
    step: int = 0               # completed optimizer steps
    seed: int = 0
    velocity: dict = field(default_factory=dict)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float                 # mean batch loss
    pixel_acc: float            # on the augmented training crops


@dataclass
class TrainResult:
    params: dict
    log: list
    state: TrainState


def random_crop(image, label, size, rng):
    """Uniform top-left crop; reflection-pads images smaller than ``size``."""
    h, w = label.shape
    if h < size or w < size:
        py, px = max(0, size - h), max(0, size - w)
        image = np.pad(image, ((0, py), (0, px), (0, 0)), mode="reflect" if min(h, w) > 1 else "edge")
        label = np.pad(label, ((0, py), (0, px)), mode="reflect" if min(h, w) > 1 else "edge")
        h, w = label.shape
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return image[y:y + size, x:x + size], label[y:y + size, x:x + size]


def epoch_batches(dataset, epoch, cfg, crop):
    """Deterministic augmented batches (images uint8 (B,S,S,3), labels (B,S,S))."""
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), cfg.batch_size):
        imgs, labs = [], []
        for i in order[start:start + cfg.batch_size]:
            img, lab = dataset[i]
            img, lab = random_crop(np.asarray(img), np.asarray(lab), crop, rng)
            if rng.random() < 0.5:
                img, lab = img[:, ::-1], lab[:, ::-1]
            imgs.append(img)
            labs.append(lab)
        yield np.stack(imgs), np.stack(labs)


def train(model, dataset, cfg, state=None, until=None, on_epoch=None):
    """Train ``model`` in place from ``state`` (fresh if None) up to epoch ``until``.

    ``until`` defaults to ``cfg.epochs``; stopping early and calling again
    with the returned state continues the same run. ``on_epoch(log, state)``
    is called after every epoch.
    """
    if not len(dataset):
        raise DataError("training needs a non-empty dataset")
    enc = model.config.encoder
    crop = cfg.crop_size or enc.image_size
    if crop != enc.image_size:
        raise ConfigError(f"crop_size {crop} must equal the model's image_size {enc.image_size}")
    state = state or TrainState(seed=cfg.seed)
    if state.seed != cfg.seed:
        raise ConfigError(f"state was created with seed {state.seed}, config says {cfg.seed}")
    until = cfg.epochs if until is None else min(until, cfg.epochs)
    params = cast_params(model.params, cfg.dtype)
    velocity = state.velocity
    log = []
    for epoch in range(state.epoch, until):
        lr = poly_lr(epoch, cfg.epochs, cfg.base_lr, cfg.power)
        losses, correct, counted = [], 0, 0
        for b, (images, labels) in enumerate(epoch_batches(dataset, epoch, cfg, crop)):
            leaves = as_leaves(params)
            out = forward(model.config, leaves, images)
            up = bilinear_upsample(out.logits_map, *labels.shape[-2:])
            loss = cross_entropy(up, labels)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            grads = {k: t.grad if t.grad is not None else np.zeros_like(params[k])
                     for k, t in leaves.items()}
            try:
                params, velocity = sgd_step(params, grads, lr, cfg.weight_decay, cfg.momentum, velocity)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}, batch {b}") from None
            state.step += 1
            losses.append(value)
            keep = labels != 255
            correct += int((up.data.argmax(-1) == labels)[keep].sum())
            counted += int(keep.sum())
        state.epoch = epoch + 1
        state.velocity = velocity
        entry = EpochLog(epoch, lr, float(np.mean(losses)), correct / counted if counted else 0.0)
        log.append(entry)
        model.params = params
        if on_epoch is not None:
            on_epoch(entry, state)
    model.params = params
    return TrainResult(params, log, state)


def evaluate(model, dataset, scales=(1.0,), flip=False, window=None, stride=None, threads=None):
    """Confusion matrix and metrics of ``model`` over ``dataset``."""
    enc = model.config.encoder
    window = window or enc.image_size
    if window != enc.image_size:
        raise ConfigError(f"window {window} must equal the model's image_size {enc.image_size}")
    conf = ConfusionMatrix(enc.num_classes)
    for image, label in dataset:
        pred = multiscale_infer(model.predict_probs, image, scales, flip, window, stride, threads)
        conf.accumulate(pred.class_map, label)
    return conf, metrics(conf)
