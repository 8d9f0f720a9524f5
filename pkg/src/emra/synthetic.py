"""Synthetic land-cover-like scenes for desk-scale experiments.

Compact rectangles stand in for buildings, disks for ponds and tree
clusters, full-width horizontal stripes for roads and fields. Image ``i``
depends only on ``(seed, i)``, so datasets of different sizes share prefixes.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .metrics import LOVEDA_CLASSES

SHAPES = ("rect", "disk", "stripe")
NOISE_SIGMA = 8.0 / 255.0


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    count: int = 8
    image_size: int = 48
    num_classes: int = 4
    shapes: tuple = SHAPES
    min_shapes: int = 1
    max_shapes: int = 3

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(LOVEDA_CLASSES):
            raise ConfigError(f"num_classes must lie in [1, {len(LOVEDA_CLASSES)}], got {self.num_classes}")
        if self.count < 0 or self.image_size < 1:
            raise ConfigError("count must be >= 0 and image_size >= 1")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("need 0 <= min_shapes <= max_shapes")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise ConfigError(f"shape vocabulary must be a non-empty subset of {SHAPES}")


def _paint(rng, kind, size):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "rect":
        h = int(rng.integers(int(0.2 * size), int(0.5 * size) + 1))
        w = int(rng.integers(int(0.2 * size), int(0.5 * size) + 1))
        y0 = int(rng.integers(0, size - h + 1))
        x0 = int(rng.integers(0, size - w + 1))
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    if kind == "disk":
        r = rng.uniform(0.1 * size, 0.25 * size)
        cy, cx = rng.uniform(0, size, size=2)
        return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
    h = int(rng.integers(max(1, int(0.12 * size)), int(0.25 * size) + 1))
    y0 = int(rng.integers(0, size - h + 1))
    return (yy >= y0) & (yy < y0 + h)


def gen_image(spec, index):
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    label = np.zeros((size, size), dtype=np.int64)
    if spec.num_classes > 1:
        for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
            kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
            cls = int(rng.integers(1, spec.num_classes))
            label[_paint(rng, kind, size)] = cls
    palette = np.array([c for _, c in LOVEDA_CLASSES[:spec.num_classes]], dtype=np.float64) / 255.0
    img = palette[label] + rng.normal(0.0, NOISE_SIGMA, size=(size, size, 3))
    img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return img, label


def gen_synthetic(spec):
    """List of ``(image uint8 (S, S, 3), label int (S, S))`` pairs."""
    return [gen_image(spec, i) for i in range(spec.count)]
