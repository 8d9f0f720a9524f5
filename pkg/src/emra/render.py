"""Rendering of predictions and proxy maps to 8-bit images."""
import numpy as np

from .errors import ShapeError
from .metrics import LabelCodec


def render_prediction(class_map, codec=None):
    """Class indices (H, W) to LoveDA palette colours (H, W, 3) uint8."""
    return (codec or LabelCodec()).encode_rgb(class_map)


def to_gray(values, lo=0.0, hi=1.0):
    """Linear map of [lo, hi] onto 0..255 with rounding and clipping."""
    v = np.asarray(values, dtype=np.float64)
    span = hi - lo
    scaled = (v - lo) / span if span > 0 else np.zeros_like(v)
    return np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)


def association_entropy(q):
    """Per-pixel entropy of association vectors (..., 9), divided by log 9.

    Masked neighbours carry exactly 0 and contribute nothing (0 log 0 = 0).
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 9:
        raise ShapeError(f"association vectors must have 9 entries, got {q.shape[-1]}")
    safe = np.where(q > 0, q, 1.0)
    h = -(q * np.log(safe)).sum(axis=-1)
    return np.maximum(h, 0.0) / np.log(9.0)


def render_entropy(q):
    """Grayscale entropy image: 0 is a hard assignment, 255 is uniform over 9."""
    return to_gray(association_entropy(q))


def render_class_attention(class_to_patch, grid, cell=1):
    """One grayscale image per class from (C, E) class-to-patch attention.

    Each map is scaled by its own maximum and every grid cell is drawn as a
    ``cell`` x ``cell`` block.
    """
    a = np.asarray(class_to_patch, dtype=np.float64)
    c, e = a.shape[-2:]
    if e != grid * grid:
        raise ShapeError(f"{e} patches do not form a {grid}x{grid} grid")
    maps = []
    for k in range(c):
        m = a[..., k, :].reshape(grid, grid)
        peak = m.max()
        img = to_gray(m, 0.0, peak if peak > 0 else 1.0)
        maps.append(np.repeat(np.repeat(img, cell, axis=0), cell, axis=1))
    return maps
