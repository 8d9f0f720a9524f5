"""Fusion of association and region logits, loss, and tiled inference."""
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, bilinear_upsample, cross_entropy, neighbor_fuse, resize_array

IGNORE_INDEX = 255
DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)


def fuse(assoc, region_logits):
    """Per pixel, the association-weighted mix of neighbouring region logits.

    ``region_logits`` is (..., E, C) with regions in raster order over the grid.
    """
    hg, wg = assoc.grid
    if region_logits.shape[-2] != hg * wg:
        raise ShapeError(f"{region_logits.shape[-2]} regions do not match a {hg}x{wg} grid")
    grid = region_logits.reshape(region_logits.shape[:-2] + (hg, wg, region_logits.shape[-1]))
    return neighbor_fuse(assoc.q, grid, assoc.stride)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Prediction:
    class_probs: np.ndarray   # (H, W, C), rows sum to 1
    class_map: np.ndarray     # (H, W) int, ties -> lowest class index

    @classmethod
    def from_probs(cls, probs):
        return cls(probs, np.argmax(probs, axis=-1).astype(np.int64))


def upsample_and_classify(logits_map, out_h, out_w):
    """Bilinear upsample of a logits map (H', W', C) then per-pixel softmax."""
    x = logits_map.data if isinstance(logits_map, Tensor) else np.asarray(logits_map)
    if out_h < x.shape[-3] or out_w < x.shape[-2]:
        raise ConfigError(f"target {out_h}x{out_w} is smaller than the logits map {x.shape[-3:-1]}")
    return Prediction.from_probs(_softmax(resize_array(x, out_h, out_w)))


def seg_loss(logits_map, labels, ignore_index=IGNORE_INDEX, per_sample=False):
    """Pixel-wise cross-entropy after upsampling the logits to label resolution."""
    labels = np.asarray(labels)
    h, w = labels.shape[-2:]
    return cross_entropy(bilinear_upsample(logits_map, h, w), labels,
                         ignore_index=ignore_index, per_sample=per_sample)


def _starts(size, window, stride):
    last = size - window
    out = list(range(0, last + 1, stride))
    if out[-1] != last:
        out.append(last)
    return out


def default_threads():
    try:
        return max(1, int(os.environ.get("EMRA_THREADS", "1")))
    except ValueError:
        return 1


def sliding_window_infer(predict, image, window, stride=None, threads=None):
    """Average class probabilities over overlapping ``window`` tiles.

    ``predict`` maps a (window, window, 3) float image to (window, window, C)
    probabilities. Images smaller than the window are edge-padded at the
    bottom/right and the result cropped back.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    if window < 1:
        raise ConfigError("window must be positive")
    stride = stride or max(1, window // 2)
    ph, pw = max(h, window), max(w, window)
    if (ph, pw) != (h, w):
        image = np.pad(image, ((0, ph - h), (0, pw - w), (0, 0)), mode="edge")
    tiles = [(y, x) for y in _starts(ph, window, stride) for x in _starts(pw, window, stride)]
    threads = threads or default_threads()

    def run(pos):
        y, x = pos
        return predict(image[y:y + window, x:x + window])

    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, tiles))
    else:
        results = [run(t) for t in tiles]
    if len(tiles) == 1:
        probs = results[0]
    else:
        acc = np.zeros((ph, pw, results[0].shape[-1]), dtype=results[0].dtype)
        count = np.zeros((ph, pw, 1), dtype=results[0].dtype)
        for (y, x), r in zip(tiles, results):
            acc[y:y + window, x:x + window] += r
            count[y:y + window, x:x + window] += 1
        probs = acc / count
    return Prediction.from_probs(probs[:h, :w])


def multiscale_infer(predict, image, scales=DEFAULT_SCALES, flip=False, window=None,
                     stride=None, threads=None):
    """Mean of sliding-window probabilities over rescaled (and mirrored) copies.

    uint8 images are converted to [0, 1] floats first.
    """
    image = np.asarray(image)
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / np.float32(255.0)
    if not len(scales):
        raise ConfigError("scales must be non-empty")
    h, w = image.shape[:2]
    window = window or min(h, w)
    total, n = None, 0
    for s in scales:
        sh, sw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        scaled = resize_array(image, sh, sw)
        for mirrored in ((False, True) if flip else (False,)):
            src = scaled[:, ::-1] if mirrored else scaled
            probs = sliding_window_infer(predict, src, window, stride, threads).class_probs
            if mirrored:
                probs = probs[:, ::-1]
            probs = resize_array(probs, h, w)
            total = probs.copy() if total is None else total + probs
            n += 1
    return Prediction.from_probs(total / n if n > 1 else total)
