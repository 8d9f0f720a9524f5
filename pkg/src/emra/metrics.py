"""Label colour codec, confusion matrices and segmentation metrics."""
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError

IGNORE_INDEX = 255
IGNORE_COLOR = (0, 0, 0)

LOVEDA_CLASSES = (
    ("background", (255, 255, 255)),
    ("building", (255, 0, 0)),
    ("road", (255, 255, 0)),
    ("water", (0, 0, 255)),
    ("barren", (159, 129, 183)),
    ("forest", (0, 255, 0)),
    ("agriculture", (255, 195, 128)),
)


def _pack(rgb):
    rgb = np.asarray(rgb, dtype=np.uint32)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


@dataclass(frozen=True)
class LabelCodec:
    classes: tuple = LOVEDA_CLASSES
    ignore_index: int = IGNORE_INDEX
    ignore_color: tuple = IGNORE_COLOR

    def __post_init__(self):
        colors = [tuple(c) for _, c in self.classes] + [tuple(self.ignore_color)]
        if len(set(colors)) != len(colors):
            raise DataError("label colours must be pairwise distinct")

    @property
    def names(self):
        return [n for n, _ in self.classes]

    @property
    def palette(self):
        return np.array([c for _, c in self.classes], dtype=np.uint8)

    def __len__(self):
        return len(self.classes)

    def subset(self, k):
        return LabelCodec(self.classes[:k], self.ignore_index, self.ignore_color)

    def decode_rgb(self, label_image):
        """(H, W, 3) uint8 colours -> (H, W) class indices; ignore colour -> 255."""
        img = np.asarray(label_image)
        if img.ndim != 3 or img.shape[-1] != 3:
            raise ShapeError(f"label image must be (H, W, 3), got {img.shape}")
        keys = _pack(img)
        table = _pack(self.palette)
        out = np.full(keys.shape, -1, dtype=np.int64)
        for idx, key in enumerate(table):
            out[keys == key] = idx
        out[keys == _pack(np.array(self.ignore_color))] = self.ignore_index
        bad = np.argwhere(out < 0)
        if bad.size:
            y, x = (int(v) for v in bad[0])
            raise DataError(f"unknown label colour {tuple(int(v) for v in img[y, x])} at pixel (row {y}, col {x})")
        return out

    def encode_rgb(self, class_map):
        m = np.asarray(class_map)
        bad = (m != self.ignore_index) & ((m < 0) | (m >= len(self)))
        if bad.any():
            y, x = (int(v) for v in np.argwhere(bad)[0])
            raise DataError(f"class index {int(m[y, x])} at (row {y}, col {x}) has no colour")
        lut = np.zeros((max(len(self), self.ignore_index + 1), 3), dtype=np.uint8)
        lut[:len(self)] = self.palette
        lut[self.ignore_index] = self.ignore_color
        return lut[m.astype(np.int64)]


class ConfusionMatrix:
    """``counts[g, p]`` = pixels with ground truth ``g`` predicted as ``p``."""

    def __init__(self, num_classes, ignore_index=IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        keep = gt != self.ignore_index
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        k = self.num_classes
        if g.size and (g.min() < 0 or g.max() >= k or p.min() < 0 or p.max() >= k):
            raise DataError(f"class indices must lie in [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other):
        self.counts += other.counts
        return self

    @property
    def total(self):
        return int(self.counts.sum())


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def metrics(conf):
    """mIoU, OA, and per-class IoU/F1/precision/recall.

    Classes with no ground-truth and no predicted pixels are left out of the
    means; per-class values with a zero denominator are 0.
    """
    counts = conf.counts if isinstance(conf, ConfusionMatrix) else np.asarray(conf)
    tp = np.diag(counts).astype(np.int64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    union = tp + fp + fn
    iou = _safe_div(tp, union)
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * tp, 2 * tp + fp + fn)
    present = union > 0
    total = int(counts.sum())

    def mean_present(v):
        return float(v[present].mean()) if present.any() else 0.0

    return {
        "miou": mean_present(iou),
        "oa": float(tp.sum()) / total if total else 0.0,
        "mean_f1": mean_present(f1),
        "mean_precision": mean_present(precision),
        "mean_recall": mean_present(recall),
        "per_class_iou": iou,
        "per_class_f1": f1,
        "per_class_precision": precision,
        "per_class_recall": recall,
    }


def format_report(result, names=None):
    """Plain-text table of per-class values followed by the summary lines."""
    k = len(result["per_class_iou"])
    names = list(names or [f"class{i}" for i in range(k)])[:k]
    width = max([len(n) for n in names] + [5])
    lines = [f"{'class':<{width}}  {'IoU':>8}  {'F1':>8}  {'prec':>8}  {'recall':>8}"]
    for i, n in enumerate(names):
        lines.append(f"{n:<{width}}  {result['per_class_iou'][i]:8.4f}  {result['per_class_f1'][i]:8.4f}  "
                     f"{result['per_class_precision'][i]:8.4f}  {result['per_class_recall'][i]:8.4f}")
    lines.append(f"mIoU={result['miou']:.4f}  OA={result['oa']:.4f}  mF1={result['mean_f1']:.4f}")
    return "\n".join(lines)


def format_kv(result, names=None):
    """One ``metric=value`` line per metric, six decimals."""
    k = len(result["per_class_iou"])
    names = list(names or [f"class{i}" for i in range(k)])[:k]
    lines = [f"{key}={result[key]:.6f}" for key in ("miou", "oa", "mean_f1", "mean_precision", "mean_recall")]
    for kind, key in (("iou", "per_class_iou"), ("f1", "per_class_f1"),
                      ("precision", "per_class_precision"), ("recall", "per_class_recall")):
        lines.extend(f"{kind}_{n}={result[key][i]:.6f}" for i, n in enumerate(names))
    return "\n".join(lines) + "\n"
