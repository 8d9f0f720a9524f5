"""Image/label pairs on disk.

A dataset directory holds ``img_NNNN.ppm`` (RGB) next to ``lbl_NNNN.pgm``
(class indices, 255 = ignore) or ``lbl_NNNN.ppm`` (LoveDA palette colours).
"""
import os
import re

from .errors import DataError
from .metrics import LabelCodec
from .netpbm import load_image, save_image

_IMG = re.compile(r"^img_(\d+)\.ppm$")


def save_dataset(directory, pairs):
    os.makedirs(directory, exist_ok=True)
    for i, (img, lab) in enumerate(pairs):
        save_image(os.path.join(directory, f"img_{i:04d}.ppm"), img)
        save_image(os.path.join(directory, f"lbl_{i:04d}.pgm"), lab.astype("uint8"))
    return len(pairs)


def load_dataset(directory, codec=None):
    if not os.path.isdir(directory):
        raise DataError(f"dataset directory {directory} does not exist")
    codec = codec or LabelCodec()
    keys = sorted(m.group(1) for m in map(_IMG.match, os.listdir(directory)) if m)
    if not keys:
        raise DataError(f"no img_*.ppm files in {directory}")
    pairs = []
    for key in keys:
        img = load_image(os.path.join(directory, f"img_{key}.ppm"))
        gray = os.path.join(directory, f"lbl_{key}.pgm")
        color = os.path.join(directory, f"lbl_{key}.ppm")
        if os.path.exists(gray):
            lab = load_image(gray).astype("int64")
        elif os.path.exists(color):
            lab = codec.decode_rgb(load_image(color))
        else:
            raise DataError(f"no label file for img_{key}.ppm")
        if lab.shape != img.shape[:2]:
            raise DataError(f"label {key} is {lab.shape}, image is {img.shape[:2]}")
        pairs.append((img, lab))
    return pairs
