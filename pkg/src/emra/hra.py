"""Homogeneous-region association: pixels to nearby region tokens.

Each token of the H_g x W_g patch grid is a region proxy. A pixel of the
stride-(h, w) output map is linked to the 3x3 tokens around its own cell;
neighbour ``n`` (0..8) is the offset ``(n // 3 - 1, n % 3 - 1)``. Links to
cells outside the grid are masked to exactly zero probability.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import depthwise_conv3x3, masked_softmax, pointwise_conv1x1

NEIGHBOR_OFFSETS = tuple((n // 3 - 1, n % 3 - 1) for n in range(9))


def conv_param_shapes(cfg):
    sh, sw = cfg.output_stride
    d = cfg.embed_dim
    return {
        "hra.dw.kernel": (3, 3, d),
        "hra.dw.bias": (d,),
        "hra.pw.w": (d, sh * sw * 9),
        "hra.pw.b": (sh * sw * 9,),
    }


def token_head(enc, depth, cfg):
    """Patch rows of T_M reshaped onto the token grid, (..., H_g, W_g, D)."""
    if not 1 <= depth <= len(enc.tokens):
        raise ConfigError(f"token head depth {depth} outside [1, {len(enc.tokens)}]")
    t = enc.tokens[depth - 1][..., cfg.num_classes:, :]
    return t.reshape(t.shape[:-2] + (cfg.grid, cfg.grid, cfg.embed_dim))


def conv_module(grid, p, stride):
    """Depthwise 3x3 then 1x1 to h*w*9 channels, unpacked to per-pixel logits.

    Channel ``(dy * w + dx) * 9 + n`` of cell (i, j) becomes neighbour ``n`` of
    pixel ``(i*h + dy, j*w + dx)``.
    """
    sh, sw = stride
    x = depthwise_conv3x3(grid, p["hra.dw.kernel"], p["hra.dw.bias"])
    if p["hra.pw.w"].shape[-1] != sh * sw * 9:
        raise ConfigError(f"pointwise output has {p['hra.pw.w'].shape[-1]} channels, need {sh * sw * 9}")
    x = pointwise_conv1x1(x, p["hra.pw.w"], p["hra.pw.b"])
    hg, wg = x.shape[-3:-1]
    lead = x.shape[:-3]
    n = len(lead)
    x = x.reshape(lead + (hg, wg, sh, sw, 9))
    x = x.transpose(tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return x.reshape(lead + (hg * sh, wg * sw, 9))


def neighbor_mask(hg, wg, stride):
    """Boolean (hg*h, wg*w, 9): which of a pixel's 9 neighbours lie on the grid."""
    sh, sw = stride
    i = np.arange(hg)[:, None, None]
    j = np.arange(wg)[None, :, None]
    di = np.array([o[0] for o in NEIGHBOR_OFFSETS])[None, None, :]
    dj = np.array([o[1] for o in NEIGHBOR_OFFSETS])[None, None, :]
    cell = (i + di >= 0) & (i + di < hg) & (j + dj >= 0) & (j + dj < wg)
    return np.repeat(np.repeat(cell, sh, axis=0), sw, axis=1)


@dataclass
class AssociationMap:
    q: object            # Tensor (..., hg*h, wg*w, 9)
    valid_mask: np.ndarray
    grid: tuple
    stride: tuple


def normalize_associations(logits, grid, stride):
    hg, wg = grid
    sh, sw = stride
    if logits.shape[-3:] != (hg * sh, wg * sw, 9):
        raise ShapeError(f"association logits {logits.shape} do not match grid {grid} at stride {stride}")
    mask = neighbor_mask(hg, wg, stride)
    return AssociationMap(masked_softmax(logits, mask), mask, (hg, wg), (sh, sw))


def associate(enc, p, cfg):
    grid = token_head(enc, cfg.token_head_depth, cfg)
    logits = conv_module(grid, p, cfg.output_stride)
    return normalize_associations(logits, (cfg.grid, cfg.grid), cfg.output_stride)
