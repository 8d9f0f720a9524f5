"""ViT encoder with multi-class tokens.

Token layout is fixed: rows ``0..C-1`` are the class tokens, rows
``C..C+E-1`` the patch tokens in raster order. Every layer is pre-norm:

    a = MSA(LN(T)) + T
    T' = MLP(LN(a)) + a
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, concat, gelu, layer_norm, linear, softmax


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 512
    patch_size: int = 16
    depth: int = 12
    embed_dim: int = 192
    head_dim: int = 64
    num_classes: int = 7
    token_head_depth: int = 3
    attn_agg_layers: int = 4
    output_stride: tuple = (4, 4)

    def __post_init__(self):
        object.__setattr__(self, "output_stride", tuple(int(s) for s in self.output_stride))
        if self.patch_size < 1 or self.image_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.head_dim < 1 or self.embed_dim < 1 or self.embed_dim % self.head_dim:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by head_dim {self.head_dim}")
        if self.depth < 0 or self.num_classes < 0:
            raise ConfigError("depth and num_classes must be non-negative")
        if self.depth > 0:
            if not 1 <= self.token_head_depth <= self.depth:
                raise ConfigError(f"token_head_depth must lie in [1, {self.depth}], got {self.token_head_depth}")
            if not 1 <= self.attn_agg_layers <= self.depth:
                raise ConfigError(f"attn_agg_layers must lie in [1, {self.depth}], got {self.attn_agg_layers}")
        if len(self.output_stride) != 2 or min(self.output_stride) < 1:
            raise ConfigError(f"output_stride must be two positive ints, got {self.output_stride}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def num_tokens(self):
        return self.num_patches + self.num_classes

    @property
    def num_heads(self):
        return self.embed_dim // self.head_dim

    @property
    def mlp_hidden(self):
        return 4 * self.embed_dim

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * 3


# Standard ViT backbones at the 512x512 training resolution, patch 16, 7 classes.
PRESETS = {
    "tiny": dict(image_size=32, patch_size=8, depth=4, embed_dim=32, head_dim=16,
                 num_classes=4, token_head_depth=2, attn_agg_layers=2),
    "ti": dict(image_size=512, patch_size=16, depth=12, embed_dim=192, num_classes=7),
    "s": dict(image_size=512, patch_size=16, depth=12, embed_dim=384, num_classes=7),
    "b": dict(image_size=512, patch_size=16, depth=12, embed_dim=768, num_classes=7),
    "l": dict(image_size=512, patch_size=16, depth=24, embed_dim=1024, num_classes=7),
}


def preset(name, **overrides):
    try:
        kw = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    kw.update(overrides)
    return EncoderConfig(**kw)


def encoder_param_shapes(cfg):
    d, hid = cfg.embed_dim, cfg.mlp_hidden
    shapes = {
        "embed.proj.w": (cfg.patch_dim, d),
        "embed.proj.b": (d,),
        "embed.cls": (cfg.num_classes, d),
        "embed.pos": (cfg.num_tokens, d),
    }
    for i in range(cfg.depth):
        pre = f"layers.{i}."
        shapes[pre + "ln1.gamma"] = (d,)
        shapes[pre + "ln1.beta"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[pre + f"attn.w{proj}"] = (d, d)
            shapes[pre + f"attn.b{proj}"] = (d,)
        shapes[pre + "ln2.gamma"] = (d,)
        shapes[pre + "ln2.beta"] = (d,)
        shapes[pre + "mlp.w1"] = (d, hid)
        shapes[pre + "mlp.b1"] = (hid,)
        shapes[pre + "mlp.w2"] = (hid, d)
        shapes[pre + "mlp.b2"] = (d,)
    shapes["final_ln.gamma"] = (d,)
    shapes["final_ln.beta"] = (d,)
    return shapes


def encoder_param_count(cfg):
    """Closed form of ``sum(prod(shape))`` over :func:`encoder_param_shapes`."""
    d = cfg.embed_dim
    per_layer = 12 * d * d + 13 * d
    return (cfg.patch_dim * d + d + cfg.num_classes * d + cfg.num_tokens * d
            + cfg.depth * per_layer + 2 * d)


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) truncated to +-2 std by redrawing."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_tensor(name, shape, rng, dtype):
    leaf = name.rsplit(".", 1)[-1]
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    if leaf == "gamma":
        return np.ones(shape, dtype=dtype)
    if leaf == "beta" or leaf.startswith("b"):
        return np.zeros(shape, dtype=dtype)
    return trunc_normal(rng, shape, dtype=dtype)


# -- forward -----------------------------------------------------------

def patchify(images, patch_size):
    """(..., H, W, 3) -> (..., E, patch_size**2 * 3), raster patches, raster pixels, then channel."""
    images = np.asarray(images)
    h, w, ch = images.shape[-3:]
    if h % patch_size or w % patch_size:
        raise ConfigError(f"image {h}x{w} is not divisible into {patch_size}-pixel patches")
    gh, gw = h // patch_size, w // patch_size
    lead = images.shape[:-3]
    x = images.reshape(lead + (gh, patch_size, gw, patch_size, ch))
    n = len(lead)
    x = x.transpose(tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return x.reshape(lead + (gh * gw, patch_size * patch_size * ch))


def unpatchify(patches, image_size, patch_size, channels=3):
    patches = np.asarray(patches)
    g = image_size // patch_size
    lead = patches.shape[:-2]
    n = len(lead)
    x = patches.reshape(lead + (g, g, patch_size, patch_size, channels))
    x = x.transpose(tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return x.reshape(lead + (image_size, image_size, channels))


def _rows(t):
    # A probe-batched vector (K, D) must broadcast against (K, N, D).
    if t.ndim == 2:
        return t.reshape(t.shape[0], 1, t.shape[1])
    return t


def embed_tokens(patches, p, cfg):
    """Project patches, prepend class tokens, add position embeddings."""
    x = linear(Tensor(patches, dtype=p["embed.proj.w"].dtype), p["embed.proj.w"], p["embed.proj.b"])
    if cfg.num_classes:
        x = concat([p["embed.cls"], x], axis=-2)
    return x + p["embed.pos"]


def msa(x, p, prefix, cfg):
    """Multi-head self-attention. Returns (output, attention (..., heads, N, N))."""
    n, d = x.shape[-2:]
    heads, hd = cfg.num_heads, cfg.head_dim

    def split(t):
        t = t.reshape(t.shape[:-2] + (n, heads, hd))
        return t.swapaxes(-3, -2)

    q = split(linear(x, p[prefix + "wq"], p[prefix + "bq"]))
    k = split(linear(x, p[prefix + "wk"], p[prefix + "bk"]))
    v = split(linear(x, p[prefix + "wv"], p[prefix + "bv"]))
    attn = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd)), axis=-1)
    o = (attn @ v).swapaxes(-3, -2)
    o = o.reshape(o.shape[:-3] + (n, d))
    return linear(o, p[prefix + "wo"], p[prefix + "bo"]), attn


def encoder_layer(x, p, i, cfg, attention_only=False):
    """One pre-norm layer. Returns (T_i, attention); T_i is None when only the
    attention map is wanted."""
    pre = f"layers.{i}."
    h, attn = msa(layer_norm(x, _rows(p[pre + "ln1.gamma"]), _rows(p[pre + "ln1.beta"])),
                  p, pre + "attn.", cfg)
    if attention_only:
        return None, attn
    a = h + x
    z = layer_norm(a, _rows(p[pre + "ln2.gamma"]), _rows(p[pre + "ln2.beta"]))
    z = linear(gelu(linear(z, p[pre + "mlp.w1"], p[pre + "mlp.b1"])), p[pre + "mlp.w2"], p[pre + "mlp.b2"])
    return z + a, attn


@dataclass
class EncodeOutput:
    tokens_in: object
    tokens: list = field(default_factory=list)       # T_1 .. T_L (T_L may be skipped)
    attentions: list = field(default_factory=list)   # per layer (..., heads, N, N)
    normed: object = None                             # final LN applied to T_L

    @property
    def last(self):
        return self.tokens[-1] if self.tokens else self.tokens_in


def encode(images, p, cfg, final_norm=True, need_output=True):
    """Run the full encoder on images (..., H, W, 3) already scaled to model input.

    With ``need_output=False`` (and no final norm) the last layer stops after
    its attention map and ``tokens`` ends at T_{L-1}.
    """
    images = np.asarray(images)
    if images.shape[-3:-1] != (cfg.image_size, cfg.image_size):
        raise ShapeError(f"expected {cfg.image_size}x{cfg.image_size} images, got {images.shape}")
    x = embed_tokens(patchify(images, cfg.patch_size), p, cfg)
    out = EncodeOutput(tokens_in=x)
    skip_tail = not (need_output or final_norm)
    for i in range(cfg.depth):
        tail = skip_tail and i == cfg.depth - 1
        y, attn = encoder_layer(x, p, i, cfg, attention_only=tail)
        out.attentions.append(attn)
        if tail:
            break
        x = y
        out.tokens.append(x)
    if final_norm:
        out.normed = layer_norm(x, _rows(p["final_ln.gamma"]), _rows(p["final_ln.beta"]))
    return out
