"""Model assembly: parameters, variants and the forward pass.

Variants
--------
full
    Association map (region proxies) fused with class-attention region logits.
mca
    Class-attention region logits only, bilinearly upsampled to the output map.
hra
    Association map fused with region logits from a linear classifier on the
    final (normalised) patch tokens.
baseline
    Linear per-patch classifier on the final tokens, bilinearly upsampled.

Parameters live in a flat ``{name: ndarray}`` dict so optimisers,
checkpoints and finite-difference probes can treat them uniformly.
"""
from dataclasses import dataclass, field

import numpy as np

from . import hra, mca
from .encoder import EncoderConfig, encode, encoder_param_shapes, init_tensor, preset
from .errors import ConfigError
from .head import Prediction, fuse, seg_loss, upsample_and_classify
from .tensor import Tensor, bilinear_upsample, linear, no_grad, parameter

VARIANTS = ("full", "mca", "hra", "baseline")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=lambda: preset("tiny"))
    variant: str = "full"
    refine_steps: int = 1
    logit_scale: str = "patches"     # region logits from attention: "patches" or "raw"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.logit_scale not in mca.LOGIT_SCALES:
            raise ConfigError(f"unknown logit_scale {self.logit_scale!r}; choose from {mca.LOGIT_SCALES}")
        if self.refine_steps < 0:
            raise ConfigError("refine_steps must be >= 0")
        if self.encoder.depth < 1:
            raise ConfigError("a segmentation model needs at least one encoder layer")
        if self.uses_mca and self.encoder.num_classes < 1:
            raise ConfigError("class-attention variants need num_classes >= 1")

    @property
    def uses_hra(self):
        return self.variant in ("full", "hra")

    @property
    def uses_mca(self):
        return self.variant in ("full", "mca")

    @property
    def uses_classifier(self):
        return self.variant in ("hra", "baseline")


def param_shapes(cfg):
    enc = cfg.encoder
    shapes = encoder_param_shapes(enc)
    if cfg.uses_hra:
        shapes.update(hra.conv_param_shapes(enc))
    if cfg.uses_classifier:
        shapes["cls_head.w"] = (enc.embed_dim, enc.num_classes)
        shapes["cls_head.b"] = (enc.num_classes,)
    return shapes


def param_count(cfg):
    """Closed-form parameter count."""
    from .encoder import encoder_param_count

    enc = cfg.encoder
    d, c = enc.embed_dim, enc.num_classes
    sh, sw = enc.output_stride
    total = encoder_param_count(enc)
    if cfg.uses_hra:
        total += 9 * d + d + d * sh * sw * 9 + sh * sw * 9
    if cfg.uses_classifier:
        total += d * c + c
    return total


def init_params(cfg, seed=0, dtype=np.float32, zeros=False):
    """Truncated-normal(0.02) weights and embeddings, zero biases, unit LN scales.

    ``zeros`` allocates every array as zeros without drawing random numbers
    (cheap construction of the large backbones).
    """
    rng = None if zeros else np.random.default_rng(seed)
    return {name: init_tensor(name, shape, rng, dtype) for name, shape in param_shapes(cfg).items()}


def cast_params(params, dtype):
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def to_input(images, dtype):
    """uint8 or [0, 1] float images to centred model input."""
    images = np.asarray(images)
    if images.dtype == np.uint8:
        images = images.astype(dtype) / dtype(255.0)
    return images.astype(dtype, copy=False) - dtype(0.5)


@dataclass
class ForwardOutput:
    logits_map: Tensor                 # (B, Hg*h, Wg*w, C)
    encoding: object
    association: object = None
    gca: object = None
    region_logits: Tensor = None      # (B, E, C)


def forward(cfg, p, images):
    """Forward pass. ``p`` maps names to Tensors; images are (B, H, W, 3)."""
    enc_cfg = cfg.encoder
    dtype = next(iter(p.values())).dtype.type
    images = to_input(images, dtype)
    if images.ndim == 3:
        images = images[None]
    # the final tokens only matter to the classifier, or to a token head
    # that spans the whole encoder
    need = cfg.uses_classifier or (cfg.uses_hra and enc_cfg.token_head_depth == enc_cfg.depth)
    enc = encode(images, p, enc_cfg, final_norm=cfg.uses_classifier, need_output=need)
    out = ForwardOutput(logits_map=None, encoding=enc)
    if cfg.uses_mca:
        out.gca = mca.gca_map(enc, enc_cfg, cfg.refine_steps, cfg.logit_scale)
        region = out.gca.region_logits
    else:
        patches = enc.normed[..., enc_cfg.num_classes:, :]
        region = linear(patches, p["cls_head.w"], p["cls_head.b"])
    out.region_logits = region
    sh, sw = enc_cfg.output_stride
    g = enc_cfg.grid
    if cfg.uses_hra:
        out.association = hra.associate(enc, p, enc_cfg)
        out.logits_map = fuse(out.association, region)
    else:
        grid = region.reshape(region.shape[:-2] + (g, g, enc_cfg.num_classes))
        out.logits_map = bilinear_upsample(grid, g * sh, g * sw)
    return out


def as_leaves(params, requires_grad=True):
    if requires_grad:
        return {k: parameter(v, name=k) for k, v in params.items()}
    return {k: Tensor(v) for k, v in params.items()}


class SegmentationModel:
    """Config plus parameter arrays, with convenience entry points."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config, seed=0, dtype=np.float32):
        return cls(config, init_params(config, seed, dtype))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype.type

    def loss_and_grads(self, images, labels):
        leaves = as_leaves(self.params)
        loss = seg_loss(forward(self.config, leaves, images).logits_map, labels)
        loss.backward()
        grads = {}
        for k, t in leaves.items():
            grads[k] = t.grad if t.grad is not None else np.zeros_like(self.params[k])
        return float(loss.data), grads

    def logits(self, images):
        with no_grad():
            return forward(self.config, as_leaves(self.params, False), images)

    def predict_probs(self, image):
        """Full-resolution class probabilities (H, W, C) for one model-sized image."""
        out = self.logits(image)
        h, w = np.asarray(image).shape[:2]
        return upsample_and_classify(out.logits_map.data[0], h, w).class_probs

    def predict(self, image):
        return Prediction.from_probs(self.predict_probs(image))
