"""Class-attention aggregation (GCA-map) and patch-affinity refinement."""
from dataclasses import dataclass

from .errors import ConfigError


def aggregate_attention(enc, num_layers):
    """Unweighted mean over heads and over the last ``num_layers`` layers."""
    depth = len(enc.attentions)
    if not 1 <= num_layers <= depth:
        raise ConfigError(f"attention aggregation depth {num_layers} outside [1, {depth}]")
    total = None
    for attn in enc.attentions[depth - num_layers:]:
        m = attn.mean(axis=-3)
        total = m if total is None else total + m
    if num_layers == 1:
        return total
    return total * (1.0 / num_layers)


def split_attention(agg, num_classes, num_patches):
    c, e = num_classes, num_patches
    class_to_patch = agg[..., :c, c:c + e]
    patch_affinity = agg[..., c:c + e, c:c + e]
    return class_to_patch, patch_affinity


def refine_with_affinity(class_to_patch, patch_affinity, steps=1):
    """``steps`` products with the symmetrised, row-normalised affinity."""
    if steps < 0:
        raise ConfigError(f"refinement steps must be >= 0, got {steps}")
    if steps == 0:
        return class_to_patch
    sym = (patch_affinity + patch_affinity.swapaxes(-1, -2)) * 0.5
    norm = sym / sym.sum(axis=-1, keepdims=True)
    norm_t = norm.swapaxes(-1, -2)
    out = class_to_patch
    for _ in range(steps):
        out = out @ norm_t
    return out


LOGIT_SCALES = ("patches", "raw")


def region_class_logits(refined, scale="patches"):
    """(..., C, E) -> (..., E, C); row s is the class-logit vector of region s.

    Attention weights are O(1/E). ``"patches"`` multiplies them by E so that
    uniform attention maps to 1 and logit differences are O(1); ``"raw"``
    uses the attention values as they are.
    """
    if scale not in LOGIT_SCALES:
        raise ConfigError(f"unknown region logit scale {scale!r}; choose from {LOGIT_SCALES}")
    out = refined.swapaxes(-1, -2)
    if scale == "patches":
        out = out * float(out.shape[-2])
    return out


@dataclass
class GCAMap:
    class_to_patch: object
    patch_affinity: object
    refined_class_to_patch: object
    region_logits: object


def gca_map(enc, cfg, refine_steps=1, scale="patches"):
    agg = aggregate_attention(enc, cfg.attn_agg_layers)
    ctp, aff = split_attention(agg, cfg.num_classes, cfg.num_patches)
    refined = refine_with_affinity(ctp, aff, refine_steps)
    return GCAMap(ctp, aff, refined, region_class_logits(refined, scale))
