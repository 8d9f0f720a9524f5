"""End-to-end finite-difference verification of the model gradient.

Each parameter is probed coordinate by coordinate with central differences
(eps = 1e-5). Probes for one parameter run as a batch: the parameter gets a
leading axis of perturbed copies and the forward pass broadcasts over it.

Two measures keep the finite-difference side from drowning in roundoff:

* the loss change between the +eps and -eps probes is evaluated from the
  logit difference (see ``cross_entropy_difference``), so the error scales
  with the logits rather than with the loss;
* coordinates whose float64 estimate disagrees by more than ``refine_tol``
  are probed again in extended precision (``np.longdouble``), same formula,
  same eps. Where the platform has no wider float the float64 value stands.
"""
import time
from dataclasses import dataclass

import numpy as np

from .head import seg_loss
from .model import as_leaves, cast_params, forward, init_params, param_shapes
from .synthetic import SyntheticSpec, gen_synthetic
from .tensor import (Tensor, bilinear_upsample, cross_entropy_difference, no_grad,
                     numeric_grad_batched, relative_errors)

EXTENDED = np.dtype(np.longdouble)
HAS_EXTENDED = np.finfo(EXTENDED).eps < np.finfo(np.float64).eps


@dataclass
class GradCheckReport:
    errors: dict          # parameter name -> max relative error
    seconds: float
    refined: int = 0      # coordinates re-probed in extended precision

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    def by_group(self):
        """Max error per group, where the group drops the layer index."""
        groups = {}
        for name, err in self.errors.items():
            parts = name.split(".")
            if parts[0] == "layers":
                key = "layers.*." + ".".join(parts[2:])
            else:
                key = name
            groups[key] = max(groups.get(key, 0.0), err)
        return groups


def analytic_grads(cfg, params, images, labels):
    leaves = as_leaves(params)
    loss = seg_loss(forward(cfg, leaves, images).logits_map, labels)
    loss.backward()
    return float(loss.data), {k: (t.grad if t.grad is not None else np.zeros_like(params[k]))
                              for k, t in leaves.items()}


def _prober(cfg, params, images, labels, dtype):
    fixed = {k: Tensor(np.asarray(v, dtype=dtype)) for k, v in params.items()}
    size = labels.shape[-2:]

    def probe(name, eps, chunk, indices=None):
        def logits(batch):
            p = dict(fixed)
            p[name] = Tensor(batch)
            with no_grad():
                return bilinear_upsample(forward(cfg, p, images).logits_map, *size).data

        def loss_change(plus, minus):
            return cross_entropy_difference(plus, minus, labels)

        return numeric_grad_batched(logits, fixed[name].data, eps=eps, chunk=chunk,
                                    difference=loss_change, indices=indices)

    return probe


def model_grad_check(cfg, params, images, labels, eps=1e-5, chunk=128, names=None,
                     refine_tol=1e-6):
    """Max relative error of every parameter's gradient (analytic in float64)."""
    start = time.perf_counter()
    params = cast_params(params, np.float64)
    _, grads = analytic_grads(cfg, params, images, labels)
    probe = _prober(cfg, params, images, labels, np.float64)
    wide = None
    errors = {}
    refined = 0
    for name in names or list(params):
        numeric = probe(name, eps, chunk)
        err = relative_errors(grads[name], numeric)
        redo = np.flatnonzero(err > refine_tol)
        if redo.size and HAS_EXTENDED:
            if wide is None:
                wide = _prober(cfg, params, images, labels, EXTENDED)
            better = wide(name, eps, chunk, indices=redo).reshape(-1)
            flat = numeric.reshape(-1)
            flat[redo] = better[redo]
            err = relative_errors(grads[name], flat.reshape(numeric.shape))
            refined += redo.size
        errors[name] = float(err.max()) if err.size else 0.0
    return GradCheckReport(errors, time.perf_counter() - start, refined)


def generic_params(cfg, seed, weight_std=0.2, bias_std=0.1, scale_std=0.1):
    """A random parameter point without the symmetries of the initialisation.

    At the training init (std 0.02, zero biases, unit LN scales) attention is
    nearly uniform and many gradient coordinates sit around 1e-10, below
    what a central difference can resolve; a check there measures roundoff.
    """
    rng = np.random.default_rng([seed, 7])
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            out[name] = 1.0 + rng.normal(0.0, scale_std, shape)
        elif leaf == "beta" or leaf.startswith("b"):
            out[name] = rng.normal(0.0, bias_std, shape)
        else:
            out[name] = rng.normal(0.0, weight_std, shape)
    return out


def tiny_problem(cfg, seed, generic=True):
    """One synthetic image/label pair and float64 parameters for ``cfg``."""
    enc = cfg.encoder
    spec = SyntheticSpec(seed=seed, count=1, image_size=enc.image_size,
                         num_classes=enc.num_classes)
    image, label = gen_synthetic(spec)[0]
    if generic:
        params = generic_params(cfg, seed)
    else:
        params = init_params(cfg, seed=seed, dtype=np.float64)
    return params, image[None], label[None]
