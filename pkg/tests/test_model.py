import numpy as np
import pytest

from emra.encoder import preset
from emra.errors import ConfigError
from emra.gradcheck import generic_params, model_grad_check, tiny_problem
from emra.model import (VARIANTS, ModelConfig, SegmentationModel, as_leaves, forward, init_params,
                        param_count, param_shapes)


@pytest.mark.parametrize("variant", VARIANTS)
def test_param_count_closed_form(variant):
    for name in ("tiny", "ti", "s", "b", "l"):
        cfg = ModelConfig(preset(name), variant=variant)
        assert param_count(cfg) == sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def test_allocated_count_matches():
    cfg = ModelConfig(preset("ti"))
    params = init_params(cfg, zeros=True)
    assert sum(v.size for v in params.values()) == param_count(cfg)


def test_init_statistics():
    params = init_params(ModelConfig(preset("tiny")), seed=0)
    w = params["layers.0.mlp.w1"]
    assert abs(w.std() - 0.02) < 0.003 and np.abs(w).max() <= 0.04
    assert np.all(params["layers.0.mlp.b1"] == 0) and np.all(params["final_ln.gamma"] == 1)


def test_bad_variant_and_scale():
    with pytest.raises(ConfigError):
        ModelConfig(variant="both")
    with pytest.raises(ConfigError):
        ModelConfig(logit_scale="huge")


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_shapes(variant, rng):
    cfg = ModelConfig(preset("tiny"), variant=variant)
    model = SegmentationModel.create(cfg, seed=1)
    out = model.logits(rng.integers(0, 256, (2, 32, 32, 3), dtype=np.uint8))
    assert out.logits_map.shape == (2, 16, 16, 4)
    assert out.region_logits.shape == (2, 16, 4)
    assert (out.association is not None) == cfg.uses_hra
    assert (out.gca is not None) == cfg.uses_mca
    probs = model.predict_probs(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
    assert probs.shape == (32, 32, 4)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-5)


def test_float_and_uint8_inputs_agree(rng):
    model = SegmentationModel.create(ModelConfig(preset("tiny")), seed=2)
    img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    a = model.logits(img).logits_map.data
    b = model.logits(img.astype(np.float32) / np.float32(255)).logits_map.data
    np.testing.assert_array_equal(a, b)


def test_probe_batch_matches_loop(rng):
    # a leading axis on one parameter is a batch of models
    cfg = ModelConfig(preset("tiny"))
    params = generic_params(cfg, 0)
    img = rng.integers(0, 256, (1, 32, 32, 3), dtype=np.uint8)
    name = "layers.1.attn.wk"
    stack = params[name] + rng.normal(0, 0.1, (3,) + params[name].shape)
    p = as_leaves(params, False)
    from emra.tensor import Tensor
    p[name] = Tensor(stack)
    batched = forward(cfg, p, img).logits_map.data
    for i in range(3):
        q = dict(params)
        q[name] = stack[i]
        np.testing.assert_allclose(batched[i], forward(cfg, as_leaves(q, False), img).logits_map.data[0],
                                   rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("variant", ["hra", "baseline"])
def test_small_variant_gradcheck(variant):
    cfg = ModelConfig(preset("tiny", depth=2, token_head_depth=1, attn_agg_layers=1), variant=variant)
    params, img, lab = tiny_problem(cfg, 0)
    names = [n for n in params if not n.startswith("layers.0.mlp")]
    report = model_grad_check(cfg, params, img, lab, names=names)
    assert report.max_error <= 1e-5, sorted(report.errors.items(), key=lambda kv: -kv[1])[:3]
