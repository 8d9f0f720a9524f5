"""Region association (HRA path) and class attention (MCA path)."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from emra import hra, mca
from emra.encoder import EncodeOutput, preset
from emra.errors import ConfigError, ShapeError
from emra.tensor import Tensor, grad_check, masked_softmax


# -- association --------------------------------------------------------

def _grid_params(d, stride, rng, scale=0.3):
    sh, sw = stride
    return {
        "hra.dw.kernel": Tensor(rng.normal(0, scale, (3, 3, d))),
        "hra.dw.bias": Tensor(rng.normal(0, scale, d)),
        "hra.pw.w": Tensor(rng.normal(0, scale, (d, sh * sw * 9))),
        "hra.pw.b": Tensor(rng.normal(0, scale, sh * sw * 9)),
    }


def test_token_head_shape_and_range(rng):
    cfg = preset("tiny")
    enc = EncodeOutput(tokens_in=None, tokens=[Tensor(rng.random((20, 32))) for _ in range(4)])
    assert hra.token_head(enc, 2, cfg).shape == (4, 4, 32)
    np.testing.assert_array_equal(hra.token_head(enc, 4, cfg).data.reshape(16, 32), enc.tokens[3].data[4:])
    with pytest.raises(ConfigError):
        hra.token_head(enc, 5, cfg)


def test_conv_module_zero_params(rng):
    p = {k: Tensor(np.zeros(s)) for k, s in hra.conv_param_shapes(preset("tiny")).items()}
    out = hra.conv_module(Tensor(rng.random((4, 4, 32))), p, (4, 4))
    assert out.shape == (16, 16, 9)
    np.testing.assert_array_equal(out.data, 0.0)


def test_conv_module_unpacking(rng):
    d, stride = 3, (2, 3)
    p = _grid_params(d, stride, rng)
    grid = Tensor(rng.random((2, 2, d)))
    out = hra.conv_module(grid, p, stride).data
    from emra.tensor import depthwise_conv3x3, pointwise_conv1x1
    raw = pointwise_conv1x1(depthwise_conv3x3(grid, p["hra.dw.kernel"], p["hra.dw.bias"]),
                            p["hra.pw.w"], p["hra.pw.b"]).data
    for i in range(2):
        for j in range(2):
            for dy in range(2):
                for dx in range(3):
                    ch = (dy * 3 + dx) * 9
                    np.testing.assert_array_equal(out[i * 2 + dy, j * 3 + dx], raw[i, j, ch:ch + 9])


def test_conv_module_channel_mismatch(rng):
    p = _grid_params(4, (2, 2), rng)
    with pytest.raises(ConfigError):
        hra.conv_module(Tensor(rng.random((2, 2, 4))), p, (4, 4))


def test_single_cell_grid_only_centre():
    mask = hra.neighbor_mask(1, 1, (2, 2))
    assert mask.shape == (2, 2, 9)
    assert np.all(mask[..., 4]) and not np.any(np.delete(mask, 4, axis=-1))


def test_uniform_logits():
    amap = hra.normalize_associations(Tensor(np.zeros((12, 12, 9))), (3, 3), (4, 4))
    q = amap.q.data
    np.testing.assert_allclose(q[5, 5], 1 / 9, rtol=1e-15)          # interior cell
    corner = q[0, 0]
    np.testing.assert_allclose(corner[[4, 5, 7, 8]], 0.25, rtol=1e-15)
    assert np.all(corner[[0, 1, 2, 3, 6]] == 0.0)
    edge = q[0, 5]                                                   # top edge cell
    np.testing.assert_allclose(edge[3:], 1 / 6, rtol=1e-15)
    assert np.all(edge[:3] == 0.0)


def test_normalize_shape_error():
    with pytest.raises(ShapeError):
        hra.normalize_associations(Tensor(np.zeros((8, 8, 9))), (3, 3), (4, 4))


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_tessellation(hg, wg, sh, sw, seed):
    r = np.random.default_rng(seed)
    logits = Tensor(r.normal(0, 5, (hg * sh, wg * sw, 9)))
    amap = hra.normalize_associations(logits, (hg, wg), (sh, sw))
    q = amap.q.data
    np.testing.assert_allclose(q.sum(-1), 1.0, atol=1e-6)
    assert np.all(q[~amap.valid_mask] == 0.0)
    assert np.all(q[amap.valid_mask] > 0.0)


def test_masked_softmax_gradient(rng):
    mask = hra.neighbor_mask(2, 2, (2, 2))
    c = rng.standard_normal((4, 4, 9))

    def f(x):
        return (masked_softmax(x, mask) * c).sum()

    x0 = rng.standard_normal((4, 4, 9))
    assert grad_check(f, x0) <= 1e-5
    leaf = Tensor(x0, requires_grad=True)
    f(leaf).backward()
    assert np.all(leaf.grad[~mask] == 0.0)


def test_translation_consistency(rng):
    # identical token features everywhere: interior cells get identical blocks
    d, stride = 4, (2, 2)
    p = _grid_params(d, stride, rng)
    grid = Tensor(np.broadcast_to(rng.random(d), (5, 5, d)).copy())
    q = hra.normalize_associations(hra.conv_module(grid, p, stride), (5, 5), stride).q.data
    block = q[2:4, 2:4]
    for i in range(1, 4):
        for j in range(1, 4):
            np.testing.assert_allclose(q[2 * i:2 * i + 2, 2 * j:2 * j + 2], block, rtol=1e-12)


# -- class attention ------------------------------------------------------

def _stochastic(rng, shape):
    a = rng.random(shape)
    return a / a.sum(-1, keepdims=True)


def test_aggregate_mean_and_range(rng):
    atts = [Tensor(_stochastic(rng, (2, 3, 6, 6))) for _ in range(4)]
    enc = EncodeOutput(tokens_in=None, attentions=atts)
    np.testing.assert_allclose(mca.aggregate_attention(enc, 1).data, atts[-1].data.mean(-3), rtol=1e-15)
    agg = mca.aggregate_attention(enc, 3).data
    ref = np.mean([a.data.mean(-3) for a in atts[1:]], axis=0)
    np.testing.assert_allclose(agg, ref, rtol=1e-14)
    np.testing.assert_allclose(agg.sum(-1), 1.0, atol=1e-6)
    for bad in (0, 5):
        with pytest.raises(ConfigError):
            mca.aggregate_attention(enc, bad)


def test_split_blocks(rng):
    agg = rng.random((23, 23))
    ctp, aff = mca.split_attention(agg, 7, 16)
    assert ctp.shape == (7, 16) and aff.shape == (16, 16)
    for c in range(7):
        for e in range(16):
            assert ctp[c, e] == agg[c, 7 + e]
    for a in range(16):
        for b in range(16):
            assert aff[a, b] == agg[7 + a, 7 + b]
    ctp, aff = mca.split_attention(agg[:16, :16], 0, 16)
    assert ctp.shape == (0, 16) and np.array_equal(aff, agg[:16, :16])


def test_refine_identity_and_zero_steps(rng):
    ctp = Tensor(rng.random((3, 5)))
    assert mca.refine_with_affinity(ctp, Tensor(rng.random((5, 5))), 0) is ctp
    for steps in (1, 2, 3):
        out = mca.refine_with_affinity(ctp, Tensor(np.eye(5)), steps).data
        np.testing.assert_array_equal(out, ctp.data)
    with pytest.raises(ConfigError):
        mca.refine_with_affinity(ctp, Tensor(np.eye(5)), -1)


def test_refine_hand_case():
    ctp = np.array([[0.2, 0.6]])
    aff = np.array([[0.7, 0.1], [0.3, 0.5]])
    s = (aff + aff.T) / 2                   # [[0.7, 0.2], [0.2, 0.5]]
    n = s / s.sum(1, keepdims=True)
    want = [0.2 * n[0, 0] + 0.6 * n[0, 1], 0.2 * n[1, 0] + 0.6 * n[1, 1]]
    out = mca.refine_with_affinity(Tensor(ctp), Tensor(aff), 1).data[0]
    np.testing.assert_allclose(out, want, atol=1e-12)
    np.testing.assert_allclose(out, [0.2 * 7 / 9 + 0.6 * 2 / 9, 0.2 * 2 / 7 + 0.6 * 5 / 7], atol=1e-12)


def test_refine_non_negative(rng):
    out = mca.refine_with_affinity(Tensor(rng.random((4, 9))), Tensor(rng.random((9, 9))), 2).data
    assert np.all(out >= 0)


def test_region_logits_transpose(rng):
    refined = Tensor(rng.random((7, 16)))
    out = mca.region_class_logits(refined, "raw").data
    assert out.shape == (16, 7)
    for s in range(16):
        for c in range(7):
            assert out[s, c] == refined.data[c, s]
    np.testing.assert_array_equal(out.T, refined.data)


def test_region_logits_patch_scale(rng):
    refined = Tensor(rng.random((2, 7, 16)))
    np.testing.assert_allclose(mca.region_class_logits(refined).data,
                               16 * refined.data.swapaxes(-1, -2), rtol=1e-15)
    with pytest.raises(ConfigError):
        mca.region_class_logits(refined, "softmax")


def test_region_logits_differentiable(rng):
    atts = rng.random((4, 2, 10, 10))

    def f(x):
        enc = EncodeOutput(tokens_in=None, attentions=[x[i] for i in range(4)])
        g = mca.gca_map(enc, preset("tiny", image_size=16, num_classes=6, attn_agg_layers=2), 1)
        return (g.region_logits * g.region_logits).sum()

    assert grad_check(f, atts) <= 1e-5
