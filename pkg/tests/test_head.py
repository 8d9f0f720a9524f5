import numpy as np
import pytest

from emra import hra
from emra.errors import ConfigError, DataError, ShapeError
from emra.head import (DEFAULT_SCALES, fuse, multiscale_infer, seg_loss, sliding_window_infer,
                       upsample_and_classify)
from emra.tensor import Tensor, parameter


def _assoc(hg, wg, stride, rng, scale=3.0):
    sh, sw = stride
    return hra.normalize_associations(Tensor(rng.normal(0, scale, (hg * sh, wg * sw, 9))), (hg, wg), stride)


def brute_force_fuse(q, regions, hg, wg, sh, sw):
    out = np.zeros(q.shape[:2] + (regions.shape[-1],))
    for u in range(q.shape[0]):
        for v in range(q.shape[1]):
            for n in range(9):
                i, j = u // sh + n // 3 - 1, v // sw + n % 3 - 1
                if 0 <= i < hg and 0 <= j < wg:
                    out[u, v] += q[u, v, n] * regions[i * wg + j]
    return out


def test_centre_one_hot_is_blockwise(rng):
    q = np.zeros((8, 8, 9))
    q[..., 4] = 1.0
    amap = hra.AssociationMap(Tensor(q), None, (2, 2), (4, 4))
    regions = rng.standard_normal((4, 3))
    out = fuse(amap, Tensor(regions)).data
    for u in range(8):
        for v in range(8):
            np.testing.assert_array_equal(out[u, v], regions[(u // 4) * 2 + v // 4])


def test_identical_regions(rng):
    v = rng.standard_normal(5)
    out = fuse(_assoc(3, 3, (2, 2), rng), Tensor(np.tile(v, (9, 1)))).data
    np.testing.assert_allclose(out, np.broadcast_to(v, out.shape), atol=1e-14)


def test_two_by_two_oracle(rng):
    amap = _assoc(2, 2, (4, 4), rng)
    regions = rng.standard_normal((4, 6))
    out = fuse(amap, Tensor(regions)).data
    np.testing.assert_allclose(out, brute_force_fuse(amap.q.data, regions, 2, 2, 4, 4), atol=1e-12)


def test_convexity(rng):
    amap = _assoc(4, 3, (2, 3), rng)
    regions = rng.standard_normal((12, 4))
    out = fuse(amap, Tensor(regions)).data
    assert np.all(out >= regions.min(0) - 1e-12) and np.all(out <= regions.max(0) + 1e-12)


def test_fuse_mismatch(rng):
    with pytest.raises(ShapeError):
        fuse(_assoc(2, 2, (2, 2), rng), Tensor(rng.standard_normal((5, 3))))


def test_classify_same_size(rng):
    m = rng.standard_normal((4, 4, 3))
    pred = upsample_and_classify(m, 4, 4)
    e = np.exp(m - m.max(-1, keepdims=True))
    np.testing.assert_allclose(pred.class_probs, e / e.sum(-1, keepdims=True), rtol=1e-14)
    np.testing.assert_array_equal(pred.class_map, m.argmax(-1))


def test_classify_constant_and_ties():
    pred = upsample_and_classify(np.zeros((2, 2, 3)), 6, 6)
    np.testing.assert_allclose(pred.class_probs, 1 / 3)
    assert np.all(pred.class_map == 0)
    with pytest.raises(ConfigError):
        upsample_and_classify(np.zeros((4, 4, 3)), 2, 2)


def test_classify_rows_sum(rng):
    pred = upsample_and_classify(rng.normal(0, 10, (3, 5, 7)), 12, 17)
    np.testing.assert_allclose(pred.class_probs.sum(-1), 1.0, atol=1e-6)


def test_seg_loss_all_ignored():
    x = parameter(np.ones((1, 4, 4, 3)))
    loss = seg_loss(x, np.full((1, 8, 8), 255))
    loss.backward()
    assert float(loss.data) == 0.0 and np.all(x.grad == 0)


def test_seg_loss_margin_and_errors():
    x = np.full((1, 2, 2, 2), -40.0)
    x[..., 1] = 40.0
    assert float(seg_loss(Tensor(x), np.ones((1, 8, 8), dtype=int)).data) < 1e-30
    with pytest.raises(DataError):
        seg_loss(Tensor(x), np.full((1, 8, 8), 2))


def _colour_model(image):
    # a translation-equivariant per-pixel "model"
    z = np.stack([image[..., 0], image[..., 1], 1 - image[..., 2]], -1) * 4
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def test_sliding_window_full_image(rng):
    img = rng.random((16, 16, 3))
    pred = sliding_window_infer(_colour_model, img, 16)
    np.testing.assert_array_equal(pred.class_probs, _colour_model(img))


def test_sliding_window_matches_whole_image(rng):
    img = rng.random((20, 28, 3))
    for threads in (1, 3):
        pred = sliding_window_infer(_colour_model, img, 8, stride=5, threads=threads)
        np.testing.assert_allclose(pred.class_probs, _colour_model(img), atol=1e-5)


def test_sliding_window_constant_and_small(rng):
    img = np.full((10, 13, 3), 0.3)
    assert len(np.unique(sliding_window_infer(_colour_model, img, 4).class_map)) == 1
    small = rng.random((5, 6, 3))
    assert sliding_window_infer(_colour_model, small, 8).class_probs.shape == (5, 6, 3)


def test_multiscale_single_scale_is_sliding(rng):
    img = rng.random((12, 12, 3))
    a = multiscale_infer(_colour_model, img, scales=[1.0], window=8, stride=4)
    b = sliding_window_infer(_colour_model, img, 8, stride=4)
    np.testing.assert_array_equal(a.class_probs, b.class_probs)


def test_multiscale_flip_symmetric(rng):
    half = rng.random((12, 6, 3))
    img = np.concatenate([half, half[:, ::-1]], axis=1)
    probs = multiscale_infer(_colour_model, img, scales=(0.75, 1.0, 1.5), flip=True, window=12).class_probs
    np.testing.assert_allclose(probs, probs[:, ::-1], atol=1e-5)


def test_default_scales():
    assert len(DEFAULT_SCALES) == 6
    with pytest.raises(ConfigError):
        multiscale_infer(_colour_model, np.zeros((4, 4, 3)), scales=())
