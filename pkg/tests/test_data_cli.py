import io
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from emra import config as cfgmod
from emra.cli import main
from emra.dataset import load_dataset, save_dataset
from emra.errors import BadMagicError, ConfigError, DataError, MaxvalError, ShortFileError
from emra.metrics import LabelCodec
from emra.netpbm import decode, encode, load_image, save_image
from emra.render import association_entropy, render_class_attention, render_entropy, render_prediction, to_gray
from emra.synthetic import SyntheticSpec, gen_synthetic


# -- netpbm ---------------------------------------------------------------

def test_two_by_one_p6_bytes():
    data = encode(np.array([[[1, 2, 3], [4, 5, 6]]], dtype=np.uint8))
    assert data == b"P6\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6])
    assert len(data) == 17


@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=2, max_side=7)),
       st.booleans())
def test_roundtrip(pixels, rgb):
    if rgb:
        pixels = np.stack([pixels, 255 - pixels, pixels // 2], -1)
    np.testing.assert_array_equal(decode(encode(pixels)), pixels)


def test_comments_accepted():
    data = b"P5 # comment\n2 # w\n1\n#x\n255\n\x07\x08"
    np.testing.assert_array_equal(decode(data), [[7, 8]])


def test_parse_errors_carry_offsets():
    with pytest.raises(BadMagicError) as e:
        decode(b"P3\n1 1\n255\n0 0 0\n")
    assert e.value.offset == 0
    with pytest.raises(MaxvalError) as e:
        decode(b"P6\n1 1\n65535\n" + b"\0" * 6)
    assert e.value.offset == 7
    with pytest.raises(ShortFileError):
        decode(b"P6\n2 2\n255\n\0\0\0")
    with pytest.raises(ShortFileError):
        decode(b"P6\n2 2")


def test_file_io(tmp_path, rng):
    img = rng.integers(0, 256, (5, 4, 3), dtype=np.uint8)
    path = tmp_path / "a.ppm"
    assert save_image(path, img) == 11 + 60
    np.testing.assert_array_equal(load_image(path), img)


# -- synthetic data ---------------------------------------------------------

def test_synthetic_basics():
    assert gen_synthetic(SyntheticSpec(count=0)) == []
    a = gen_synthetic(SyntheticSpec(seed=3, count=3))
    b = gen_synthetic(SyntheticSpec(seed=3, count=3))
    for (ia, la), (ib, lb) in zip(a, b):
        assert ia.tobytes() == ib.tobytes() and np.array_equal(la, lb)
    assert not np.array_equal(a[0][0], gen_synthetic(SyntheticSpec(seed=4, count=1))[0][0])


@given(st.integers(0, 1000), st.integers(1, 7))
def test_synthetic_labels_in_range(seed, k):
    spec = SyntheticSpec(seed=seed, count=2, image_size=24, num_classes=k)
    codec = LabelCodec().subset(k)
    for img, lab in gen_synthetic(spec):
        assert lab.min() >= 0 and lab.max() < k
        np.testing.assert_array_equal(codec.decode_rgb(codec.encode_rgb(lab)), lab)


def test_synthetic_colours_and_noise():
    img, lab = gen_synthetic(SyntheticSpec(seed=0, count=1, image_size=64))[0]
    palette = LabelCodec().palette.astype(float)
    err = img.astype(float) - palette[lab]
    assert 5 < err.std() < 11


def test_synthetic_spec_errors():
    with pytest.raises(ConfigError):
        SyntheticSpec(num_classes=8)
    with pytest.raises(ConfigError):
        SyntheticSpec(shapes=("triangle",))


def test_dataset_dir(tmp_path):
    pairs = gen_synthetic(SyntheticSpec(count=2, image_size=16))
    save_dataset(tmp_path, pairs)
    back = load_dataset(tmp_path)
    for (a, b), (c, d) in zip(pairs, back):
        np.testing.assert_array_equal(a, c)
        np.testing.assert_array_equal(b, d)
    os.remove(tmp_path / "lbl_0001.pgm")
    save_image(tmp_path / "lbl_0001.ppm", LabelCodec().encode_rgb(pairs[1][1]))
    np.testing.assert_array_equal(load_dataset(tmp_path)[1][1], pairs[1][1])
    os.remove(tmp_path / "lbl_0001.ppm")
    with pytest.raises(DataError):
        load_dataset(tmp_path)


# -- rendering --------------------------------------------------------------

def test_render_water():
    out = render_prediction(np.full((3, 4), 3))
    assert np.all(out == np.array([0, 0, 255], dtype=np.uint8))


def test_render_roundtrip(rng):
    m = rng.integers(0, 7, (5, 5))
    np.testing.assert_array_equal(LabelCodec().decode_rgb(render_prediction(m)), m)


def test_entropy_one_hot_and_uniform():
    q = np.zeros((4, 4, 9))
    q[..., 2] = 1.0
    assert np.all(render_entropy(q) == 0)
    np.testing.assert_allclose(association_entropy(np.full((2, 9), 1 / 9)), 1.0, rtol=1e-14)
    assert np.all(render_entropy(np.full((2, 2, 9), 1 / 9)) == 255)


def test_class_attention_maps(rng):
    maps = render_class_attention(rng.random((3, 16)), 4, cell=2)
    assert len(maps) == 3 and maps[0].shape == (8, 8) and all(m.max() == 255 for m in maps)
    assert to_gray([0.0, 0.5, 1.0]).tolist() == [0, 128, 255]


# -- config -----------------------------------------------------------------

def test_config_fixed_point():
    text = cfgmod.dumps(cfgmod.RunConfig())
    again = cfgmod.dumps(cfgmod.loads(text))
    assert text == again


@given(st.integers(1, 500), st.floats(1e-6, 1.0), st.booleans(), st.sampled_from(["full", "mca", "hra"]),
       st.lists(st.floats(0.25, 2.0), min_size=1, max_size=4))
def test_config_fixed_point_random(epochs, lr, flip, variant, scales):
    run = cfgmod.RunConfig()
    run.train.epochs, run.train.base_lr, run.infer.flip = epochs, lr, flip
    run.model.variant, run.infer.scales = variant, tuple(scales)
    text = cfgmod.dumps(run)
    parsed = cfgmod.loads(text)
    assert parsed == run and cfgmod.dumps(parsed) == text


def test_config_errors():
    with pytest.raises(ConfigError, match="line 2"):
        cfgmod.loads("train.epochs = 3\nencoder.dpeth = 4\n")
    with pytest.raises(ConfigError):
        cfgmod.loads("train.epochs = three\n")
    with pytest.raises(ConfigError):
        cfgmod.loads("just text\n")


def test_config_preset_switch():
    run = cfgmod.loads("# pick a backbone\nmodel.name = s\n")
    assert run.encoder.embed_dim == 384 and run.model_config().encoder.num_heads == 6


# -- command line -----------------------------------------------------------

def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


def test_cli_usage():
    code, _, err = run_cli()
    assert code == 1 and "usage" in err
    assert run_cli("frobnicate")[0] == 1
    assert run_cli("train", "--bogus")[0] == 1


def test_cli_missing_data(tmp_path):
    code, _, err = run_cli("train", "--data", str(tmp_path / "nope"))
    assert code == 2 and "does not exist" in err


def test_cli_bad_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("train.epohcs = 3\n")
    assert run_cli("train", "--config", str(path))[0] == 1


def test_cli_pipeline(tmp_path):
    data, out, ckpt = tmp_path / "data", tmp_path / "out", tmp_path / "m.ckpt"
    cfg = tmp_path / "run.cfg"
    cfg.write_text("data.count = 3\ndata.image_size = 32\ntrain.batch_size = 3\ntrain.base_lr = 0.03\n")
    common = ["--config", str(cfg), "--data", str(data), "--checkpoint", str(ckpt), "--out", str(out)]
    assert run_cli("gen-data", "--config", str(cfg), "--out", str(data))[0] == 0
    code, text, _ = run_cli("train", *common, "--epochs", "2")
    assert code == 0 and "epoch=1" in text
    code, text, _ = run_cli("train", *common, "--epochs", "3", "--resume")
    assert code == 0 and "epoch=2" in text and "epoch=0" not in text
    code, text, _ = run_cli("eval", *common)
    assert code == 0 and "mIoU=" in text
    assert (out / "metrics.txt").read_text().startswith("miou=")
    code, text, _ = run_cli("infer", *common, "--input", str(data / "img_0000.ppm"), "--flip",
                            "--scales", "0.75,1")
    assert code == 0 and load_image(out / "img_0000_pred.ppm").shape == (32, 32, 3)
    code, text, _ = run_cli("export-maps", *common, "--input", str(data / "img_0001.ppm"))
    assert code == 0
    # the association map lives at the logits-map resolution (stride 4 per 8-px cell)
    assert load_image(out / "img_0001_hsmf_entropy.pgm").shape == (16, 16)
    assert (out / "img_0001_gca_building.pgm").exists()


def test_cli_numeric_failure(tmp_path):
    data = tmp_path / "data"
    assert run_cli("gen-data", "--out", str(data), "--seed", "1")[0] == 0
    cfg = tmp_path / "hot.cfg"
    cfg.write_text("encoder.image_size = 48\ntrain.base_lr = 1e30\ntrain.epochs = 3\n")
    with np.errstate(all="ignore"):
        code, _, err = run_cli("train", "--config", str(cfg), "--data", str(data),
                               "--checkpoint", str(tmp_path / "m.ckpt"))
    assert code == 3 and "non-finite" in err


def test_cli_gradcheck_seed_7():
    code, text, _ = run_cli("gradcheck", "--seed", "7")
    assert code == 0, text
    last = text.strip().splitlines()[-1]
    assert last.startswith("max_rel_error=") and "PASS" in last
    assert float(last.split()[0].split("=")[1]) <= 1e-5
    assert "layers.*.attn.wq" in text
