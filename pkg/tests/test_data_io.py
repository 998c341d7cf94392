import os

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stageroute.backbone import BackboneConfig, Routing, build
from stageroute.config import ExperimentConfig
from stageroute.data import (CLASS_INTENSITIES, Dataset, SyntheticSpec,
                             format_metric_row, generate_synthetic,
                             load_checkpoint, load_directory, load_pgm,
                             save_checkpoint, save_pgm, write_metrics_csv)
from stageroute.errors import (CheckpointError, ConfigError, DataError,
                               PGMParseError)


# --------------------------------------------------------------- synthetic

def small_spec(**kw):
    defaults = dict(count=40, size=32, num_classes=4, seed=5)
    defaults.update(kw)
    return SyntheticSpec(**defaults)


def test_synthetic_determinism_bitwise():
    a = generate_synthetic(small_spec())
    b = generate_synthetic(small_spec())
    assert a.splits == b.splits
    for ia, ib in zip(a.images, b.images):
        npt.assert_array_equal(ia, ib)
    for ma, mb in zip(a.masks, b.masks):
        npt.assert_array_equal(ma, mb)


def test_synthetic_zero_noise_gives_exact_base_intensities():
    ds = generate_synthetic(small_spec(noise_std=0.0))
    for img, mask in zip(ds.images, ds.masks):
        expected = np.asarray(CLASS_INTENSITIES)[mask]
        npt.assert_array_equal(img[0], expected)


def test_synthetic_mask_invariants():
    ds = generate_synthetic(small_spec())
    for mask in ds.masks:
        assert (mask == 0).sum() >= 1
        assert mask.max() < 4
        assert mask.min() >= 0


def test_synthetic_class_coverage():
    ds = generate_synthetic(small_spec(count=60))
    for c in range(1, 4):
        present = sum((m == c).any() for m in ds.masks)
        assert present >= 0.05 * len(ds.masks)


def test_synthetic_split_ratios_and_disjointness():
    ds = generate_synthetic(small_spec(count=200))
    assert len(ds.splits["train"]) == 160
    assert len(ds.splits["val"]) == 20
    assert len(ds.splits["test"]) == 20
    everything = ds.splits["train"] + ds.splits["val"] + ds.splits["test"]
    assert sorted(everything) == list(range(200))


def test_synthetic_spec_validation():
    with pytest.raises(ConfigError):
        generate_synthetic(small_spec(count=0))
    with pytest.raises(ConfigError):
        generate_synthetic(small_spec(shapes_min=3, shapes_max=2))
    with pytest.raises(ConfigError):
        generate_synthetic(small_spec(num_classes=9))


# --------------------------------------------------------------------- PGM

def test_pgm_header_hand_case(tmp_path):
    payload = bytes(range(16))
    path = tmp_path / "hand.pgm"
    path.write_bytes(b"P5 4 4 255\n" + payload)
    img = load_pgm(str(path))
    npt.assert_array_equal(img, np.frombuffer(payload, np.uint8).reshape(4, 4))


def test_pgm_comments_and_whitespace_tolerated(tmp_path):
    path = tmp_path / "weird.pgm"
    path.write_bytes(b"P5 # magic\n# a comment line\n  4\t2 # dims\n255\n" + bytes(8))
    img = load_pgm(str(path))
    assert img.shape == (2, 4)


def test_pgm_roundtrip_identity(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(256, 256)).astype(np.uint8)
    path = str(tmp_path / "rt.pgm")
    save_pgm(img, path)
    npt.assert_array_equal(load_pgm(path), img)


@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 64), st.integers(1, 64))))
@settings(max_examples=40, deadline=None)
def test_pgm_roundtrip_property(img):
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "x.pgm")
        save_pgm(img, path)
        npt.assert_array_equal(load_pgm(path), img)


def test_pgm_bad_magic_offset_zero(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P6 2 2 255\n" + bytes(12))
    with pytest.raises(PGMParseError) as err:
        load_pgm(str(path))
    assert err.value.offset == 0


def test_pgm_truncated_payload_names_byte_counts(tmp_path):
    path = tmp_path / "short.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(PGMParseError) as err:
        load_pgm(str(path))
    assert "expected 16 bytes, found 10" in str(err.value)
    assert err.value.offset is not None


def test_pgm_maxval_and_token_errors(tmp_path):
    path = tmp_path / "big.pgm"
    path.write_bytes(b"P5 2 2 65535\n" + bytes(8))
    with pytest.raises(PGMParseError):
        load_pgm(str(path))
    path2 = tmp_path / "junk.pgm"
    path2.write_bytes(b"P5 two 2 255\n" + bytes(4))
    with pytest.raises(PGMParseError):
        load_pgm(str(path2))


def test_save_pgm_rejects_out_of_range(tmp_path):
    with pytest.raises(DataError):
        save_pgm(np.array([[300]]), str(tmp_path / "x.pgm"))
    with pytest.raises(DataError):
        save_pgm(np.array([[-1]]), str(tmp_path / "x.pgm"))
    with pytest.raises(DataError):
        save_pgm(np.ones((2, 2, 2)), str(tmp_path / "x.pgm"))


def test_load_directory_pairs_images_and_masks(tmp_path):
    ds = generate_synthetic(small_spec(count=12, noise_std=0.0))
    img_dir = tmp_path / "images"
    mask_dir = tmp_path / "masks"
    img_dir.mkdir()
    mask_dir.mkdir()
    for i, (img, mask) in enumerate(zip(ds.images, ds.masks)):
        save_pgm(np.rint(img[0] * 255), str(img_dir / f"s{i:03d}.pgm"))
        save_pgm(mask, str(mask_dir / f"s{i:03d}.pgm"))
    loaded = load_directory(str(tmp_path), num_classes=4, seed=5)
    assert len(loaded) == 12
    npt.assert_array_equal(loaded.masks[0], ds.masks[0])
    assert loaded.images[0].max() <= 1.0
    with pytest.raises(DataError):
        load_directory(str(tmp_path / "images"), num_classes=4, seed=5)


# --------------------------------------------------------------- checkpoint

def make_model(seed=0, **kw):
    return build(BackboneConfig(stages=2, base_channels=4, routing=Routing.BOTH,
                                seed=seed, **kw))


def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = make_model()
    cfg_text = ExperimentConfig().to_text()
    path = str(tmp_path / "model.ckpt")
    params = {name: p.data for name, p in model.parameters().items()}
    save_checkpoint(path, cfg_text, params)
    loaded_cfg, loaded_params, opt = load_checkpoint(path)
    assert loaded_cfg == cfg_text
    assert opt is None
    assert list(loaded_params) == list(params)
    for name in params:
        npt.assert_array_equal(loaded_params[name], params[name])
        assert loaded_params[name].dtype == params[name].dtype


def test_checkpoint_forward_bit_identical(tmp_path):
    model = make_model(seed=3)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, ExperimentConfig().to_text(),
                    {n: p.data for n, p in model.parameters().items()})
    _, params, _ = load_checkpoint(path)
    clone = make_model(seed=9)
    clone.load_state(params)
    x = np.random.default_rng(1).standard_normal((1, 1, 8, 8))
    npt.assert_array_equal(model.forward(x).logits.data,
                           clone.forward(x).logits.data)


def test_checkpoint_optimizer_state_roundtrip(tmp_path):
    model = make_model()
    params = {n: p.data for n, p in model.parameters().items()}
    opt = {"step": 17,
           "m": {n: np.full_like(a, 0.25) for n, a in params.items()},
           "v": {n: np.full_like(a, 0.5) for n, a in params.items()}}
    path = str(tmp_path / "opt.ckpt")
    save_checkpoint(path, "x = 1", params, optimizer=opt)
    _, _, loaded = load_checkpoint(path)
    assert loaded["step"] == 17
    for n in params:
        npt.assert_array_equal(loaded["m"][n], opt["m"][n])
        npt.assert_array_equal(loaded["v"][n], opt["v"][n])


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(100))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_checkpoint_truncation_rejected(tmp_path):
    model = make_model()
    path = str(tmp_path / "t.ckpt")
    save_checkpoint(path, "x = 1",
                    {n: p.data for n, p in model.parameters().items()})
    blob = open(path, "rb").read()
    trunc = str(tmp_path / "trunc.ckpt")
    with open(trunc, "wb") as fh:
        fh.write(blob[:len(blob) - 20])
    with pytest.raises(CheckpointError):
        load_checkpoint(trunc)


def test_checkpoint_wrong_version_rejected(tmp_path):
    model = make_model()
    path = str(tmp_path / "v.ckpt")
    save_checkpoint(path, "x = 1",
                    {n: p.data for n, p in model.parameters().items()})
    blob = bytearray(open(path, "rb").read())
    blob[8] = 99  # version byte
    path2 = str(tmp_path / "v2.ckpt")
    open(path2, "wb").write(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path2)


def test_checkpoint_shape_mismatch_on_load_state(tmp_path):
    from stageroute.errors import ShapeError
    model = make_model()
    path = str(tmp_path / "s.ckpt")
    save_checkpoint(path, "x = 1",
                    {n: p.data for n, p in model.parameters().items()})
    _, params, _ = load_checkpoint(path)
    wider = build(BackboneConfig(stages=2, base_channels=8, routing=Routing.BOTH))
    with pytest.raises(ShapeError):
        wider.load_state(params)


def test_checkpoint_write_is_atomic(tmp_path):
    model = make_model()
    path = str(tmp_path / "a.ckpt")
    save_checkpoint(path, "x = 1",
                    {n: p.data for n, p in model.parameters().items()})
    assert os.path.exists(path)
    assert not os.path.exists(path + ".tmp")


# --------------------------------------------------------------------- CSV

def test_metrics_csv_header_only_for_empty_rows(tmp_path):
    path = str(tmp_path / "empty.csv")
    write_metrics_csv([], path)
    content = open(path).read()
    assert content == ("run_id,seed,routing,position,init,epoch,split,"
                       "metric,class,value\n")


def test_metrics_csv_value_formatting_and_determinism(tmp_path):
    row = format_metric_row("r", 0, "skip-only", "full", "zero", 1, "test",
                            "dice", 1, 0.5)
    assert row[-1] == "0.500000"
    p1, p2 = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    write_metrics_csv([row, row], p1)
    write_metrics_csv([row, row], p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_metrics_csv_rejects_malformed_rows(tmp_path):
    with pytest.raises(DataError):
        write_metrics_csv([("too", "short")], str(tmp_path / "x.csv"))
