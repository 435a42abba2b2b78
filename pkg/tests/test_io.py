import json

import numpy as np
import pytest

from l2s.checkpoint import Checkpoint, decode, encode, load_checkpoint, save_checkpoint
from l2s.checks import checkpoint_roundtrip, default_constants, ppm_roundtrip
from l2s.config import RunConfig, from_dict, load_config
from l2s.errors import CheckpointError, ConfigError, IoError
from l2s.render import quantize, read_ppm, render_latent, write_ppm


# config

def test_defaults_and_constants():
    cfg = RunConfig()
    assert cfg.sample.steps == 25 and cfg.sample.guidance_scale == 4.5
    ok, detail = default_constants()
    assert ok, detail


def test_hash_is_canonical(tmp_path):
    a = from_dict({"seed": 3, "sample": {"steps": 10}})
    b = from_dict({"sample": {"steps": 10}, "seed": 3})
    assert a.hash == b.hash and len(a.hash) == 16
    assert a.hash != from_dict({"seed": 4, "sample": {"steps": 10}}).hash
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "sample": {"steps": 10}}, indent=4))
    assert load_config(p).hash == a.hash
    assert from_dict({"training": {"lr": 1}}).training.lr == 1.0


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"model": {"d_model": "wide"}},
    {"model": {"n_global_blocks": 3}},
    {"training": {"p_layout": 1.5}},
    {"training": {"batch": 0}},
    {"pipeline": {"length_dist": {"4": 0.5}}},
    {"sample": {"sampler": "euler"}},
    {"sample": {"prompts": ["ok", " "]}},
    {"data": {"frame_counts": [9]}},
    {"seed": True},
    {"sample": 5},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "x.json")


# checkpoint

def make_ckpt():
    g = np.random.default_rng(0)
    return Checkpoint({"model": {"d": 4}, "seed": 1}, 2, 40,
                      {"b": g.normal(size=(3,)).astype(np.float32), "a": g.normal(size=(2, 2)).astype(np.float32)})


def test_checkpoint_roundtrip(tmp_path):
    ok, detail = checkpoint_roundtrip()
    assert ok, detail
    ck = make_ckpt()
    save_checkpoint(tmp_path / "c.l2s", ck)
    back = load_checkpoint(tmp_path / "c.l2s", expected_config=ck.config)
    assert (back.stage, back.step, back.config) == (2, 40, ck.config)
    for k in ck.arrays:
        assert np.array_equal(back.arrays[k], ck.arrays[k])
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_corruption_and_mismatch(tmp_path):
    raw = encode(make_ckpt())
    flipped = bytearray(raw)
    flipped[-12] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        decode(bytes(flipped))
    with pytest.raises(CheckpointError):
        decode(b"XXXX" + raw[4:])
    save_checkpoint(tmp_path / "c.l2s", make_ckpt())
    with pytest.raises(CheckpointError, match="seed"):
        load_checkpoint(tmp_path / "c.l2s", expected_config={"model": {"d": 4}, "seed": 2})
    assert load_checkpoint(tmp_path / "c.l2s", expected_config={"seed": 2}, force=True).step == 40
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.l2s")


# render

def test_quantize():
    x = np.zeros((1, 2, 2, 4))
    assert (quantize(x) == 128).all()
    x[0, 0, 0, 0] = 1.0
    q = quantize(x)
    assert q.max() == 255 and q.min() == 0 and q.shape == (1, 2, 2, 3)
    with pytest.raises(ValueError):
        quantize(np.full((1, 1, 1, 3), np.inf))


def test_ppm_roundtrip_and_names(tmp_path):
    ok, detail = ppm_roundtrip()
    assert ok, detail
    frames = np.random.default_rng(0).normal(size=(2, 4, 4, 4))
    paths = render_latent(frames, tmp_path / "story", scale=3)
    assert [p.name for p in paths] == ["story_f0.ppm", "story_f1.ppm"]
    img = read_ppm(paths[1])
    assert img.shape == (12, 12, 3)
    assert np.array_equal(img[::3, ::3], quantize(frames)[1])


def test_ppm_pixels_that_look_like_whitespace(tmp_path):
    rgb = np.full((2, 3, 3), 32, dtype=np.uint8)
    rgb[0, 0] = [10, 9, 13]
    write_ppm(tmp_path / "w.ppm", rgb)
    assert np.array_equal(read_ppm(tmp_path / "w.ppm"), rgb)
    (tmp_path / "bad.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(IoError):
        read_ppm(tmp_path / "bad.ppm")
