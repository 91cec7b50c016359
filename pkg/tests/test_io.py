import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from upix.data import gen_synthetic_dataset
from upix.io import (
    MAGIC, CheckpointError, ConfigError, ImageFormatError, checkpoint_bytes, image_bytes, load_checkpoint,
    model_config_from, parse_checkpoint, parse_image, parse_run_config, read_image, save_checkpoint,
    write_dataset, write_image,
)
from upix.model import ModelConfig


def test_checkpoint_round_trip_bitwise(tmp_path, tiny_cfg, tiny_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_cfg, tiny_params)
    blob = path.read_bytes()
    assert blob[:4] == MAGIC == b"UPIX"
    cfg, params = load_checkpoint(path)
    assert cfg == tiny_cfg
    assert set(params) == set(tiny_params)
    for k, v in tiny_params.items():
        assert params[k].shape == v.shape and params[k].tobytes() == v.tobytes()
    # serialization is deterministic
    assert checkpoint_bytes(cfg, params) == blob
    assert not (tmp_path / "m.ckpt.tmp").exists()


@pytest.mark.parametrize("cut", [3, 7, 40, -1, -8])
def test_checkpoint_truncation_refused(tiny_cfg, tiny_params, cut):
    blob = checkpoint_bytes(tiny_cfg, tiny_params)
    with pytest.raises(CheckpointError):
        parse_checkpoint(blob[:cut])


def test_checkpoint_bad_header_and_trailer(tiny_cfg, tiny_params):
    blob = checkpoint_bytes(tiny_cfg, tiny_params)
    with pytest.raises(CheckpointError, match="magic"):
        parse_checkpoint(b"XPIU" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        parse_checkpoint(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(CheckpointError, match="trailing"):
        parse_checkpoint(blob + b"\0")


def test_checkpoint_config_mismatch(tiny_cfg, tiny_params):
    other = ModelConfig(layers=1, dim=24, heads=2, mlp_ratio=2)
    with pytest.raises(ValueError):
        checkpoint_bytes(other, tiny_params)
    # splice the wrong config into a valid blob
    blob = checkpoint_bytes(tiny_cfg, tiny_params)
    old_len = struct.unpack("<I", blob[8:12])[0]
    cfg_json = json.dumps(other.to_dict(), sort_keys=True).encode()
    forged = blob[:8] + struct.pack("<I", len(cfg_json)) + cfg_json + blob[12 + old_len:]
    with pytest.raises(CheckpointError, match="inconsistent"):
        parse_checkpoint(forged)


def test_ppm_header_and_endpoints():
    img = np.array([[[-1.0, 1.0, 0.0], [1.0, 1.0, 1.0]], [[-1.0, -1.0, -1.0], [0.5, -0.5, 2.0]]])
    blob = image_bytes(img)
    assert blob.startswith(b"P6\n2 2\n255\n")
    raster = blob[len(b"P6\n2 2\n255\n"):]
    # 0.0 -> 127.5 rounds half to even -> 128; out-of-range clamps
    assert list(raster[:6]) == [0, 255, 128, 255, 255, 255]
    assert raster[-1] == 255
    back = parse_image(blob)
    assert back[0, 0, 0] == -1.0 and back[0, 0, 1] == 1.0


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5), st.just(3)),
                  elements=st.floats(-1, 1)))
def test_ppm_quantization_bound(img):
    back = parse_image(image_bytes(img))
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1 / 127.5 + 1e-12
    # a second round trip is exact
    assert np.array_equal(parse_image(image_bytes(back)), back)


def test_ppm_comments_and_errors(tmp_path):
    img = np.zeros((1, 2, 3))
    raster = image_bytes(img)[len(b"P6\n2 1\n255\n"):]
    assert parse_image(b"P6 # made by hand\n2 1\n255\n" + raster).shape == (1, 2, 3)
    with pytest.raises(ImageFormatError):
        parse_image(b"P3\n2 1\n255\n" + raster)
    with pytest.raises(ImageFormatError):
        parse_image(b"P6\n2 1\n65535\n" + raster)
    with pytest.raises(ImageFormatError):
        parse_image(b"P6\n2 1\n255\n" + raster[:-1])
    with pytest.raises(ImageFormatError):
        image_bytes(np.zeros((2, 2)))
    write_image(tmp_path / "a.ppm", img)
    assert np.all(read_image(tmp_path / "a.ppm") == 128 / 127.5 - 1.0)


def test_run_config_parsing():
    cfg = parse_run_config("""
        # toy run
        layers = 2
        dim = 32   # width
        lr = 1e-3
        stage_resolutions = 8, 16, 32
        out = runs/a
    """)
    assert cfg == {"layers": 2, "dim": 32, "lr": 1e-3, "stage_resolutions": [8, 16, 32], "out": "runs/a"}
    model = model_config_from(cfg)
    assert model.layers == 2 and model.dim == 32


@pytest.mark.parametrize("text,match", [
    ("layres = 2", "unknown key"),
    ("layers = 2\nlayers = 3", "duplicate"),
    ("layers = two", "cannot parse"),
    ("layers 2", "key = value"),
])
def test_run_config_rejects(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_run_config(text)


def test_invalid_model_fields():
    with pytest.raises(ConfigError):
        model_config_from({"dim": 30, "heads": 4})


def test_write_dataset(tmp_path):
    records = gen_synthetic_dataset(4, 8, 0, tasks={"t2i": 0.5, "edit": 0.5})
    index = write_dataset(tmp_path / "ds", records)
    lines = [json.loads(s) for s in index.read_text().splitlines()]
    assert [e["index"] for e in lines] == [0, 1, 2, 3]
    for entry, rec in zip(lines, records):
        assert entry["caption"].encode() == rec.caption
        assert np.array_equal(read_image(tmp_path / "ds" / entry["target"]), rec.target)
        assert ("condition" in entry) == (rec.condition is not None)
