import struct

import numpy as np
import pytest

from attncap import checkpoint as ckpt_io
from attncap.errors import FormatError, UnsupportedVersionError
from attncap.pnm import read_pgm, read_ppm, write_pgm, write_ppm
from attncap.train import build_model, load_model, save_model

from conftest import tiny_config


def _sample():
    rng = np.random.default_rng(0)
    return ckpt_io.Checkpoint(
        {"b": 1, "a": [1, 2]}, 7, {"state": 3},
        {"w": rng.normal(size=(2, 3)), "s": np.array(1.5), "e": np.zeros((0, 4))},
    )


def test_roundtrip_is_bit_exact():
    ck = _sample()
    back = ckpt_io.loads(ckpt_io.dumps(ck))
    assert back.config == ck.config and back.epoch == 7 and back.rng_state == ck.rng_state
    for name, values in ck.tensors.items():
        assert back.tensors[name].shape == values.shape
        assert back.tensors[name].tobytes() == values.tobytes()


def test_layout_starts_with_magic_and_version():
    raw = ckpt_io.dumps(_sample())
    assert raw[:4] == b"ATNC"
    assert struct.unpack("<I", raw[4:8])[0] == 1


def test_every_truncation_is_a_format_error():
    raw = ckpt_io.dumps(_sample())
    for cut in range(len(raw)):
        with pytest.raises(FormatError):
            ckpt_io.loads(raw[:cut])


def test_trailing_bytes_and_bad_magic():
    raw = ckpt_io.dumps(_sample())
    with pytest.raises(FormatError):
        ckpt_io.loads(raw + b"\0")
    with pytest.raises(FormatError):
        ckpt_io.loads(b"XXXX" + raw[4:])


def test_version_bump_is_unsupported():
    raw = ckpt_io.dumps(_sample())
    bumped = raw[:4] + struct.pack("<I", 2) + raw[8:]
    with pytest.raises(UnsupportedVersionError, match="version 2"):
        ckpt_io.loads(bumped)


def test_model_roundtrip_bitwise(tmp_path, vocab):
    for kind in ("attention", "vanilla"):
        config = tiny_config(model=kind, param_seed=4)
        model = build_model(config, vocab)
        path = tmp_path / f"{kind}.ckpt"
        save_model(path, model, config, vocab, epoch=3)
        loaded = load_model(path)
        assert loaded.config == config and loaded.epoch == 3
        for name, p in model.parameters().items():
            assert loaded.model.parameters()[name].data.tobytes() == p.data.tobytes()
        assert not list(tmp_path.glob("*.tmp"))


def test_model_shape_mismatch_rejected(tmp_path, vocab):
    config = tiny_config()
    model = build_model(config, vocab)
    path = tmp_path / "m.ckpt"
    save_model(path, model, config, vocab)
    ck = ckpt_io.load(path)
    ck.tensors["output.bias"] = np.zeros(3)
    ckpt_io.save(path, ck)
    with pytest.raises(FormatError, match="output.bias"):
        load_model(path)


def test_ppm_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    rgb = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    gray = rng.integers(0, 256, size=(4, 6), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", rgb)
    write_pgm(tmp_path / "a.pgm", gray)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), rgb)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), gray)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n6 4\n255\n")


def test_ppm_header_with_comments_and_spacing(tmp_path):
    raster = bytes(range(12))
    (tmp_path / "c.ppm").write_bytes(b"P6 # made by hand\n2\t2 # size\n255\n" + raster)
    assert read_ppm(tmp_path / "c.ppm").tobytes() == raster


@pytest.mark.parametrize("blob", [
    b"P3\n1 1\n255\n\0\0\0",
    b"P6\n1 1\n65535\n\0\0\0\0\0\0",
    b"P6\n1 1\n255\n\0\0",
    b"P6\n1 1\n255\n\0\0\0\0",
    b"P6\n1 x\n255\n\0\0\0",
    b"P6\n0 1\n255\n",
    b"P6\n1 1",
])
def test_malformed_ppm(tmp_path, blob):
    (tmp_path / "bad.ppm").write_bytes(blob)
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "bad.ppm")


def test_pgm_rejects_ppm(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.zeros((2, 2, 3), dtype=np.uint8))
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "a.ppm")
