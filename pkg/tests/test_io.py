import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lecln.config import ConfigError, RunConfig, dump_config, load_config, parse_config
from lecln.nn import AdamState
from lecln.tensorio import (ConfigHashMismatch, TensorFormatError, decode, encode, load_checkpoint, read_tensor,
                            save_checkpoint, write_tensor)

shapes = st.lists(st.integers(0, 4), min_size=0, max_size=4)


def build(shape, values, dtype):
    n = int(np.prod(shape)) if shape else 1
    return np.resize(np.asarray(values or [0.0], dtype=dtype), n).reshape(shape)


@settings(max_examples=40, deadline=None)
@given(shapes, st.lists(st.floats(width=32, allow_nan=False), max_size=60))
def test_real_round_trip_exact(shape, values):
    arr = build(shape, values, np.float32)
    out = decode(encode(arr))
    assert out.dtype == np.float32 and out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


@settings(max_examples=40, deadline=None)
@given(shapes, st.lists(st.complex_numbers(width=64, allow_nan=False), max_size=60))
def test_complex_round_trip_exact(shape, values):
    arr = build(shape, values, np.complex64)
    out = decode(encode(arr))
    assert out.dtype == np.complex64 and out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


def test_header_layout_little_endian():
    buf = encode(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert buf[:4] == b"LECL"
    assert struct.unpack("<HH", buf[4:8]) == (1, 2)
    assert struct.unpack("<II", buf[8:16]) == (2, 3)
    assert struct.unpack("<H", buf[16:18]) == (0,)
    assert struct.unpack("<6f", buf[18:]) == (0, 1, 2, 3, 4, 5)
    c = encode(np.array([1 + 2j], dtype=np.complex64))
    assert struct.unpack("<H", c[12:14]) == (1,)
    assert struct.unpack("<2f", c[14:]) == (1.0, 2.0)


def test_float64_stored_as_float32():
    out = decode(encode(np.array([1 / 3])))
    assert out.dtype == np.float32 and out[0] == np.float32(1 / 3)


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "version"),
    (lambda b: b[:-4], "payload"),
    (lambda b: b[:12] + struct.pack("<H", 7) + b[14:], "dtype"),
])
def test_format_errors(mutate, msg):
    with pytest.raises(TensorFormatError, match=msg):
        decode(mutate(encode(np.ones(2, dtype=np.float32))))


def test_file_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
    write_tensor(tmp_path / "x.lecl", x)
    np.testing.assert_array_equal(read_tensor(tmp_path / "x.lecl"), x)


def test_checkpoint_round_trip_and_hash(tmp_path):
    params = {"w": torch.randn(3, 2), "b": torch.zeros(3)}
    adam = AdamState.zeros_like(list(params.values()))
    adam.t = 4
    save_checkpoint(tmp_path, params, config_hash="abc", epoch=7, adam=adam, extra={"note": 1})
    ck = load_checkpoint(tmp_path, expect_hash="abc")
    assert ck["epoch"] == 7 and ck["extra"] == {"note": 1} and ck["adam"].t == 4
    np.testing.assert_array_equal(ck["params"]["w"], params["w"].numpy())
    with pytest.raises(ConfigHashMismatch):
        load_checkpoint(tmp_path, expect_hash="def")


def test_config_defaults_and_overrides():
    cfg = parse_config("[run]\nseed = 5\n[system]\nN_s = 32\n[eval]\nsnr_points_db = (0, 6)\n")
    assert cfg.seed == 5
    assert cfg.system.N_s == 32
    assert cfg.eval.snr_points_db == (0, 6)
    assert set(cfg.overrides()) == {"seed", "system.N_s", "eval.snr_points_db"}
    assert RunConfig().overrides() == []


def test_config_dump_round_trip():
    cfg = parse_config("[train]\nepochs = 10\nmilestones = (4, 8)\n[scene]\nbuildings = false\n")
    again = parse_config(dump_config(cfg))
    assert again == cfg
    assert again.hash() == cfg.hash()
    assert cfg.hash() != RunConfig().hash()


@pytest.mark.parametrize("text", [
    "[system]\nbogus = 1\n",
    "[nosuch]\nx = 1\n",
    "[run]\nother = 2\n",
    "[system]\nN_t = abc\n",
    "[train]\nepochs = 10\nmilestones = (20,)\n",
    "not an ini",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "none.ini"))
    assert load_config(None) == RunConfig()
