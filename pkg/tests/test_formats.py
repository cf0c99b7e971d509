import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from radiofm.errors import FormatError
from radiofm.formats import (decode_checkpoint, decode_iq, decode_tensor, encode_checkpoint,
                             encode_iq, encode_tensor, load_checkpoint, read_pgm, save_checkpoint,
                             sidecar_path, write_pgm)


def test_checkpoint_layout_by_hand():
    buf = encode_checkpoint({"ab": np.array([[1.0, 2.0]])})
    expected = (b"RFM1" + struct.pack("<I", 1) + struct.pack("<H", 2) + b"ab" + struct.pack("<B", 2)
                + struct.pack("<2I", 1, 2) + struct.pack("<2d", 1.0, 2.0))
    assert buf == expected


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
                              elements=st.floats(allow_nan=False)), max_size=4))
def test_checkpoint_round_trip(entries):
    out = decode_checkpoint(encode_checkpoint(entries))
    assert list(out) == list(entries)
    for k in entries:
        assert out[k].shape == entries[k].shape
        assert out[k].tobytes() == np.ascontiguousarray(entries[k]).tobytes()


def test_checkpoint_rejects_bad_magic():
    buf = encode_checkpoint({"w": np.ones(3)})
    with pytest.raises(FormatError):
        decode_checkpoint(b"RFM2" + buf[4:])


@pytest.mark.parametrize("cut", [2, 7, 11, 20, -1])
def test_checkpoint_rejects_truncation(cut):
    buf = encode_checkpoint({"w": np.ones(3)})
    with pytest.raises(FormatError):
        decode_checkpoint(buf[:cut])


def test_checkpoint_rejects_trailing_bytes():
    with pytest.raises(FormatError):
        decode_checkpoint(encode_checkpoint({"w": np.ones(1)}) + b"\0")


def test_checkpoint_sidecar(tmp_path):
    path = tmp_path / "m.rfm"
    save_checkpoint(path, {"w": np.arange(4.0)}, {"preset": "vit-tiny"})
    entries, cfg = load_checkpoint(path)
    assert cfg == {"preset": "vit-tiny"}
    assert sidecar_path(path).name == "m.json"
    np.testing.assert_array_equal(entries["w"], np.arange(4.0))


def test_iq_round_trip_and_header():
    rng = np.random.default_rng(0)
    x = (rng.standard_normal(100) + 1j * rng.standard_normal(100)).astype(np.complex64)
    buf = encode_iq(x, 20e6, 2.45e9)
    assert buf[:4] == b"RIQ1" and len(buf) == 4 + 8 + 8 + 8 + 8 * 100
    y, fs, fc = decode_iq(buf)
    assert (fs, fc) == (20e6, 2.45e9)
    assert y.tobytes() == x.tobytes()
    assert struct.unpack("<2f", buf[28:36]) == (x[0].real, x[0].imag)


def test_iq_rejects_truncation():
    buf = encode_iq(np.ones(4, np.complex64), 1e7, 2.4e9)
    with pytest.raises(FormatError):
        decode_iq(buf[:-3])
    with pytest.raises(FormatError):
        decode_iq(b"XXXX" + buf[4:])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=1, max_dims=4, max_side=5),
              elements=st.floats(width=32, allow_nan=False)))
def test_tensor_round_trip(a):
    out = decode_tensor(encode_tensor(a))
    assert out.shape == a.shape and out.tobytes() == a.tobytes()


def test_tensor_rejects_bad_input():
    buf = encode_tensor(np.ones((2, 2), np.float32))
    with pytest.raises(FormatError):
        decode_tensor(buf[:-1])
    with pytest.raises(FormatError):
        decode_tensor(b"RSP0" + buf[4:])


def test_pgm_round_trip(tmp_path):
    grid = np.array([[0, 1, 1], [1, 0, 0]], dtype=np.uint8)
    write_pgm(tmp_path / "g.pgm", grid * 255, scale=False)
    raw = (tmp_path / "g.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "g.pgm"), grid * 255)


def test_pgm_header_bytes_not_eaten(tmp_path):
    # pixel 10 is a newline byte and 32 a space
    img = np.array([[10, 32], [32, 10]], dtype=np.float64)
    write_pgm(tmp_path / "n.pgm", img, scale=False)
    np.testing.assert_array_equal(read_pgm(tmp_path / "n.pgm"), img)


def test_pgm_scaled(tmp_path):
    write_pgm(tmp_path / "s.pgm", np.array([[-1.0, 1.0]]))
    np.testing.assert_array_equal(read_pgm(tmp_path / "s.pgm"), [[0, 255]])
