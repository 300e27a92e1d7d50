import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sftnet.errors import FormatError
from sftnet.serialize import decode_tensor, encode_tensor, load_tensor, save_tensor


def test_layout_by_hand():
    a = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
    expected = b"SFT1" + bytes([0, 2]) + struct.pack("<II", 1, 3) + struct.pack("<3f", 1, 2, 3)
    assert encode_tensor(a) == expected


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64]),
                  hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5),
                  elements=st.floats(allow_nan=False, width=32)))
def test_round_trip_is_bitwise(a):
    buf = encode_tensor(a)
    back, end = decode_tensor(buf)
    assert end == len(buf)
    assert back.dtype == a.dtype and back.shape == a.shape
    assert back.tobytes() == a.tobytes()
    assert encode_tensor(back) == buf


def test_decode_at_offset():
    a, b = np.arange(3.0), np.ones((2, 2), dtype=np.float32)
    buf = encode_tensor(a) + encode_tensor(b)
    x, pos = decode_tensor(buf)
    y, end = decode_tensor(buf, pos)
    np.testing.assert_array_equal(x, a)
    np.testing.assert_array_equal(y, b)
    assert end == len(buf)


def test_every_truncation_is_a_format_error():
    buf = encode_tensor(np.arange(6.0).reshape(2, 3))
    for cut in range(len(buf)):
        with pytest.raises(FormatError):
            decode_tensor(buf[:cut])


def test_bad_magic_and_dtype_report_offsets():
    with pytest.raises(FormatError, match="offset 0"):
        decode_tensor(b"XXXX" + bytes(10))
    buf = bytearray(encode_tensor(np.zeros(2)))
    buf[4] = 9
    with pytest.raises(FormatError, match="dtype code 9.*offset 4"):
        decode_tensor(bytes(buf))


def test_unsupported_dtype_rejected():
    with pytest.raises(FormatError):
        encode_tensor(np.zeros(3, dtype=np.int32))


def test_file_round_trip_and_trailing_bytes(tmp_path):
    path = tmp_path / "t.sft"
    a = np.random.default_rng(0).standard_normal((3, 4))
    save_tensor(path, a)
    np.testing.assert_array_equal(load_tensor(path), a)
    with open(path, "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_tensor(path)
