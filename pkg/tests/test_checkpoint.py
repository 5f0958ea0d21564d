import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from markcl.checkpoint import decode, encode, load_checkpoint, save_checkpoint
from markcl.errors import FormatError, LengthError, UnsupportedVersionError


def test_layout_of_one_tensor():
    raw = encode({"ab": np.array([[1.0, 2.0]], np.float32)})
    expected = (b"MARKCKPT" + struct.pack("<HI", 1, 1) + struct.pack("<H", 2) + b"ab"
                + struct.pack("<BII", 2, 1, 2) + struct.pack("<2f", 1.0, 2.0))
    assert raw == expected


def test_save_load_save_identical(tmp_path, rng):
    tensors = {"kb.block0.weight": rng.normal(size=(3, 4)).astype(np.float32),
               "scalar": np.array(1.5, np.float32), "empty": np.zeros((0, 2), np.float32)}
    save_checkpoint(tensors, tmp_path / "a")
    back = load_checkpoint(tmp_path / "a")
    save_checkpoint(back, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert list(back) == list(tensors)
    assert all(back[k].tobytes() == tensors[k].tobytes() and back[k].shape == tensors[k].shape for k in tensors)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=4)), max_size=5))
def test_round_trip_is_bitwise(tensors):
    back = decode(encode(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == np.ascontiguousarray(tensors[k]).tobytes()


def test_bad_magic():
    with pytest.raises(FormatError, match="magic"):
        decode(b"NOTACKPT" + bytes(6))


def test_version_two():
    with pytest.raises(UnsupportedVersionError):
        decode(b"MARKCKPT" + struct.pack("<HI", 2, 0))


def test_truncation():
    raw = encode({"x": np.ones(5, np.float32)})
    for cut in (4, 10, 16, 20, len(raw) - 1):
        with pytest.raises(FormatError):
            decode(raw[:cut])
    with pytest.raises(LengthError):
        decode(raw + b"\0")


def test_duplicate_names():
    one = struct.pack("<H", 1) + b"x" + struct.pack("<BI", 1, 1) + struct.pack("<f", 1.0)
    with pytest.raises(FormatError, match="duplicate"):
        decode(b"MARKCKPT" + struct.pack("<HI", 1, 2) + one + one)
