import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from totem.tensorio import FormatError, MAGIC, dump_records, load_records, read_records, write_records


def test_layout_by_hand():
    data = dump_records({"ab": np.array([[1.0, 2.0]])})
    expected = MAGIC + struct.pack("<I", 1) + struct.pack("<I", 2) + b"ab" + struct.pack("<I", 2)
    expected += struct.pack("<2Q", 1, 2) + struct.pack("<2d", 1.0, 2.0)
    assert data == expected


def test_round_trip_file(tmp_path):
    recs = {"w": np.arange(6.0).reshape(2, 3), "s": np.array(3.5), "e": np.zeros((0, 4)), "ü": np.ones(2)}
    write_records(tmp_path / "c.bin", recs)
    back = read_records(tmp_path / "c.bin")
    assert list(back) == list(recs)
    for k in recs:
        assert back[k].shape == recs[k].shape and np.array_equal(back[k], recs[k])
    assert not (tmp_path / "c.bin.tmp").exists()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4), elements=st.floats(allow_nan=False)))
def test_round_trip_bitwise(arr):
    back = load_records(dump_records({"x": arr}))["x"]
    assert back.tobytes() == np.asarray(arr, order="C").tobytes()


def test_bad_magic():
    with pytest.raises(FormatError, match="magic"):
        load_records(b"NOPE" + bytes(8))


def test_bad_version():
    with pytest.raises(FormatError, match="version"):
        load_records(MAGIC + struct.pack("<I", 9))


@pytest.mark.parametrize("cut", [1, 5, 9, 13, 20, 30])
def test_truncation(cut):
    data = dump_records({"name": np.arange(4.0)})
    with pytest.raises(FormatError):
        load_records(data[: len(data) - cut])
