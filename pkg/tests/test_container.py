import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from crowdflow.container import ContainerError, decode_text, encode_text, load_records, save_records


def test_round_trip_and_order(tmp_path):
    rec = {"b": np.arange(6.0).reshape(2, 3), "a": np.array(2.5), "empty": np.zeros((0, 2))}
    save_records(tmp_path / "x.esdf", rec)
    out = load_records(tmp_path / "x.esdf")
    assert list(out) == ["b", "a", "empty"]
    for k in rec:
        np.testing.assert_array_equal(out[k], rec[k])
        assert out[k].shape == rec[k].shape


def test_byte_identical_rewrite(tmp_path):
    rec = {"w": np.linspace(0, 1, 7)}
    save_records(tmp_path / "1.esdf", rec)
    save_records(tmp_path / "2.esdf", load_records(tmp_path / "1.esdf"))
    assert (tmp_path / "1.esdf").read_bytes() == (tmp_path / "2.esdf").read_bytes()


def test_bad_magic_truncation_trailing(tmp_path):
    path = tmp_path / "x.esdf"
    path.write_bytes(b"NOPE")
    with pytest.raises(ContainerError, match="magic"):
        load_records(path)
    save_records(path, {"w": np.ones(4)})
    buf = path.read_bytes()
    path.write_bytes(buf[:-3])
    with pytest.raises(ContainerError, match="truncated"):
        load_records(path)
    path.write_bytes(buf + b"\0")
    with pytest.raises(ContainerError, match="trailing"):
        load_records(path)


@given(st.text(max_size=50))
def test_text_round_trip(s):
    assert decode_text(encode_text(s)) == s


@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=4)))
@settings(max_examples=50, deadline=None)
def test_array_round_trip_bitwise(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("c") / "a.esdf"
    save_records(path, {"x": arr})
    out = load_records(path)["x"]
    assert out.shape == arr.shape
    assert out.tobytes() == np.ascontiguousarray(arr).tobytes()
