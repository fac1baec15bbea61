"""Binary tensor record format and manifest round trips."""

import io
import struct

import numpy as np
import pytest

from graphskip.errors import ManifestError
from graphskip.serialization import (load_tensors, read_manifest, read_record,
                                     save_tensors, write_manifest, write_record)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(), (4,), (2, 3), (2, 3, 4), (1, 2, 3, 4)])
def test_roundtrip_shapes_dtypes(tmp_path, dtype, shape):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal(shape).astype(dtype)
    path = tmp_path / "one.atns"
    save_tensors(path, [arr])
    (back,) = load_tensors(path)
    assert back.dtype == np.dtype(dtype)
    np.testing.assert_array_equal(back, arr)


def test_exact_byte_layout():
    arr = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], dtype=np.float32)
    buf = io.BytesIO()
    write_record(buf, arr)
    want = (b"ATNS" + struct.pack("<BBI", 1, 0, 2)
            + struct.pack("<QQ", 2, 3) + arr.astype("<f4").tobytes())
    assert buf.getvalue() == want


def test_multi_record_order(tmp_path):
    rng = np.random.default_rng(1)
    arrays = [rng.standard_normal(s).astype(np.float64)
              for s in [(3,), (2, 2), (1, 4)]]
    path = tmp_path / "many.atns"
    save_tensors(path, arrays)
    for got, want in zip(load_tensors(path), arrays):
        np.testing.assert_array_equal(got, want)


def test_bad_magic():
    with pytest.raises(ManifestError):
        read_record(io.BytesIO(b"NOPE" + b"\x00" * 10))


def test_bad_version():
    buf = io.BytesIO(b"ATNS" + struct.pack("<BBI", 9, 0, 0))
    with pytest.raises(ManifestError):
        read_record(buf)


def test_bad_dtype_code():
    buf = io.BytesIO(b"ATNS" + struct.pack("<BBI", 1, 7, 0))
    with pytest.raises(ManifestError):
        read_record(buf)


def test_rank_limit():
    buf = io.BytesIO(b"ATNS" + struct.pack("<BBI", 1, 0, 12))
    with pytest.raises(ManifestError):
        read_record(buf)


def test_truncated_payload():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = io.BytesIO()
    write_record(buf, arr)
    clipped = io.BytesIO(buf.getvalue()[:-4])
    with pytest.raises(ManifestError):
        read_record(clipped)


def test_integer_array_rejected():
    with pytest.raises(ManifestError):
        write_record(io.BytesIO(), np.arange(4))


def test_manifest_roundtrip_and_stability(tmp_path):
    payload = {"b": 2, "a": {"y": [1, 2], "x": "s"}}
    p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
    write_manifest(p1, payload)
    write_manifest(p2, {"a": {"x": "s", "y": [1, 2]}, "b": 2})
    assert p1.read_bytes() == p2.read_bytes()
    assert read_manifest(p1) == payload


def test_missing_manifest_raises(tmp_path):
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "absent.json")
