"""HIDE1 checkpoint container: round trips and malformed-input errors."""

import struct

import numpy as np
import pytest

from hidecl.container import MAGIC, ContainerError, load_container, save_container


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    entries = {
        "prompt/1/0": rng.normal(size=(20, 64)).astype(np.float32),
        "stats/u/3/mean": rng.normal(size=64),
        "scalarish": np.array([4.0]),
        "heads/psi/w": rng.normal(size=(64, 100)),
    }
    path = tmp_path / "state.hide"
    save_container(path, entries)
    back = load_container(path)
    assert set(back) == set(entries)
    for name, arr in entries.items():
        assert back[name].dtype == arr.dtype
        np.testing.assert_array_equal(back[name], arr)


def test_bytes_deterministic(tmp_path):
    entries = {"b": np.ones(3), "a": np.zeros((2, 2), dtype=np.float32)}
    p1, p2 = tmp_path / "one", tmp_path / "two"
    save_container(p1, entries)
    save_container(p2, dict(reversed(list(entries.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_magic_and_layout(tmp_path):
    path = tmp_path / "x.hide"
    save_container(path, {"v": np.array([1.0, 2.0], dtype=np.float32)})
    raw = path.read_bytes()
    assert raw.startswith(MAGIC)
    name_len = struct.unpack_from("<I", raw, 5)[0]
    assert raw[9:9 + name_len] == b"v"
    code, rank = struct.unpack_from("<BB", raw, 9 + name_len)
    assert (code, rank) == (0, 1)


def test_missing_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"NOPE!")
    with pytest.raises(ContainerError) as exc:
        load_container(path)
    assert exc.value.offset == 0


def test_truncated_data_reports_offset(tmp_path):
    path = tmp_path / "trunc"
    save_container(path, {"v": np.arange(8, dtype=np.float64)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(ContainerError) as exc:
        load_container(path)
    assert "truncated data" in str(exc.value)
    assert exc.value.offset > 0


def test_unknown_dtype_code(tmp_path):
    path = tmp_path / "code"
    body = MAGIC + struct.pack("<I", 1) + b"v" + struct.pack("<BB", 7, 0)
    path.write_bytes(body)
    with pytest.raises(ContainerError, match="dtype code"):
        load_container(path)


def test_non_float_input_upcast(tmp_path):
    path = tmp_path / "ints"
    save_container(path, {"counts": np.array([1, 2, 3])})
    back = load_container(path)
    assert back["counts"].dtype == np.float64
    np.testing.assert_array_equal(back["counts"], [1.0, 2.0, 3.0])
