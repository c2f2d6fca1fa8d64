"""Checkpoint container round-trips and byte-level layout.

Oracle: an independent struct-based parser of the documented layout, so the
writer is checked against the format description rather than against the
package's own reader.
"""

import json
import struct

import numpy as np
import pytest

from flowgen import load_checkpoint, save_checkpoint
from flowgen.util import ContractError


def parse_container(buf: bytes):
    """Reference parser: little-endian FGCK layout."""
    assert buf[:4] == b"FGCK"
    version, count = struct.unpack_from("<II", buf, 4)
    off = 12
    entries = {}
    order = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        entries[name] = arr
        order.append(name)
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off:off + mlen].decode("utf-8"))
    off += mlen
    assert off == len(buf)
    return version, order, entries, meta


def test_roundtrip_bytes_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "w": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=4).astype(np.float32),
        "scalar": np.float32(2.5),
    }
    meta = {"step": 7, "config_hash": "abc"}
    path = tmp_path / "ckpt.fgck"
    save_checkpoint(path, arrays, meta)
    loaded, meta_out = load_checkpoint(path)
    assert meta_out == meta
    assert set(loaded) == set(arrays)
    np.testing.assert_array_equal(loaded["w"], arrays["w"])
    np.testing.assert_array_equal(loaded["b"], arrays["b"])
    assert loaded["scalar"].shape == ()
    assert loaded["w"].dtype == np.float32


def test_layout_matches_reference_parser(tmp_path):
    arrays = {"z": np.arange(6, dtype=np.float32).reshape(2, 3),
              "a": np.ones(2, dtype=np.float32)}
    path = tmp_path / "c.fgck"
    save_checkpoint(path, arrays, {"k": 1})
    version, order, entries, meta = parse_container(path.read_bytes())
    assert version == 1
    assert order == ["a", "z"]  # sorted for byte determinism
    np.testing.assert_array_equal(entries["z"], arrays["z"])
    assert meta == {"k": 1}


def test_identical_state_serializes_to_identical_bytes(tmp_path):
    arrays = {"b": np.zeros(3, dtype=np.float32), "a": np.ones(2, dtype=np.float32)}
    p1, p2 = tmp_path / "one.fgck", tmp_path / "two.fgck"
    save_checkpoint(p1, dict(reversed(list(arrays.items()))), {"s": 1})
    save_checkpoint(p2, arrays, {"s": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "c.fgck"
    save_checkpoint(path, {"w": np.ones(5, dtype=np.float32)}, {})
    whole = path.read_bytes()
    for cut in (3, 10, len(whole) - 2):
        path.write_bytes(whole[:cut])
        with pytest.raises(ContractError, match="truncated|bad magic"):
            load_checkpoint(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "c.fgck"
    save_checkpoint(path, {"w": np.ones(2, dtype=np.float32)}, {})
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(ContractError, match="trailing"):
        load_checkpoint(path)


def test_bad_magic_and_version_rejected(tmp_path):
    path = tmp_path / "c.fgck"
    save_checkpoint(path, {"w": np.ones(2, dtype=np.float32)}, {})
    buf = bytearray(path.read_bytes())
    buf[:4] = b"NOPE"
    path.write_bytes(bytes(buf))
    with pytest.raises(ContractError, match="magic"):
        load_checkpoint(path)
    buf[:4] = b"FGCK"
    buf[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(buf))
    with pytest.raises(ContractError, match="version"):
        load_checkpoint(path)


def test_nonfinite_entries_rejected_at_save(tmp_path):
    with pytest.raises(ContractError, match="non-finite"):
        save_checkpoint(tmp_path / "c.fgck",
                        {"w": np.array([1.0, np.inf], dtype=np.float32)}, {})


def test_empty_arrays_and_empty_metadata(tmp_path):
    path = tmp_path / "c.fgck"
    save_checkpoint(path, {}, None)
    arrays, meta = load_checkpoint(path)
    assert arrays == {} and meta == {}


def test_unicode_names_roundtrip(tmp_path):
    path = tmp_path / "c.fgck"
    save_checkpoint(path, {"dit.block0.w_qkv": np.ones(1, dtype=np.float32)},
                    {"note": "éçñ"})
    arrays, meta = load_checkpoint(path)
    assert "dit.block0.w_qkv" in arrays
    assert meta["note"] == "éçñ"
