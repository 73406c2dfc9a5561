import json

import numpy as np
import pytest

from rfsr.dataset import (
    HEADER,
    decode_rfpx,
    encode_rfpx,
    load_dataset,
    load_manifest,
    manifest_path,
    save_dataset,
    write_atomic,
)
from rfsr.errors import DataError
from rfsr.rfsim import LineMeta, PairedDataset, ProbeSpec, RfLine


def make_dataset(n=3, length=32, seed=0):
    rng = np.random.default_rng(seed)
    probe = ProbeSpec()
    pairs = []
    for i in range(n):
        lo = RfLine(rng.standard_normal(length).astype(np.float32).astype(np.float64), probe.fs, LineMeta("p0", i, "low"))
        hi = RfLine(rng.standard_normal(length).astype(np.float32).astype(np.float64), probe.fs, LineMeta("p0", i, "high"))
        pairs.append((lo, hi))
    phantoms = [{"id": "p0", "kind": "speckle_cyst", "cysts": [], "width_m": 0.0192}]
    return PairedDataset(pairs, probe, ["test"] * n, phantoms, {"amplitude_scale": 2.0})


def test_encode_layout():
    low = np.ones((2, 5))
    high = np.zeros((2, 5))
    payload = encode_rfpx(low, high, 20.832e6, 5.2e6)
    assert payload[:4] == b"RFPX"
    assert len(payload) == HEADER.size + 2 * 2 * 5 * 4
    magic, version, n_pairs, length, fs, fc = HEADER.unpack_from(payload)
    assert (version, n_pairs, length) == (1, 2, 5)
    assert fs == pytest.approx(20.832e6)


def test_decode_interleaves_pairs():
    low = np.arange(6.0).reshape(2, 3)
    high = -low
    lo, hi, fs, fc = decode_rfpx(encode_rfpx(low, high, 1.0, 0.25))
    assert np.array_equal(lo, low)
    assert np.array_equal(hi, high)
    assert (fs, fc) == (1.0, 0.25)


def test_decode_rejects_bad_payloads():
    payload = encode_rfpx(np.zeros((1, 4)), np.zeros((1, 4)), 1.0, 1.0)
    with pytest.raises(DataError, match="magic"):
        decode_rfpx(b"XXXX" + payload[4:])
    with pytest.raises(DataError, match="bytes"):
        decode_rfpx(payload[:-1])
    with pytest.raises(DataError, match="truncated"):
        decode_rfpx(payload[:6])


def test_encode_rejects_mismatched_shapes():
    with pytest.raises(DataError):
        encode_rfpx(np.zeros((2, 4)), np.zeros((2, 5)), 1.0, 1.0)


def test_save_load_roundtrip(tmp_path):
    data = make_dataset()
    path = save_dataset(data, tmp_path / "d.rfpx", {"seed": 3})
    loaded = load_dataset(path)
    assert np.array_equal(loaded.low(), data.low())
    assert np.array_equal(loaded.high(), data.high())
    assert loaded.splits == data.splits
    assert loaded.pairs[1][0].meta == LineMeta("p0", 1, "low")
    assert loaded.info == {"amplitude_scale": 2.0}
    assert load_manifest(path)["config"] == {"seed": 3}


def test_resave_is_byte_identical(tmp_path):
    first = save_dataset(make_dataset(), tmp_path / "a.rfpx")
    second = save_dataset(load_dataset(first), tmp_path / "b.rfpx")
    assert first.read_bytes() == second.read_bytes()


def test_manifest_count_must_match(tmp_path):
    path = save_dataset(make_dataset(), tmp_path / "d.rfpx")
    manifest = json.loads(manifest_path(path).read_text())
    manifest["pairs"] = manifest["pairs"][:-1]
    manifest_path(path).write_text(json.dumps(manifest))
    with pytest.raises(DataError, match="manifest lists 2"):
        load_dataset(path)


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="cannot read"):
        load_dataset(tmp_path / "nope.rfpx")


def test_write_atomic_leaves_no_temp_files(tmp_path):
    target = tmp_path / "sub" / "out.bin"
    write_atomic(target, b"abc")
    write_atomic(target, b"defg")
    assert target.read_bytes() == b"defg"
    assert [p.name for p in target.parent.iterdir()] == ["out.bin"]
