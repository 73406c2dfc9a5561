"""RFPX paired-line files and their JSON manifests.

Layout (little-endian): b"RFPX", u16 version, u32 n_pairs, u32 L, f32 fs,
f32 fc, then n_pairs x (L f32 low samples, L f32 high samples).
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from rfsr.errors import DataError
from rfsr.rfsim import LineMeta, PairedDataset, ProbeSpec, RfLine

logger = logging.getLogger(__name__)

MAGIC = b"RFPX"
VERSION = 1
HEADER = struct.Struct("<4sHIIff")


def write_atomic(path: Path, payload: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e


def read_bytes(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e


def manifest_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


def encode_rfpx(low: np.ndarray, high: np.ndarray, fs: float, fc: float) -> bytes:
    low = np.asarray(low)
    high = np.asarray(high)
    if low.shape != high.shape or low.ndim != 2:
        raise DataError(f"low/high arrays must share a 2-D shape, got {low.shape} and {high.shape}")
    n_pairs, length = low.shape
    body = np.stack([low, high], axis=1).astype("<f4")
    return HEADER.pack(MAGIC, VERSION, n_pairs, length, fs, fc) + body.tobytes()


def decode_rfpx(payload: bytes) -> tuple[np.ndarray, np.ndarray, float, float]:
    if len(payload) < HEADER.size:
        raise DataError("truncated RFPX header")
    magic, version, n_pairs, length, fs, fc = HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise DataError(f"not an RFPX file (magic {magic!r})")
    if version != VERSION:
        raise DataError(f"unsupported RFPX version {version}")
    expected = HEADER.size + n_pairs * 2 * length * 4
    if len(payload) != expected:
        raise DataError(f"RFPX payload is {len(payload)} bytes, header implies {expected}")
    body = np.frombuffer(payload, dtype="<f4", offset=HEADER.size).reshape(n_pairs, 2, length)
    body = body.astype(np.float64)
    return body[:, 0], body[:, 1], float(fs), float(fc)


def save_dataset(dataset: PairedDataset, path: Path, config: dict | None = None) -> Path:
    path = Path(path)
    payload = encode_rfpx(dataset.low(), dataset.high(), dataset.probe.fs, dataset.probe.fc)
    manifest = {
        "format": "RFPX",
        "version": VERSION,
        "n_pairs": len(dataset.pairs),
        "line_length": dataset.line_length,
        "probe": asdict(dataset.probe),
        "pairs": [
            {"phantom_id": lo.meta.phantom_id, "line_index": lo.meta.line_index,
             "split": split, "bands": [lo.meta.band, hi.meta.band]}
            for (lo, hi), split in zip(dataset.pairs, dataset.splits)
        ],
        "phantoms": dataset.phantoms,
        "info": dataset.info,
        "config": config or {},
    }
    write_atomic(path, payload)
    write_atomic(manifest_path(path), json.dumps(manifest, indent=2).encode())
    logger.info("wrote %d pairs to %s", len(dataset.pairs), path)
    return path


def load_manifest(path: Path) -> dict:
    try:
        return json.loads(read_bytes(manifest_path(path)))
    except json.JSONDecodeError as e:
        raise DataError(f"malformed manifest for {path}: {e}") from e


def load_dataset(path: Path) -> PairedDataset:
    low, high, fs, fc = decode_rfpx(read_bytes(path))
    manifest = load_manifest(path)
    records = manifest.get("pairs", [])
    if len(records) != len(low):
        raise DataError(f"{path}: manifest lists {len(records)} pairs, binary holds {len(low)}")
    probe = ProbeSpec(**manifest["probe"])
    if np.float32(probe.fs) != np.float32(fs) or np.float32(probe.fc) != np.float32(fc):
        raise DataError(f"{path}: header fs/fc disagree with the manifest probe")

    pairs = []
    for lo, hi, rec in zip(low, high, records):
        bands = rec.get("bands", ["low", "high"])
        pairs.append((
            RfLine(lo, probe.fs, LineMeta(rec["phantom_id"], rec["line_index"], bands[0])),
            RfLine(hi, probe.fs, LineMeta(rec["phantom_id"], rec["line_index"], bands[1])),
        ))
    return PairedDataset(
        pairs=pairs,
        probe=probe,
        splits=[rec["split"] for rec in records],
        phantoms=manifest.get("phantoms", []),
        info=manifest.get("info", {}),
    )
