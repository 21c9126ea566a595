"""FLXS binary container for named float64 tensors plus a JSON config.

Layout:

    bytes 0..3    magic "FLXS"
    bytes 4..7    format version, u32 little-endian
    bytes 8..11   header length in bytes, u32 little-endian
    header        canonical UTF-8 JSON: {"config": ..., "crc32": ...,
                  "tensors": [{"name", "shape", "offset"}, ...]}
    payload       row-major float64 little-endian tensor data, packed in
                  manifest order at the stated byte offsets

The manifest is sorted by tensor name and the JSON is serialized with
sorted keys and no incidental whitespace, so identical contents always
produce identical bytes and a load/save round trip is byte-stable.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import WeightFormatError

Array = np.ndarray

MAGIC = b"FLXS"
VERSION = 1


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_tensors(path: str | Path, config: Mapping, tensors: Mapping[str, Array]) -> None:
    """Write tensors and config to ``path`` in FLXS format."""
    names = sorted(tensors)
    manifest = []
    chunks = []
    offset = 0
    for name in names:
        # ascontiguousarray promotes 0-d to 1-D, so take the shape first.
        arr = np.asarray(tensors[name], dtype=np.float64)
        raw = np.ascontiguousarray(arr).astype("<f8", copy=False).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = _canonical_json(
        {"config": config, "crc32": zlib.crc32(payload), "tensors": manifest}
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_tensors(path: str | Path) -> tuple[dict, dict[str, Array]]:
    """Read an FLXS file; returns (config, name -> tensor). The whole file is
    validated before anything is returned, so a bad file yields no partial
    weights."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFormatError(f"cannot read weight file {path}: {exc}") from exc
    if len(blob) < 12:
        raise WeightFormatError(f"weight file {path} is truncated before the header")
    if blob[:4] != MAGIC:
        raise WeightFormatError(f"bad magic {blob[:4]!r}; expected {MAGIC!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise WeightFormatError(f"unsupported format version {version}; this build reads {VERSION}")
    (header_len,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + header_len:
        raise WeightFormatError(f"weight file {path} is truncated inside the header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"weight file {path} has a malformed header: {exc}") from exc
    for key in ("config", "crc32", "tensors"):
        if key not in header:
            raise WeightFormatError(f"weight file header is missing {key!r}")
    payload = blob[12 + header_len :]
    if zlib.crc32(payload) != header["crc32"]:
        raise WeightFormatError(f"weight file {path} failed its payload checksum")
    tensors: dict[str, Array] = {}
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + 8 * count
        if end > len(payload):
            raise WeightFormatError(
                f"tensor {entry['name']!r} extends past the payload ({end} > {len(payload)})"
            )
        flat = np.frombuffer(payload[start:end], dtype="<f8")
        tensors[entry["name"]] = flat.astype(np.float64).reshape(shape)
    return header["config"], tensors
