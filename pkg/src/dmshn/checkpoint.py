"""Bit-exact serialization of named parameter tensors and training state.

File layout (all integers little-endian):

    bytes 0..3    magic "DMSN"
    bytes 4..7    u32 format version (currently 1)
    bytes 8..15   u64 header length in bytes
    header        UTF-8 JSON (see below)
    padding       zero bytes up to the next 64-byte boundary
    payload       raw float32 blocks, each offset 64-byte aligned

The header JSON has two keys: "tensors" maps each name to {"shape", "dtype",
"offset", "length"} with offsets relative to the payload start, and "meta"
carries run state (stage, step, model config, optimizer/schedule state).
Values are stored little-endian regardless of host byte order, and a
load -> save round trip reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import BadMagic, ShapeMismatchOnLoad, VersionUnsupported

MAGIC = b"DMSN"
FORMAT_VERSION = 1
_ALIGN = 64


def _aligned(n: int) -> int:
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


def save(tensors: dict, meta: dict, path: str) -> None:
    """Write atomically (temp file + rename); `tensors` maps name -> ndarray."""
    # canonical (sorted) block order so identical contents give identical bytes
    names = sorted(tensors.keys())
    if len(names) != len(tensors):
        raise ValueError("duplicate tensor names")
    entries = {}
    blocks = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        raw = arr.astype("<f4", copy=False).tobytes()
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": offset,
            "length": len(raw),
        }
        blocks.append((offset, raw))
        offset = _aligned(offset + len(raw))
    payload_len = blocks[-1][0] + len(blocks[-1][1]) if blocks else 0

    header = json.dumps({"tensors": entries, "meta": meta},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload_start = _aligned(16 + len(header))

    buf = bytearray(payload_start + payload_len)
    buf[0:4] = MAGIC
    buf[4:8] = FORMAT_VERSION.to_bytes(4, "little")
    buf[8:16] = len(header).to_bytes(8, "little")
    buf[16:16 + len(header)] = header
    for off, raw in blocks:
        buf[payload_start + off:payload_start + off + len(raw)] = raw

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(buf)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_prefix(path: str):
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16 or head[0:4] != MAGIC:
            raise BadMagic(f"{path}: not a checkpoint file")
        version = int.from_bytes(head[4:8], "little")
        if version != FORMAT_VERSION:
            raise VersionUnsupported(f"{path}: format version {version}")
        hlen = int.from_bytes(head[8:16], "little")
        header = json.loads(f.read(hlen).decode("utf-8"))
    return version, hlen, header


def read_header(path: str) -> dict:
    """Parse magic/version/header without touching the payload."""
    version, _, header = _read_prefix(path)
    header["format_version"] = version
    return header


def load(path: str) -> tuple[dict, dict]:
    """Read a checkpoint; returns ({name: float32 ndarray}, meta)."""
    _, hlen, header = _read_prefix(path)
    payload_start = _aligned(16 + hlen)
    with open(path, "rb") as f:
        f.seek(payload_start)
        payload = f.read()
    tensors = {}
    for name, ent in header["tensors"].items():
        raw = payload[ent["offset"]:ent["offset"] + ent["length"]]
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32, copy=True)
        tensors[name] = arr.reshape(ent["shape"])
    return tensors, header["meta"]


def validate_against(tensors: dict, named_params, context: str) -> None:
    """Check that stored shapes match the requesting model's parameters."""
    for name, p in named_params:
        if name not in tensors:
            raise ShapeMismatchOnLoad(f"{context}: missing tensor {name}")
        got = tuple(tensors[name].shape)
        want = tuple(p.data.shape)
        if got != want:
            raise ShapeMismatchOnLoad(
                f"{context}: tensor {name} has shape {got}, model expects {want}")
