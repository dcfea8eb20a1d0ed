"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PFCK"
    u32  format version
    u32  header length, then that many bytes of UTF-8 JSON
         {"config": {...model config...}, "frozen": [names]}
    u32  tensor count
    per tensor:
        u32  name length, UTF-8 name
        u8   dtype tag (1 = float32, 2 = float64; 3 reserved for float8)
        u32  rank
        u64  extent, repeated rank times
        raw little-endian payload
    u32  CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import IntegrityError, SchemaError, VersionError
from .model import ModelConfig, ParaFormerModel, init_model

MAGIC = b"PFCK"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
TAG_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def encode(model: ParaFormerModel) -> bytes:
    header = json.dumps({"config": model.config.to_dict(),
                         "frozen": sorted(model.frozen)}, sort_keys=True).encode()
    params = model.named_parameters()
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header,
             struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_TAGS:
            raise SchemaError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BI", DTYPE_TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise SchemaError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> ParaFormerModel:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise SchemaError("not a paraformer checkpoint (bad magic or too short)")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("checkpoint checksum mismatch (corrupt or truncated file)")

    r = _Reader(body)
    r.take(8)
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode())
        cfg = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise SchemaError(f"bad checkpoint header: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        tag, rank = r.unpack("<BI")
        if tag not in TAG_DTYPES:
            raise SchemaError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}Q")
        dt = TAG_DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(size), dtype=dt).reshape(shape)
        if name in tensors:
            raise SchemaError(f"duplicate tensor name {name!r}")
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(body):
        raise SchemaError(f"{len(body) - r.pos} trailing bytes after tensor table")

    model = init_model(cfg)
    expected = model.named_parameters()
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise SchemaError(f"tensor names differ from model: missing {missing}, unexpected {extra}")
    for name, ref in expected.items():
        if tensors[name].shape != ref.shape:
            raise SchemaError(f"{name}: stored shape {tensors[name].shape}, model expects {ref.shape}")
    restored = model.bind(tensors)
    restored.branch_calls.clear()
    restored.frozen = set(header.get("frozen", []))
    return restored


def save(model: ParaFormerModel, path) -> None:
    Path(path).write_bytes(encode(model))


def load(path) -> ParaFormerModel:
    return decode(Path(path).read_bytes())
