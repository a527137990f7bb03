"""Binary weights file.

Layout::

    b"EGOF"                      magic
    u32 LE                       format version
    u32 LE + UTF-8 JSON          config, magnitude_scale, tensor manifest
    float32 LE tensor data       in manifest order
    u32 LE                       CRC32 of every byte after the magic
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from egofilter.egonet.network import EgoNetConfig, EgoNetWeights

MAGIC = b"EGOF"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


class BadMagicError(WeightsFormatError):
    pass


class VersionMismatchError(WeightsFormatError):
    pass


class TruncatedError(WeightsFormatError):
    pass


class ChecksumError(WeightsFormatError):
    pass


class InconsistentShapeError(WeightsFormatError):
    pass


def to_bytes(weights: EgoNetWeights) -> bytes:
    config = weights.config.to_dict()
    header = {
        "config": config,
        "magnitude_scale": config["magnitude_scale"],
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in weights.tensors.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = [struct.pack("<I", VERSION), struct.pack("<I", len(header_bytes)), header_bytes]
    body += [np.ascontiguousarray(t, dtype="<f4").tobytes() for t in weights.tensors.values()]
    payload = b"".join(body)
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def from_bytes(data: bytes) -> EgoNetWeights:
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedError("truncated: file ends inside the header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {VERSION}")
    (hlen,) = struct.unpack_from("<I", data, 8)
    pos = 12 + hlen
    if len(data) < pos:
        raise TruncatedError("truncated: file ends inside the JSON header")
    try:
        header = json.loads(data[12:pos].decode("utf-8"))
        config = EgoNetConfig(**header["config"])
        manifest = [(m["name"], tuple(m["shape"])) for m in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightsFormatError(f"malformed header: {exc}") from exc
    if config.magnitude_scale != header["magnitude_scale"]:
        raise InconsistentShapeError("magnitude_scale disagrees between config and header")
    if dict(manifest) != config.tensor_shapes() or [n for n, _ in manifest] != list(config.tensor_shapes()):
        raise InconsistentShapeError("tensor manifest does not match the configured architecture")

    tensors = {}
    for name, shape in manifest:
        nbytes = 4 * int(np.prod(shape))
        if len(data) < pos + nbytes:
            raise TruncatedError(f"truncated: file ends inside tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if len(data) < pos + 4:
        raise TruncatedError("truncated: checksum missing")
    if len(data) > pos + 4:
        raise WeightsFormatError(f"{len(data) - pos - 4} trailing bytes after checksum")
    (crc,) = struct.unpack_from("<I", data, pos)
    if crc != zlib.crc32(data[4:pos]):
        raise ChecksumError("checksum mismatch: file is corrupted")
    return EgoNetWeights(config, tensors)


def save_weights(weights: EgoNetWeights, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(weights))


def load_weights(path: str | Path) -> EgoNetWeights:
    return from_bytes(Path(path).read_bytes())
