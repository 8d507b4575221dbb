"""PNUW v1: a small self-describing container for reconstructor weights.

Byte layout, all integers little-endian:

    offset 0   4 bytes   magic b"PNUW"
    offset 4   1 byte    format version, 0x01
    offset 5   4 bytes   uint32 header length N
    offset 9   N bytes   UTF-8 JSON header
    ...        payload   concatenated float32 tensors, C row-major order
    last 4     4 bytes   uint32 CRC32 of the payload bytes

The JSON header holds the model config and a tensor table of
{name, shape, offset}; offsets are byte positions inside the payload.
Loading validates structure first and the checksum before materializing
any tensor, so a failed load never yields a partial parameter dict.
"""

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ReconstructorConfig

__all__ = ["save_weights", "load_weights", "WeightFormatError", "WeightCorruptionError"]

MAGIC = b"PNUW"
VERSION = 1


class WeightFormatError(ValueError):
    """The file is not a readable PNUW container of a supported version."""


class WeightCorruptionError(RuntimeError):
    """The container is structurally valid but its payload is damaged."""


def save_weights(params: dict, config: ReconstructorConfig, path) -> None:
    """Write params as float32; non-float32 tensors are cast on the way out."""
    path = Path(path)
    table = []
    chunks = []
    offset = 0
    for name, tensor in params.items():
        raw = np.ascontiguousarray(tensor, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": asdict(config), "tensors": table}, separators=(",", ":")
    ).encode("utf-8")
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_weights(path):
    """Read a PNUW file, returning (params, config).

    Raises WeightFormatError for wrong magic, unsupported version, or a
    malformed header; WeightCorruptionError for truncation or checksum
    mismatch.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 9:
        raise WeightFormatError(f"{path}: too short to be a PNUW file")
    if blob[:4] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version = blob[4]
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported PNUW version {version}")
    (header_len,) = struct.unpack_from("<I", blob, 5)
    header_end = 9 + header_len
    if header_end + 4 > len(blob):
        raise WeightCorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(blob[9:header_end].decode("utf-8"))
        config = ReconstructorConfig(**header["config"])
        table = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFormatError(f"{path}: malformed header: {exc}") from None

    payload = blob[header_end:-4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise WeightCorruptionError(f"{path}: payload checksum mismatch")

    params: dict[str, np.ndarray] = {}
    for entry in table:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise WeightFormatError(f"{path}: malformed tensor entry: {exc}") from None
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        if offset < 0 or offset + nbytes > len(payload):
            raise WeightCorruptionError(
                f"{path}: tensor {name!r} extends past payload end"
            )
        flat = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        params[name] = flat.reshape(shape).copy()
    return params, config
