"""Flat tensor archive for fast intermediate storage.

Layout: an 8-byte little-endian unsigned header length N, then N bytes of a
UTF-8 JSON object mapping each tensor name to ``{"dtype", "shape",
"data_offsets": [begin, end)}``, then the concatenated raw little-endian
buffers. Offsets are relative to the end of the header. The layout is
compatible with the safetensors format, so archives can be inspected by
standard tooling.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch


class ArchiveError(Exception):
    """The archive is malformed, truncated, or self-inconsistent."""


_DTYPE_TO_CODE = {
    torch.float16: "F16",
    torch.float32: "F32",
    torch.float64: "F64",
    torch.uint8: "U8",
    torch.int8: "I8",
    torch.int16: "I16",
    torch.int32: "I32",
    torch.int64: "I64",
    torch.bool: "BOOL",
}
_CODE_TO_NUMPY = {
    "F16": np.float16,
    "F32": np.float32,
    "F64": np.float64,
    "U8": np.uint8,
    "I8": np.int8,
    "I16": np.int16,
    "I32": np.int32,
    "I64": np.int64,
    "BOOL": np.bool_,
}


def fast_save(tensors: Mapping[str, torch.Tensor | np.ndarray], path: str | Path) -> None:
    """Write named tensors into a single flat archive."""
    header: dict[str, dict] = {}
    buffers: list[bytes] = []
    offset = 0
    for name, tensor in tensors.items():
        if isinstance(tensor, np.ndarray):
            tensor = torch.from_numpy(tensor)
        code = _DTYPE_TO_CODE.get(tensor.dtype)
        if code is None:
            raise ArchiveError(f"dtype {tensor.dtype} of tensor {name!r} is not archivable")
        array = np.ascontiguousarray(tensor.detach().cpu().numpy())
        blob = array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes()
        header[name] = {
            "dtype": code,
            "shape": list(tensor.shape),
            "data_offsets": [offset, offset + len(blob)],
        }
        buffers.append(blob)
        offset += len(blob)
    encoded = json.dumps(header, separators=(",", ":")).encode("utf-8")
    encoded += b" " * ((8 - len(encoded) % 8) % 8)  # safetensors-style alignment
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        for blob in buffers:
            fh.write(blob)


def fast_load(path: str | Path, device: str | torch.device = "cpu") -> dict[str, torch.Tensor]:
    """Read every tensor from an archive written by :func:`fast_save`."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ArchiveError(f"archive shorter than its length prefix: {path}")
    (header_len,) = struct.unpack_from("<Q", raw, 0)
    if len(raw) < 8 + header_len:
        raise ArchiveError(f"truncated archive header: {path}")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ArchiveError(f"unreadable archive header in {path}: {err}") from err
    if not isinstance(header, dict):
        raise ArchiveError(f"archive header is not an object: {path}")

    payload = raw[8 + header_len :]
    entries = {k: v for k, v in header.items() if k != "__metadata__"}
    spans: list[tuple[int, int, str]] = []
    out: dict[str, torch.Tensor] = {}
    for name, meta in entries.items():
        try:
            code = meta["dtype"]
            shape = tuple(int(s) for s in meta["shape"])
            begin, end = (int(v) for v in meta["data_offsets"])
        except (KeyError, TypeError, ValueError) as err:
            raise ArchiveError(f"malformed entry {name!r} in {path}: {err}") from err
        if code not in _CODE_TO_NUMPY:
            raise ArchiveError(f"unknown dtype code {code!r} for {name!r} in {path}")
        dtype = np.dtype(_CODE_TO_NUMPY[code]).newbyteorder("<")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if begin < 0 or end < begin or end > len(payload):
            raise ArchiveError(
                f"offsets [{begin}, {end}) of {name!r} fall outside the payload in {path}"
            )
        if end - begin != expected:
            raise ArchiveError(
                f"{name!r} declares {end - begin} bytes but dtype/shape require {expected}"
            )
        spans.append((begin, end, name))
        array = np.frombuffer(payload[begin:end], dtype=dtype).reshape(shape)
        array = array.astype(dtype.newbyteorder("="), copy=True)
        out[name] = torch.from_numpy(array).to(device)

    spans.sort()
    for (b1, e1, n1), (b2, e2, n2) in zip(spans, spans[1:]):
        if b2 < e1:
            raise ArchiveError(f"overlapping offsets between {n1!r} and {n2!r} in {path}")
    return out
