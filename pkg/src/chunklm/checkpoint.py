"""Single-file checkpoint container.

Layout: 4-byte magic, u32 format version, u64 header length, a UTF-8 JSON
header (config echo plus a named-parameter manifest of name/shape/dtype/
byte offset), then the raw little-endian arrays.  Round trips are
bit-exact; truncated files, manifest mismatches, and unknown versions are
rejected with specifics.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import RunConfig, config_from_flat, config_to_flat
from .errors import DataError
from .model import Model

MAGIC = b"BCLM"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}
_DTYPES_REV = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(model: Model, path: str, config: RunConfig | None = None,
                    step: int = 0) -> None:
    if config is None:
        config = RunConfig(model=model.config)
    entries = []
    blobs = []
    offset = 0
    for name, tensor in model.named_parameters():
        dtype_name = str(tensor.data.dtype)
        if dtype_name not in _DTYPES:
            raise ValueError(f"unsupported parameter dtype {dtype_name} for {name}")
        raw = np.ascontiguousarray(tensor.data).astype(_DTYPES[dtype_name], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": _DTYPES[dtype_name],
                "offset": offset,
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "config": config_to_flat(config),
        "params": entries,
        "data_bytes": offset,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str):
    """Rebuild (model, config, step) from a checkpoint file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise DataError(f"checkpoint {path}: file too short ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise DataError(f"checkpoint {path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise DataError(
            f"checkpoint {path}: unsupported format version {version} "
            f"(expected {FORMAT_VERSION})"
        )
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + header_len > len(raw):
        raise DataError(f"checkpoint {path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"checkpoint {path}: unreadable header ({exc})") from exc

    data = raw[16 + header_len :]
    expected = header.get("data_bytes", 0)
    if len(data) != expected:
        raise DataError(
            f"checkpoint {path}: data section holds {len(data)} bytes, "
            f"manifest says {expected}"
        )

    config = config_from_flat(header["config"])
    model = Model(config.model, seed=0)
    stored = {entry["name"]: entry for entry in header["params"]}
    model_names = [name for name, _ in model.named_parameters()]
    missing = sorted(set(model_names) - set(stored))
    extra = sorted(set(stored) - set(model_names))
    if missing or extra:
        raise DataError(
            f"checkpoint {path}: manifest mismatch "
            f"(missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, tensor in model.named_parameters():
        entry = stored[name]
        dtype = entry["dtype"]
        if dtype not in _DTYPES_REV:
            raise DataError(f"checkpoint {path}: unknown dtype {dtype} for {name}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * np.dtype(dtype).itemsize
        if start < 0 or end > len(data):
            raise DataError(
                f"checkpoint {path}: offsets of {name} fall outside the data section"
            )
        arr = np.frombuffer(data[start:end], dtype=dtype).reshape(shape)
        if tuple(tensor.shape) != shape:
            raise DataError(
                f"checkpoint {path}: {name} has shape {shape}, model expects {tensor.shape}"
            )
        tensor.data = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        tensor.grad = None
    return model, config, header.get("step", 0)
