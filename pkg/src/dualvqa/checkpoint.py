"""Single-file checkpoint container.

Layout::

    8 bytes   magic b"DVQACKPT"
    4 bytes   format version (uint32, little-endian)
    8 bytes   header length N (uint64, little-endian)
    N bytes   UTF-8 JSON header: config snapshot, tensor index, payload CRC32
    ...       raw little-endian tensor blobs, in index order
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ModelConfig, from_dict, to_dict
from .model import VQAModel

MAGIC = b"DVQACKPT"
VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.bool: "|b1"}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _diff_keys(a, b, prefix=""):
    if isinstance(a, dict) and isinstance(b, dict):
        for key in sorted(set(a) | set(b)):
            if key not in a or key not in b:
                return f"{prefix}{key}"
            found = _diff_keys(a[key], b[key], f"{prefix}{key}.")
            if found:
                return found
        return None
    return None if a == b else prefix.rstrip(".")


def save_checkpoint(model: VQAModel, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    index, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(np.dtype(_DTYPES[t.dtype]), copy=False).tobytes()
        index.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype], "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "config": to_dict(model.cfg),
        "tensors": index,
        "crc32": zlib.crc32(payload),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + payload)
    return path


def read_header(path: str | Path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    try:
        header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = data[20 + hlen :]
    if zlib.crc32(payload) != header.get("crc32"):
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupt or truncated file)")
    return header, payload


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None, dtype=None) -> VQAModel:
    """Rebuild the model stored at ``path``.

    If ``expected`` is given, the stored config must match it; the first
    differing field is named in the error.
    """
    header, payload = read_header(path)
    stored = header["config"]
    if expected is not None:
        bad = _diff_keys(to_dict(expected), stored)
        if bad:
            raise CheckpointError(f"checkpoint config mismatch in field '{bad}'")
    try:
        cfg = from_dict(ModelConfig, stored)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    model = VQAModel(cfg)
    state = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    model.load_state_dict(state)
    if dtype is not None:
        model.to(dtype)
    model.eval()
    return model
