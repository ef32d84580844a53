"""Versioned binary checkpoint container.

Layout (all integers little-endian):
  magic "RMCK" | u32 version | u32 crc32(body) | u64 body length | body
Body:
  u32 config-JSON length | config JSON (resolved ModelConfig + seed)
  u32 param count | per param: u16 name length, name utf-8, u8 ndim,
                    u32 x ndim extents, raw float32 values
  u8 has-optimizer | optimizer block (same tensor framing for m and v, u64 step)
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .data import write_atomic
from .model import RMAMamba, build_model

MAGIC = b"RMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def _pack_array(buf, name, arr):
    data = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    buf.write(struct.pack("<H", len(name_b)))
    buf.write(name_b)
    buf.write(struct.pack("<B", data.ndim))
    for extent in data.shape:
        buf.write(struct.pack("<I", extent))
    buf.write(data.tobytes())


def _unpack_array(view, off):
    (name_len,) = struct.unpack_from("<H", view, off)
    off += 2
    name = bytes(view[off:off + name_len]).decode("utf-8")
    off += name_len
    (ndim,) = struct.unpack_from("<B", view, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}I", view, off)
    off += 4 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    arr = np.frombuffer(view, dtype="<f4", count=count, offset=off).reshape(shape).copy()
    off += 4 * count
    return name, arr, off


def save_checkpoint(path, model: RMAMamba, seed: int = 0, optimizer=None):
    body = io.BytesIO()
    cfg_json = json.dumps({"model": model.config.to_dict(), "seed": seed}).encode("utf-8")
    body.write(struct.pack("<I", len(cfg_json)))
    body.write(cfg_json)
    params = model.state_arrays()
    body.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        _pack_array(body, name, arr)
    if optimizer is not None:
        body.write(struct.pack("<B", 1))
        body.write(struct.pack("<Q", optimizer.step_count))
        moments = optimizer.state_arrays()
        body.write(struct.pack("<I", len(moments)))
        for name, arr in moments.items():
            _pack_array(body, name, arr)
    else:
        body.write(struct.pack("<B", 0))
    payload = body.getvalue()
    header = MAGIC + struct.pack("<IIQ", VERSION, zlib.crc32(payload), len(payload))
    write_atomic(path, header + payload)


def _read_body(path) -> bytes:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise ChecksumError(f"{path}: not a checkpoint file (bad magic or truncated header)")
    version, crc, body_len = struct.unpack_from("<IIQ", raw, 4)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    body = raw[20:]
    if len(body) != body_len or zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupted file)")
    return body


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Rebuild the model stored at `path`; returns (model, seed, optim_state).

    `optim_state` is None or a dict {"step": int, "moments": {name: array}}.
    """
    body = _read_body(path)
    view = memoryview(body)
    (cfg_len,) = struct.unpack_from("<I", view, 0)
    meta = json.loads(bytes(view[4:4 + cfg_len]).decode("utf-8"))
    off = 4 + cfg_len
    stored_cfg = ModelConfig.from_dict(meta["model"])
    seed = int(meta.get("seed", 0))
    if expected_config is not None and expected_config.resolved() != stored_cfg:
        raise ConfigMismatchError(
            f"{path}: stored config {stored_cfg} does not match expected "
            f"{expected_config.resolved()}")
    (n_params,) = struct.unpack_from("<I", view, off)
    off += 4
    arrays = {}
    for _ in range(n_params):
        name, arr, off = _unpack_array(view, off)
        arrays[name] = arr
    (has_optim,) = struct.unpack_from("<B", view, off)
    off += 1
    optim_state = None
    if has_optim:
        (step,) = struct.unpack_from("<Q", view, off)
        off += 8
        (n_m,) = struct.unpack_from("<I", view, off)
        off += 4
        moments = {}
        for _ in range(n_m):
            name, arr, off = _unpack_array(view, off)
            moments[name] = arr
        optim_state = {"step": step, "moments": moments}
    model = build_model(stored_cfg, seed=seed)
    try:
        model.load_state(arrays)
    except (KeyError, ValueError) as exc:
        raise ConfigMismatchError(f"{path}: parameters do not fit the stored config: {exc}") from exc
    return model, seed, optim_state
