"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"LFPO"                 magic
    uint32                  format version (currently 1)
    uint32 + bytes          length-prefixed UTF-8 config JSON
    uint64                  parameter count n
    float64[n]              parameters in denoiser layout order
    uint8                   1 if optimizer state follows, else 0
    [uint64 step, float64[n] first moments, float64[n] second moments]
    uint32                  CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from .config import TrainConfig, config_from_dict, config_to_json
from .errors import CheckpointError, ConfigError
from .trainer import OptimizerState

MAGIC = b"LFPO"
VERSION = 1


def encode_checkpoint(config: TrainConfig, params, opt_state: OptimizerState | None = None) -> bytes:
    params = np.asarray(params, dtype="<f8")
    cfg_bytes = config_to_json(config).encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(cfg_bytes)),
        cfg_bytes,
        struct.pack("<Q", params.size),
        params.tobytes(),
    ]
    if opt_state is None:
        parts.append(b"\x00")
    else:
        parts += [b"\x01", struct.pack("<Q", opt_state.step),
                  np.asarray(opt_state.m, dtype="<f8").tobytes(),
                  np.asarray(opt_state.v, dtype="<f8").tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes):
    """Parse checkpoint bytes into ``(config, params, opt_state_or_None)``."""
    if len(data) < 4 + 4 + 4 + 8 + 1 + 4:
        raise CheckpointError("checkpoint is truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch")
    if body[:4] != MAGIC:
        raise CheckpointError("bad magic bytes")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", body, 8)
    pos = 12
    try:
        config = config_from_dict(json.loads(body[pos:pos + cfg_len].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError) as exc:
        raise CheckpointError(f"embedded config is invalid: {exc}") from exc
    pos += cfg_len
    (n,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    if n != config.model_config.num_params:
        raise CheckpointError(
            f"parameter count {n} does not match config ({config.model_config.num_params})")

    def take(count):
        nonlocal pos
        end = pos + 8 * count
        if end > len(body):
            raise CheckpointError("checkpoint is truncated")
        arr = np.frombuffer(body[pos:end], dtype="<f8").astype(np.float64)
        pos = end
        return arr

    params = take(n)
    if pos >= len(body):
        raise CheckpointError("checkpoint is truncated")
    flag = body[pos]
    pos += 1
    opt_state = None
    if flag == 1:
        if pos + 8 > len(body):
            raise CheckpointError("checkpoint is truncated")
        (step,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        opt_state = OptimizerState(take(n), take(n), int(step))
    elif flag != 0:
        raise CheckpointError("bad optimizer presence flag")
    if pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return config, params, opt_state


def write_checkpoint(path, config: TrainConfig, params, opt_state: OptimizerState | None = None):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(config, params, opt_state))
    os.replace(tmp, path)


def read_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    return decode_checkpoint(data)
