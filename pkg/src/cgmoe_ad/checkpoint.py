"""Binary checkpoint container.

Layout (little-endian)::

    magic      8 bytes   b"CGMOEAD\\x00"
    version    uint32
    header_len uint32
    header     UTF-8 JSON {"config": ..., "digest": sha256(config), "count": n, "meta": ...}
    n records  name_len uint16, name, ndim uint8, dims uint32 * ndim, float32 data
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelBundle, ModelConfig

MAGIC = b"CGMOEAD\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_params(path, params: dict[str, np.ndarray], config: dict, meta: dict | None = None):
    header = json.dumps({
        "config": config,
        "digest": config_digest(config),
        "count": len(params),
        "meta": meta or {},
    }, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_params(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    try:
        return _parse(path, data)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse(path, data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 16
    header = json.loads(data[off:off + hlen])
    off += hlen
    if header["digest"] != config_digest(header["config"]):
        raise CheckpointError(f"{path}: config digest mismatch")
    params = {}
    for _ in range(header["count"]):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return header, params


def save_checkpoint(path, model: ModelBundle, meta: dict | None = None):
    write_params(path, model.state_dict(), model.config.to_dict(), meta)


def load_checkpoint(path, expect: ModelConfig | None = None) -> ModelBundle:
    header, params = read_params(path)
    config = ModelConfig.from_dict(header["config"])
    if expect is not None:
        ours, theirs = expect.to_dict(), config.to_dict()
        diff = sorted(k for k in ours if ours[k] != theirs.get(k))
        if diff:
            raise CheckpointError(f"checkpoint config differs from expected in {diff}")
    want = {k: p.shape for k, p in ModelBundle(config).params.items()}
    got = {k: v.shape for k, v in params.items()}
    if want != got:
        bad = sorted(k for k in set(want) | set(got) if want.get(k) != got.get(k))
        raise CheckpointError(f"{path}: parameters do not match the stored config: {bad[:5]}")
    return ModelBundle(config, params)


def load_encoder_blob(path) -> dict[str, np.ndarray]:
    """Import hook: read encoder weights stored in the checkpoint container."""
    _, params = read_params(path)
    return {k: v for k, v in params.items() if k.startswith("encoder.")}


def checkpoint_header(path) -> dict:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    _, hlen = struct.unpack_from("<II", data, 8)
    return json.loads(data[16:16 + hlen])
