"""GCKP1 checkpoint files.

Layout, little-endian::

    b"GCKP1"
    u32 header_len, header JSON (utf-8):
        {"config": {...}, "meta": {...},
         "tensors": [{"name", "dtype": "<f4"|"<f8"|"<i8", "shape": [...]}, ...]}
    tensor payloads concatenated in header order
    32-byte sha256 of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"GCKP1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict
    meta: dict = field(default_factory=dict)


def _dtype_tag(arr):
    kind = arr.dtype.kind
    if kind == "f":
        return "<f8" if arr.dtype.itemsize == 8 else "<f4"
    if kind in "iub":
        return "<i8"
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def write_checkpoint(path, tensors, config=None, meta=None):
    header = {"config": config or {}, "meta": meta or {}, "tensors": []}
    payload = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        header["tensors"].append({"name": name, "dtype": tag, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr.astype(tag)).tobytes())
    hjson = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<I", len(hjson)) + hjson + b"".join(payload)
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())


def read_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise CheckpointError(f"{path}: not a GCKP1 checkpoint")
    if len(blob) < 9 + 32:
        raise CheckpointError(f"{path}: corrupt checkpoint (truncated)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: corrupt checkpoint (checksum mismatch or truncated)")
    (hlen,) = struct.unpack("<I", body[5:9])
    header = json.loads(body[9:9 + hlen])
    pos = 9 + hlen
    tensors = {}
    for t in header["tensors"]:
        dt = np.dtype(t["dtype"])
        n = int(np.prod(t["shape"], dtype=np.int64)) * dt.itemsize
        chunk = body[pos:pos + n]
        if len(chunk) != n:
            raise CheckpointError(f"{path}: corrupt checkpoint (payload for {t['name']})")
        tensors[t["name"]] = np.frombuffer(chunk, dtype=dt).reshape(t["shape"]).copy()
        pos += n
    return Checkpoint(header["config"], tensors, header.get("meta", {}))


def checkpoint_save(model, path, config=None, meta=None, extra=None):
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra or {}).items():
        tensors[k] = v
    write_checkpoint(path, tensors, config, meta)


def model_state(ckpt):
    return {k[len("model/"):]: v for k, v in ckpt.tensors.items() if k.startswith("model/")}


def checkpoint_load(path, model=None, build=None):
    """Load a checkpoint into ``model`` (or one built by ``build(config)``)."""
    ckpt = read_checkpoint(path)
    if model is None:
        if build is None:
            raise ValueError("need a model or a build function")
        model = build(ckpt.config)
    try:
        model.load_state_dict(model_state(ckpt))
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model


def param_hash(model):
    """sha256 over parameter names and bytes; used to prove a module stayed frozen."""
    h = hashlib.sha256()
    for name, arr in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
