"""Versioned binary checkpoints: magic, version, JSON header, raw little-endian tensors."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .exceptions import FormatError

MAGIC = b"UTRNCKPT"
VERSION = 1
_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy()
    if a.dtype.name not in _DTYPES:
        a = a.astype(np.float32)
    return np.ascontiguousarray(a.astype(a.dtype.newbyteorder("<")))


def write_checkpoint(target, tensors: dict, meta: dict) -> bytes:
    """Serialize named tensors plus a JSON-able ``meta`` dict; optionally write to ``target``."""
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        a = _to_numpy(t)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.name, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(header)))
    buf.write(header)
    for raw in blobs:
        buf.write(raw)
    data = buf.getvalue()
    if target is not None:
        Path(target).write_bytes(data)
    return data


def read_checkpoint(source) -> tuple[dict, dict]:
    """Return ``(meta, {name: tensor})``; raises FormatError on any inconsistency."""
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    head = len(MAGIC) + 12
    if len(data) < head or data[:len(MAGIC)] != MAGIC:
        raise FormatError("not a unitrans checkpoint")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC):head])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[head:head + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    body = memoryview(data)[head + hlen:]
    tensors = {}
    for e in header["tensors"]:
        dtype = _DTYPES.get(e["dtype"])
        if dtype is None or e["offset"] + e["nbytes"] > len(body):
            raise FormatError(f"bad tensor record {e['name']!r}")
        a = np.frombuffer(body[e["offset"]:e["offset"] + e["nbytes"]], dtype=np.dtype(dtype).newbyteorder("<"))
        if a.size != int(np.prod(e["shape"], dtype=np.int64)):
            raise FormatError(f"shape mismatch for {e['name']!r}")
        tensors[e["name"]] = torch.from_numpy(a.astype(dtype).reshape(e["shape"]))
    return header["meta"], tensors


def save_model(path, model, extra: dict | None = None) -> bytes:
    meta = {"kind": model.kind, "config": model.cfg.to_dict(), **(extra or {})}
    return write_checkpoint(path, model.state_dict(), meta)


def load_model(path):
    from .seqmodel import ModelConfig, build_model

    meta, tensors = read_checkpoint(path)
    if "kind" not in meta or "config" not in meta:
        raise FormatError("checkpoint lacks model kind/config")
    model = build_model(meta["kind"], ModelConfig.from_dict(meta["config"]))
    try:
        model.load_state_dict(tensors)
    except RuntimeError as exc:
        raise FormatError(f"checkpoint does not match model: {exc}") from exc
    return model.eval()


def save_encoder(path, encoder, extra: dict | None = None) -> bytes:
    meta = {"kind": "ctc", "config": asdict(encoder.config), **(extra or {})}
    return write_checkpoint(path, encoder.state_dict(), meta)


def load_encoder(path):
    from .ctc import CTCConfig, FeatureEncoder

    meta, tensors = read_checkpoint(path)
    if meta.get("kind") != "ctc":
        raise FormatError(f"expected a CTC encoder checkpoint, got {meta.get('kind')!r}")
    cfg = dict(meta["config"])
    cfg["betas"] = tuple(cfg.get("betas", (0.9, 0.98)))
    encoder = FeatureEncoder(CTCConfig(**cfg))
    try:
        encoder.load_state_dict(tensors)
    except RuntimeError as exc:
        raise FormatError(f"checkpoint does not match encoder: {exc}") from exc
    return encoder.eval()
