"""Checkpoint files and attention exports.

Checkpoint layout (all integers little-endian)::

    b"FSBCKPT1"                      8-byte magic
    N                                uint64, header length in bytes
    header                           N bytes of UTF-8 JSON
    payload                          concatenated float32 tensors

The header carries ``format_version``, the model ``config`` record, the
``live_heads`` table and a ``tensors`` manifest of
``{name, shape, dtype: "f32", byte_offset, byte_length}`` entries whose
offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError
from .model import EncoderModel, ModelConfig
from .numerics import Tensor

MAGIC = b"FSBCKPT1"
FORMAT_VERSION = 1


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def checkpoint_bytes(model: EncoderModel) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, t in model.params.items():
        if t.dtype != np.float32:
            raise ContractError(f"checkpoints store float32 only; {name} is {t.dtype}")
        raw = np.ascontiguousarray(t.data).astype("<f4", copy=False).tobytes()
        manifest.append({
            "name": name,
            "shape": list(t.shape),
            "dtype": "f32",
            "byte_offset": offset,
            "byte_length": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "live_heads": model.live_heads,
        "tensors": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(model: EncoderModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, checkpoint_bytes(model))


def parse_checkpoint(blob: bytes) -> EncoderModel:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    if 16 + n > len(blob):
        raise CheckpointError(f"header length {n} runs past end of file ({len(blob)} bytes)")
    try:
        header = json.loads(blob[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if not isinstance(header, dict):
        raise CheckpointError("corrupt checkpoint header: not a JSON object")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unknown checkpoint format version {version!r}")
    try:
        config = ModelConfig.from_dict(header["config"])
        live_heads = header["live_heads"]
        manifest = header["tensors"]
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None

    payload = memoryview(blob)[16 + n:]
    expected_end = 0
    params = {}
    for entry in manifest:
        try:
            name, shape = entry["name"], tuple(entry["shape"])
            off, length = entry["byte_offset"], entry["byte_length"]
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"corrupt tensor manifest entry: {exc}") from None
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"tensor {name}: unsupported dtype {entry.get('dtype')!r}")
        if off != expected_end or length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {name}: manifest offsets/lengths are inconsistent")
        if off + length > len(payload):
            raise CheckpointError(
                f"payload truncated: tensor {name} needs bytes up to {off + length}, payload has {len(payload)}")
        arr = np.frombuffer(payload[off:off + length], dtype="<f4").astype(np.float32).reshape(shape)
        params[name] = Tensor(arr, requires_grad=True)
        expected_end = off + length
    if expected_end != len(payload):
        raise CheckpointError(f"payload length {len(payload)} does not match manifest total {expected_end}")
    try:
        return EncoderModel(config, params, live_heads)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint tensors do not match its config: {exc}") from None


def load_checkpoint(path) -> tuple[EncoderModel, ModelConfig]:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    model = parse_checkpoint(blob)
    return model, model.config


def attention_document(model: EncoderModel, features, tokens=None) -> dict:
    """Eval-mode attention weights over the live (non-pad) tokens of one sequence."""
    out = model.forward(features, training=False)
    mask = np.asarray(features.attention_mask).reshape(-1)
    n = int(mask.sum())
    ids = [int(i) for i in np.asarray(features.input_ids).reshape(-1)[:n]]
    layers = []
    for layer, probs in enumerate(out.attentions):
        heads = []
        for slot, head in enumerate(model.live_heads[layer]):
            weights = probs[0, slot, :n, :n]
            heads.append({"head": head, "weights": [[float(w) for w in row] for row in weights]})
        layers.append({"layer": layer, "heads": heads})
    cfg = model.config
    return {
        "tokens": list(tokens)[:n] if tokens is not None else ids,
        "input_ids": ids,
        "config": {
            "num_layers": cfg.num_layers,
            "num_heads": cfg.num_heads,
            "hidden_size": cfg.hidden_size,
            "live_heads": model.live_heads,
        },
        "layers": layers,
    }


def export_attention(model: EncoderModel, features, path, vocab=None) -> dict:
    tokens = None
    if vocab is not None:
        tokens = [vocab.token(int(i)) for i in np.asarray(features.input_ids).reshape(-1)]
    doc = attention_document(model, features, tokens)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return doc
