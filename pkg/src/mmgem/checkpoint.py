"""Bit-exact named-tensor checkpoints.

Binary layout (little-endian throughout):
  8 bytes   magic "MMGEM1\\0\\0"
  u32       tensor count
  per tensor (sorted by name):
    u16     name length, then utf-8 name
    u8      rank
    u32*r   dims
    f32*n   row-major payload
  u32       CRC32 of everything above

A JSON sidecar (path + ".json") carries stage, config hash, seed,
vocabulary reference, the full model config, and the checksum; it is
written canonically so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib

import numpy as np

MAGIC = b"MMGEM1\x00\x00"


class CheckpointError(ValueError):
    pass


class ArchitectureMismatch(CheckpointError):
    def __init__(self, missing, extra, shape_diffs):
        self.missing = missing
        self.extra = extra
        self.shape_diffs = shape_diffs
        parts = []
        if missing:
            parts.append(f"missing from file: {sorted(missing)}")
        if extra:
            parts.append(f"unexpected in file: {sorted(extra)}")
        if shape_diffs:
            parts.append(f"shape mismatches: {shape_diffs}")
        super().__init__("; ".join(parts))


def config_hash(cfg_dict):
    blob = json.dumps(cfg_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_checkpoint(path, tensors, meta):
    """tensors: name -> f32 ndarray. meta: JSON-serializable dict."""
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} is {arr.dtype}, need float32")
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(chunks)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", crc))
    meta = dict(meta)
    meta["checksum"] = f"{crc:08x}"
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def read_checkpoint(path):
    """-> (name -> f32 ndarray, meta dict). Verifies magic, layout, CRC."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < len(MAGIC) + 8:
        raise CheckpointError(f"truncated file: {len(buf)} bytes")
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:len(MAGIC)]!r} "
                              f"(expected {MAGIC!r}): version mismatch or not "
                              "a checkpoint")
    body, stored_crc = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("checksum mismatch: file is corrupt")

    off = len(MAGIC)

    def need(n, what):
        nonlocal off
        if off + n > len(body):
            raise CheckpointError(f"truncated {what} at offset {off}")
        piece = body[off:off + n]
        off += n
        return piece

    (count,) = struct.unpack("<I", need(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", need(2, "name length"))
        name = need(nlen, "name").decode()
        (rank,) = struct.unpack("<B", need(1, "rank"))
        dims = struct.unpack(f"<{rank}I", need(4 * rank, "dims"))
        n_items = 1
        for d in dims:
            n_items *= d
        payload = need(4 * n_items, f"payload of {name!r}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if off != len(body):
        raise CheckpointError(f"{len(body) - off} trailing bytes at offset {off}")
    try:
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        meta = {}
    return tensors, meta


def save_model(model, path, stage, vocab_ref=""):
    if model.store.dtype != np.float32:
        raise CheckpointError("checkpoints are float32-only")
    cfg = model.cfg.to_dict()
    meta = {
        "stage": stage,
        "seed": model.seed,
        "config_hash": config_hash(cfg),
        "model_config": cfg,
        "vocab_ref": vocab_ref,
        "vocab_size": len(model.vocab),
    }
    write_checkpoint(path, {k: p.data for k, p in model.store.items()}, meta)


def load_into_model(model, path):
    """Fill an existing model's parameters; mismatched names/shapes fail."""
    tensors, meta = read_checkpoint(path)
    want = {k: p.data.shape for k, p in model.store.items()}
    missing = set(want) - set(tensors)
    extra = set(tensors) - set(want)
    shape_diffs = {k: (want[k], tensors[k].shape)
                   for k in set(want) & set(tensors)
                   if tuple(want[k]) != tuple(tensors[k].shape)}
    if missing or extra or shape_diffs:
        raise ArchitectureMismatch(missing, extra, shape_diffs)
    for k, p in model.store.items():
        p.assign(tensors[k])
    return meta


def load_model(path, vocab, model_cls=None):
    """Rebuild a model from the sidecar's config and load the weights."""
    from .model import Model, ModelConfig

    tensors, meta = read_checkpoint(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path}.json sidecar missing model_config")
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = (model_cls or Model)(cfg, vocab, seed=int(meta.get("seed", 0)))
    if meta.get("vocab_size") not in (None, len(vocab)):
        raise CheckpointError(
            f"vocabulary size {len(vocab)} != checkpoint {meta['vocab_size']}")
    load_into_model(model, path)
    return model, meta


def diff_checkpoints(path_a, path_b):
    """Names whose payload bytes differ between two checkpoints."""
    ta, _ = read_checkpoint(path_a)
    tb, _ = read_checkpoint(path_b)
    if set(ta) != set(tb):
        raise ArchitectureMismatch(set(tb) - set(ta), set(ta) - set(tb), {})
    return sorted(k for k in ta
                  if ta[k].shape != tb[k].shape
                  or ta[k].tobytes() != tb[k].tobytes())
