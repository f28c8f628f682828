"""Binary checkpoint container.

Layout: magic "LOAE", u32 version, u64 header length, JSON header
(config, vocabulary, feature stats, tensor table), then raw little-endian
f32 tensor blobs in header-declared order. The header is serialized with
sorted keys and the tensor table sorted by name, so save -> load -> save
round-trips byte-identically.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .data import IoError
from .decoder import Vocabulary
from .model import CaptionModel, PipelineConfig, build_model

MAGIC = b"LOAE"
VERSION = 1


class CorruptCheckpoint(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


def _tensor_table(model: CaptionModel) -> list[tuple[str, "np.ndarray"]]:
    params = model.named_parameters()
    return sorted(((name, p.data) for name, p in params.items()),
                  key=lambda kv: kv[0])


def serialize(model: CaptionModel) -> bytes:
    table = _tensor_table(model)
    header = {
        "version": VERSION,
        "config": model.cfg.to_dict(),
        "vocab": model.vocab.tokens,
        "feature_stats": {"mean": model.encoder.feat_mean,
                          "std": model.encoder.feat_std},
        "tensors": [{"name": name, "dtype": "f32", "shape": list(arr.shape)}
                    for name, arr in table],
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<Q", len(header_bytes)), header_bytes]
    parts.extend(arr.astype("<f4").tobytes(order="C") for _, arr in table)
    return b"".join(parts)


def save_checkpoint(model: CaptionModel, path) -> None:
    blob = serialize(model)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as e:
        raise IoError(str(e)) from e


def deserialize(blob: bytes) -> CaptionModel:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise VersionMismatch(f"format version {version}, expected {VERSION}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    body_start = 16 + header_len
    if len(blob) < body_start:
        raise CorruptCheckpoint("truncated header")
    try:
        header = json.loads(blob[16:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"unreadable header ({e})") from e
    try:
        if header["version"] != VERSION:
            raise VersionMismatch("header version disagrees with binary field")
        cfg = PipelineConfig.from_dict(header["config"])
        vocab = Vocabulary.from_tokens(header["vocab"])
        stats = header["feature_stats"]
        tensors = header["tensors"]
    except VersionMismatch:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptCheckpoint(f"invalid header contents ({e})") from e

    model = build_model(cfg, vocab)
    model.encoder.set_feature_stats(float(stats["mean"]), float(stats["std"]))
    params = model.named_parameters()
    expected = sorted(params.keys())
    declared = [t["name"] for t in tensors]
    if declared != expected:
        raise CorruptCheckpoint("tensor table does not match the model")

    offset = body_start
    for entry in tensors:
        shape = tuple(int(s) for s in entry["shape"])
        if entry.get("dtype") != "f32":
            raise CorruptCheckpoint(f"unsupported dtype for {entry['name']}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise CorruptCheckpoint("truncated tensor data")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        param = params[entry["name"]]
        if tuple(param.data.shape) != shape:
            raise CorruptCheckpoint(
                f"shape mismatch for {entry['name']}: "
                f"{shape} vs {tuple(param.data.shape)}")
        param.data = np.ascontiguousarray(arr.reshape(shape).astype(np.float32))
        offset += nbytes
    if offset != len(blob):
        raise CorruptCheckpoint("trailing bytes after tensor data")
    return model


def load_checkpoint(path) -> CaptionModel:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise IoError(str(e)) from e
    return deserialize(blob)
