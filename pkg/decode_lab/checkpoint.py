"""Binary checkpoint format.

    b"DCODELAB" | uint32 version | uint32 header length | header JSON | arrays

The header carries the ModelConfig, the vocabulary and a manifest of
(name, shape) pairs; the arrays follow in manifest order as little-endian
float64. Loading validates every shape against the embedded config.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from pydantic import ValidationError

from decode_lab.autodiff import Tensor
from decode_lab.corpus import Vocabulary
from decode_lab.errors import CheckpointError, CheckpointNotFound
from decode_lab.files import PathLike, write_bytes_atomic
from decode_lab.model import DecodeModel, Parameters, parameter_shapes
from decode_lab.schemas import ModelConfig

logger = logging.getLogger("decode_lab.checkpoint")

MAGIC = b"DCODELAB"
VERSION = 1
_PREAMBLE = struct.Struct("<II")


@dataclass
class Checkpoint:
    params: Parameters
    config: ModelConfig
    vocab: Optional[Vocabulary] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def model(self) -> DecodeModel:
        return DecodeModel(self.config, self.params, self.vocab)


def save_checkpoint(
    path: PathLike,
    params: Parameters,
    model_config: ModelConfig,
    vocab: Optional[Vocabulary] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    names = list(params)
    header = {
        "model_config": model_config.model_dump(),
        "vocab": vocab.to_dict() if vocab is not None else None,
        "tensors": [{"name": name, "shape": list(params[name].shape)} for name in names],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, _PREAMBLE.pack(VERSION, len(header_bytes)), header_bytes]
    chunks.extend(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes() for name in names)
    return write_bytes_atomic(path, b"".join(chunks))


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointNotFound(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    start = len(MAGIC) + _PREAMBLE.size
    if len(blob) < start or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = _PREAMBLE.unpack_from(blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < start + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start : start + header_len].decode("utf-8"))
        config = ModelConfig.model_validate(header["model_config"])
        manifest = [(entry["name"], tuple(entry["shape"])) for entry in header["tensors"]]
        vocab = Vocabulary.from_dict(header["vocab"]) if header.get("vocab") else None
    except (ValueError, KeyError, TypeError, ValidationError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e

    expected = parameter_shapes(config)
    if dict(manifest) != dict(expected) or len(manifest) != len(expected):
        mismatched = sorted(
            name for name in set(expected) | {name for name, _ in manifest}
            if expected.get(name) != dict(manifest).get(name)
        )
        raise CheckpointError(f"{path}: tensors disagree with the embedded config: {mismatched[:5]}")

    offset = start + header_len
    total = sum(int(np.prod(shape)) for _, shape in manifest) * 8
    if len(blob) - offset != total:
        raise CheckpointError(f"{path}: expected {total} bytes of tensor data, found {len(blob) - offset}")
    params: Parameters = {}
    for name, shape in manifest:
        size = int(np.prod(shape))
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).astype(np.float64).reshape(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
        offset += size * 8
    # keep the canonical parameter order regardless of manifest order
    params = {name: params[name] for name in expected}
    logger.info(f"Loaded checkpoint {path} ({len(params)} tensors)")
    return Checkpoint(params, config, vocab, header.get("meta", {}))
