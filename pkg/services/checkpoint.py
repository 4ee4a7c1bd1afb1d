# Checkpoint — versioned binary snapshot of a trained model
#
# Layout:
#   b"EARTHCKP" | u32 format version | u32 header length | JSON header | tensor payload
# The header is a CheckpointHeader; the payload is every tensor it lists,
# in order, as little-endian float64. No timestamps, so equal runs give
# equal bytes.

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np
from pydantic import ValidationError

from models.schemas import CheckpointHeader, TensorSpec, TrainConfig
from services.data_pipeline import Normalizer
from services.earth_model import ModelParams
from services.errors import ContractError, FormatError
from services.gltg import TransmissionGraph, normalized_adjacency

logger = logging.getLogger(__name__)

MAGIC          = b"EARTHCKP"
FORMAT_VERSION = 1
_PREFIX        = struct.Struct("<II")


@dataclass(frozen=True)
class Checkpoint:
    params:        ModelParams
    config:        TrainConfig
    dataset:       str
    epoch:         int
    best_val_rmse: float
    region_names:  List[str]
    normalizer:    Normalizer
    graph:         TransmissionGraph

    def _tensors(self) -> Dict[str, np.ndarray]:
        tensors = dict(self.params.items())
        tensors["normalizer.mean"] = self.normalizer.mean
        tensors["normalizer.std"]  = self.normalizer.std
        tensors["graph.A"]         = self.graph.A
        tensors["graph.A_tilde"]   = self.graph.A_tilde_static
        return tensors


def to_bytes(ckpt: Checkpoint) -> bytes:
    if not np.isfinite(ckpt.best_val_rmse):
        raise ContractError(f"refusing to save a checkpoint with best_val_rmse={ckpt.best_val_rmse}")
    tensors = ckpt._tensors()
    header = CheckpointHeader(
        format_version=FORMAT_VERSION,
        config=ckpt.config,
        dataset=ckpt.dataset,
        epoch=ckpt.epoch,
        best_val_rmse=ckpt.best_val_rmse,
        region_names=ckpt.region_names,
        tensors=[TensorSpec(name=k, shape=list(v.shape)) for k, v in tensors.items()],
    )
    head = header.model_dump_json().encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in tensors.values())
    return MAGIC + _PREFIX.pack(FORMAT_VERSION, len(head)) + head + payload


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError("not an EARTH checkpoint (bad magic)")
    offset = len(MAGIC)
    if len(raw) < offset + _PREFIX.size:
        raise FormatError("truncated checkpoint prefix")
    version, head_len = _PREFIX.unpack_from(raw, offset)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    offset += _PREFIX.size
    try:
        header = CheckpointHeader.model_validate_json(raw[offset:offset + head_len])
    except ValidationError as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    offset += head_len

    tensors: Dict[str, np.ndarray] = {}
    for spec in header.tensors:
        count = int(np.prod(spec.shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise FormatError(f"checkpoint truncated inside tensor '{spec.name}'")
        tensors[spec.name] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(spec.shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes after checkpoint payload")

    A, A_tilde = tensors.pop("graph.A"), tensors.pop("graph.A_tilde")
    normalizer = Normalizer(mean=tensors.pop("normalizer.mean"), std=tensors.pop("normalizer.std"))
    return Checkpoint(
        params=ModelParams(tensors, header.config.n_heads),
        config=header.config,
        dataset=header.dataset,
        epoch=header.epoch,
        best_val_rmse=header.best_val_rmse,
        region_names=header.region_names,
        normalizer=normalizer,
        graph=TransmissionGraph(A=A, A_tilde_static=A_tilde, deg_norm=normalized_adjacency(A_tilde)),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    logger.info("checkpoint saved path=%s epoch=%d best_val_rmse=%.6g", path, ckpt.epoch, ckpt.best_val_rmse)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
