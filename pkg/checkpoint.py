"""
Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"DDBCKPT\\0"
    u32       format version
    u32 + ..  metadata, UTF-8 JSON with sorted keys
    u32       record count
    records   u32 name length, UTF-8 name, u32 ndim, ndim x u64 dims,
              prod(dims) x f64 payload

The same container stores model parameters and prototype dumps; the
metadata ``kind`` field tells them apart.
"""
import json
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from model import ArchSpec, SegModel, init_model
from numerics import RngState
from utils import CheckpointFormatError, DatasetError

MAGIC = b"DDBCKPT\0"
VERSION = 1


@dataclass
class Checkpoint:
    """
    Decoded checkpoint.

    Attributes:
        tensors: Named float64 arrays, in file order
        metadata: kind, arch, rng seed/algorithm, round, stage tag, stage index
    """
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def arch(self) -> Optional[ArchSpec]:
        arch = self.metadata.get("arch")
        return ArchSpec.from_dict(arch) if arch else None

    @property
    def round_index(self) -> int:
        return int(self.metadata.get("round", 0))

    @property
    def stage(self) -> str:
        return str(self.metadata.get("stage", ""))

    @property
    def stage_index(self) -> int:
        return int(self.metadata.get("stage_index", 0))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        array = np.asarray(value, dtype="<f8").copy(order="C")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise CheckpointFormatError(
                f"Truncated checkpoint: needed {size} bytes for {what} at offset {self.offset}, "
                f"only {len(self.payload) - self.offset} left"
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(payload: bytes) -> Checkpoint:
    """
    Parse container bytes.

    Args:
        payload: File contents

    Returns:
        Checkpoint

    Raises:
        CheckpointFormatError: bad magic, unsupported version, truncation,
            malformed metadata or trailing bytes
    """
    reader = _Reader(payload)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("Not a checkpoint file (bad magic)")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version} (expected {VERSION})")
    meta_bytes = reader.take(reader.u32("metadata length"), "metadata")
    try:
        metadata = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"Malformed checkpoint metadata: {e}") from e

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32("record count")):
        try:
            name = reader.take(reader.u32("name length"), "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"Malformed record name: {e}") from e
        ndim = reader.u32(f"{name} ndim")
        shape = struct.unpack(f"<{ndim}Q", reader.take(8 * ndim, f"{name} shape"))
        count = 1
        for dim in shape:
            count *= int(dim)
        remaining = len(payload) - reader.offset
        if 8 * count > remaining:
            raise CheckpointFormatError(
                f"Record {name} declares shape {tuple(shape)} ({count} values) "
                f"but only {remaining} bytes remain"
            )
        data = np.frombuffer(reader.take(8 * count, f"{name} payload"), dtype="<f8")
        tensors[name] = data.astype(np.float64).reshape(shape)
    if reader.offset != len(payload):
        raise CheckpointFormatError(f"{len(payload) - reader.offset} trailing bytes after last record")
    return Checkpoint(tensors=tensors, metadata=metadata)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    try:
        with open(path, "wb") as f:
            f.write(encode_checkpoint(ckpt))
    except OSError as e:
        raise DatasetError(f"Could not write checkpoint {path}: {e}") from e


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise DatasetError(f"Could not read checkpoint {path}: {e}") from e
    return decode_checkpoint(payload)


def model_checkpoint(
    model: SegModel,
    seed: int,
    round_index: int = 0,
    stage: str = "",
    stage_index: int = 0,
) -> Checkpoint:
    """Snapshot a model's parameters together with run position metadata."""
    return Checkpoint(
        tensors=model.state_dict(),
        metadata={
            "kind": "model",
            "arch": model.arch.to_dict(),
            "rng": {"seed": int(seed), "algorithm": RngState.algorithm},
            "round": int(round_index),
            "stage": stage,
            "stage_index": int(stage_index),
        },
    )


def model_from_checkpoint(ckpt: Checkpoint) -> SegModel:
    """Rebuild a SegModel from a model checkpoint."""
    if ckpt.metadata.get("kind") != "model" or ckpt.arch is None:
        raise CheckpointFormatError("Checkpoint does not hold model parameters")
    model = init_model(ckpt.arch, None, RngState(0))
    try:
        model.load_state_dict(ckpt.tensors)
    except ValueError as e:
        raise CheckpointFormatError(str(e)) from e
    for p in model.params.values():
        p.requires_grad = True
    return model


def prototype_checkpoint(prototypes: Dict[str, Any], round_index: int, stage_index: int) -> Checkpoint:
    """
    Pack named PrototypeSets (e.g. 'region', 'class') into one container.

    Records are ``<name>.centroids`` (K, D) and ``<name>.counts`` (K,).
    """
    tensors: Dict[str, np.ndarray] = {}
    for name, protos in prototypes.items():
        tensors[f"{name}.centroids"] = protos.centroids
        tensors[f"{name}.counts"] = protos.counts.astype(np.float64)
    return Checkpoint(
        tensors=tensors,
        metadata={"kind": "prototypes", "round": int(round_index), "stage": "prototypes",
                  "stage_index": int(stage_index)},
    )


def prototypes_from_checkpoint(ckpt: Checkpoint) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Unpack a prototype dump into ``{name: (centroids, counts)}``."""
    if ckpt.metadata.get("kind") != "prototypes":
        raise CheckpointFormatError("Checkpoint does not hold prototypes")
    names = sorted({key.rsplit(".", 1)[0] for key in ckpt.tensors})
    return {
        name: (ckpt.tensors[f"{name}.centroids"], ckpt.tensors[f"{name}.counts"].astype(np.int64))
        for name in names
    }
