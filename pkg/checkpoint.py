"""Binary checkpoint format.

Layout, all little-endian::

    b"PANC"                  magic
    u32                      format version
    u32                      header length in bytes
    header                   compact JSON, keys sorted: configs, iteration,
                             seed and the array table [{name, group, shape}]
    f8[...] per array        raw parameter then velocity data, table order

The header is written with sorted keys and no whitespace, so saving the same
checkpoint twice gives identical bytes. Episode sampling is counter-based,
so ``(seed, iteration)`` is the complete RNG state of a training run.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from encoder import BlockConfig, EncoderConfig, EncoderParams
from validation import CheckpointError, validate_existing_file

logger = logging.getLogger(__name__)

MAGIC = b"PANC"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    encoder: EncoderConfig
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    iteration: int = 0
    seed: int = 0
    train: dict[str, Any] = field(default_factory=dict)
    dataset: dict[str, Any] = field(default_factory=dict)
    split: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def encoder_params(self) -> EncoderParams:
        return EncoderParams.from_arrays(self.encoder, self.params)


def _encoder_to_dict(config: EncoderConfig) -> dict[str, Any]:
    return {"in_channels": config.in_channels, "kernel_size": config.kernel_size,
            "blocks": [str(b) for b in config.blocks]}


def _encoder_from_dict(data: dict[str, Any]) -> EncoderConfig:
    return EncoderConfig(in_channels=int(data["in_channels"]), kernel_size=int(data["kernel_size"]),
                         blocks=tuple(BlockConfig.parse(b) for b in data["blocks"]))


def to_bytes(ckpt: Checkpoint) -> bytes:
    """Serialise a checkpoint; identical checkpoints give identical bytes."""
    if list(ckpt.velocity) != list(ckpt.params):
        raise CheckpointError("Velocity buffers must be named and ordered like the parameters")
    arrays = [("params", n, a) for n, a in ckpt.params.items()]
    arrays += [("velocity", n, a) for n, a in ckpt.velocity.items()]
    header = {
        "encoder": _encoder_to_dict(ckpt.encoder),
        "iteration": int(ckpt.iteration),
        "seed": int(ckpt.seed),
        "train": ckpt.train,
        "dataset": ckpt.dataset,
        "split": ckpt.split,
        "arrays": [{"group": g, "name": n, "shape": list(np.shape(a))} for g, n, a in arrays],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_PREAMBLE.pack(MAGIC, ckpt.version, len(header_bytes)), header_bytes]
    chunks.extend(np.ascontiguousarray(a, dtype=_DTYPE).tobytes() for _, _, a in arrays)
    return b"".join(chunks)


def from_bytes(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    """Parse bytes produced by ``to_bytes``.

    Raises:
        CheckpointError: On bad magic, an unsupported version, a malformed
            header or a size mismatch
    """
    if len(blob) < _PREAMBLE.size:
        raise CheckpointError(f"Checkpoint {source} is truncated ({len(blob)} bytes)")
    magic, version, header_len = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"Checkpoint {source} has bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Checkpoint {source} has version {version}, this build reads {FORMAT_VERSION}")
    offset = _PREAMBLE.size
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
        encoder = _encoder_from_dict(header["encoder"])
        table = header["arrays"]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"Checkpoint {source} has a malformed header: {e}")
    offset += header_len

    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "velocity": {}}
    for entry in table:
        if entry.get("group") not in groups:
            raise CheckpointError(f"Checkpoint {source} names unknown array group {entry.get('group')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset + nbytes > len(blob):
            raise CheckpointError(f"Checkpoint {source} is truncated inside array {entry['name']}")
        data = np.frombuffer(blob, dtype=_DTYPE, count=nbytes // _DTYPE.itemsize, offset=offset)
        groups[entry["group"]][entry["name"]] = data.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"Checkpoint {source} has {len(blob) - offset} trailing bytes")

    ckpt = Checkpoint(encoder=encoder, params=groups["params"], velocity=groups["velocity"],
                      iteration=int(header["iteration"]), seed=int(header["seed"]),
                      train=header.get("train", {}), dataset=header.get("dataset", {}),
                      split=header.get("split", {}), version=version)
    ckpt.encoder_params()  # shape check against the encoder config
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write a checkpoint, replacing any existing file atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    logger.info(f"Saved checkpoint at iteration {ckpt.iteration} to {path}")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint file.

    Raises:
        FileNotFoundError: If the file does not exist
        CheckpointError: If the file is not a readable checkpoint
    """
    path = validate_existing_file(path)
    return from_bytes(path.read_bytes(), str(path))


def describe_checkpoint(path: str | Path) -> dict[str, Any]:
    """Summary of a checkpoint file without the array data."""
    ckpt = load_checkpoint(path)
    return {
        "path": str(Path(path)),
        "version": ckpt.version,
        "iteration": ckpt.iteration,
        "seed": ckpt.seed,
        "encoder_blocks": ",".join(str(b) for b in ckpt.encoder.blocks),
        "feature_dim": ckpt.encoder.feature_dim,
        "downsample_factor": ckpt.encoder.downsample_factor,
        "parameters": int(sum(a.size for a in ckpt.params.values())),
        "train": ckpt.train,
    }
