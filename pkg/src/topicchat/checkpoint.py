"""Checkpoint directory format: a JSON manifest plus a raw float blob.

Layout on disk:

    <path>/manifest.json   {"format": "ckpt-v1", "config": {...},
                            "tensors": [{"name", "shape", "offset"}, ...]}
    <path>/params.bin      concatenated little-endian float32 values

Offsets are byte positions into ``params.bin``. Round-trips are bit-exact:
the bytes written for each tensor are exactly ``data.astype('<f4')``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict

import numpy as np

from .nn import ModelConfig, Parameters, parameter_schema
from .tensor import Tensor

CHECKPOINT_FORMAT = "ckpt-v1"
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


class CheckpointError(ValueError):
    pass


def save_checkpoint(p: Parameters, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, tensor in p.tensors.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.data.shape),
            "offset": offset,
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(p.config),
        "tensors": entries,
    }
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    with open(os.path.join(path, BLOB_NAME), "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path: str) -> Parameters:
    """Reconstruct Parameters; fails loudly on any inconsistency.

    Raises ``CheckpointError`` for: unknown format version, manifest shapes
    that disagree with the config's parameter schema, missing/extra tensors,
    and a blob shorter than the manifest demands (the error names the byte
    offset at which data ran out).
    """
    manifest_path = os.path.join(path, MANIFEST_NAME)
    blob_path = os.path.join(path, BLOB_NAME)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"{path}: missing {MANIFEST_NAME}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{manifest_path}: invalid JSON ({exc.msg})") from None

    fmt = manifest.get("format")
    if fmt != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path}: format {fmt!r} not supported (expected {CHECKPOINT_FORMAT!r})"
        )
    try:
        config = ModelConfig(**manifest["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config block ({exc})") from None

    expected = {name: shape for name, shape, _ in parameter_schema(config)}
    listed = {e["name"]: e for e in manifest.get("tensors", [])}
    if set(listed) != set(expected):
        missing = sorted(set(expected) - set(listed))
        extra = sorted(set(listed) - set(expected))
        raise CheckpointError(
            f"{path}: tensor set mismatch (missing {missing}, extra {extra})"
        )
    for name, entry in listed.items():
        if tuple(entry["shape"]) != expected[name]:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: manifest says "
                f"{tuple(entry['shape'])}, config implies {expected[name]}"
            )

    try:
        with open(blob_path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: missing {BLOB_NAME}") from None

    tensors: dict[str, Tensor] = {}
    for name, shape, _ in parameter_schema(config):
        entry = listed[name]
        offset = entry["offset"]
        nbytes = int(np.prod(shape)) * 4
        end = offset + nbytes
        if end > len(blob):
            raise CheckpointError(
                f"{blob_path}: truncated blob, {name} needs bytes "
                f"[{offset}, {end}) but file ends at byte {len(blob)}"
            )
        values = np.frombuffer(blob, dtype="<f4", count=nbytes // 4,
                               offset=offset)
        data = values.reshape(shape).astype(np.float32)
        tensors[name] = Tensor(data.copy(), requires_grad=True)
    return Parameters(config=config, tensors=tensors)


def checkpoint_hash(path: str) -> str:
    """sha256 over manifest bytes then blob bytes; stable identity for /healthz."""
    digest = hashlib.sha256()
    for name in (MANIFEST_NAME, BLOB_NAME):
        with open(os.path.join(path, name), "rb") as fh:
            digest.update(fh.read())
    return digest.hexdigest()
