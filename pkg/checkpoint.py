"""
PANCKPT1 checkpoint files.

Layout: magic (8 bytes), config digest (64 ASCII hex chars), manifest length
(<u4), UTF-8 JSON manifest [{"name", "shape", "offset"}], then every
parameter as <f8 in declaration order. Offsets are bytes into the data section.
"""

import json
import logging
import os
import struct
from typing import List

import numpy as np

from errors import ArtifactMismatchError, DataError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PANCKPT1"
DIGEST_CHARS = 64


def _manifest(params) -> List[dict]:
    entries, offset = [], 0
    for p in params:
        entries.append({"name": p.name, "shape": list(p.shape), "offset": offset})
        offset += 8 * p.size
    return entries


def save_checkpoint(path: str, model, digest: str) -> None:
    if len(digest) != DIGEST_CHARS:
        raise ArtifactMismatchError(f"config digest must be {DIGEST_CHARS} hex chars, got {len(digest)}")
    params = model.parameters()
    manifest = json.dumps(_manifest(params), separators=(",", ":")).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(digest.encode("ascii"))
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for p in params:
            f.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    logger.info(f"Saved checkpoint with {len(params)} arrays to {path}")


def read_digest(path: str) -> str:
    try:
        with open(path, "rb") as f:
            head = f.read(len(CHECKPOINT_MAGIC) + DIGEST_CHARS)
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if head[:8] != CHECKPOINT_MAGIC or len(head) < 8 + DIGEST_CHARS:
        raise DataError(f"{path} is not a PANCKPT1 checkpoint")
    try:
        return head[8:].decode("ascii")
    except UnicodeDecodeError as e:
        raise DataError(f"checkpoint {path} has a corrupt config digest") from e


def load_checkpoint(path: str, model, expected_digest: str) -> None:
    """Overwrite the model's parameters in place, bit-exactly."""
    digest = read_digest(path)
    if digest != expected_digest:
        raise ArtifactMismatchError(
            f"checkpoint {path} was written for config {digest[:16]}, active config is {expected_digest[:16]}"
        )
    with open(path, "rb") as f:
        blob = f.read()
    pos = 8 + DIGEST_CHARS
    if len(blob) < pos + 4:
        raise DataError(f"checkpoint {path} is truncated inside its header")
    (size,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    try:
        manifest = json.loads(blob[pos:pos + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"checkpoint {path} has a corrupt manifest: {e}") from e
    data = blob[pos + size:]

    params = model.parameters()
    if _manifest(params) != manifest:
        raise ArtifactMismatchError(f"checkpoint {path} does not match the model's parameter layout")
    if len(data) != sum(8 * p.size for p in params):
        raise DataError(f"checkpoint {path} is truncated")
    for p, entry in zip(params, manifest):
        values = np.frombuffer(data, dtype="<f8", count=p.size, offset=entry["offset"])
        p.value[...] = values.reshape(p.shape)
        p.zero_grad()
    logger.info(f"Loaded {len(params)} arrays from {path}")
