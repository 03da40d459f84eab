"""Versioned binary checkpoints with config digests.

File layout: magic, format version (u32 LE), header length (u32 LE),
UTF-8 JSON header, then raw little-endian float32 array bytes in header
order. The header records a digest of the producing configuration; loads
verify it so stale or mismatched checkpoints fail loudly instead of
silently producing garbage.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AGCKPT\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class ConfigDigestMismatch(CheckpointError):
    """Checkpoint was produced under a different configuration."""


def config_digest(config) -> str:
    """Hex digest of a configuration (mapping or dataclass), canonical order."""
    if dataclasses.is_dataclass(config) and not isinstance(config, type):
        config = dataclasses.asdict(config)
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def arrays_digest(arrays: dict) -> str:
    """Order-independent digest over named arrays (names sorted)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(a.dtype).encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path, kind: str, digest: str, arrays: dict, extra: dict | None = None) -> None:
    """Write named float32 blobs under a versioned header.

    `digest` is the config digest of whatever produced the arrays; `extra`
    holds small JSON-safe metadata (step counters, configs for rebuild).
    """
    names = sorted(arrays)
    specs = []
    blobs = []
    payload = hashlib.sha256()
    for name in names:
        a = np.ascontiguousarray(arrays[name], dtype=np.float32)
        if not a.flags.c_contiguous:
            a = np.ascontiguousarray(a)
        specs.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.astype("<f4", copy=False).tobytes())
        payload.update(blobs[-1])
    header = {
        "kind": kind,
        "config_digest": digest,
        "arrays": specs,
        "arrays_sha256": payload.hexdigest(),
        "extra": extra or {},
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(hdr)))
        f.write(hdr)
        for b in blobs:
            f.write(b)


def load_checkpoint(path, kind: str | None = None, expected_digest: str | None = None):
    """Read a checkpoint; returns (kind, digest, arrays, extra).

    Rejects unknown format versions, wrong kinds and digest mismatches.
    """
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hdr_len = struct.unpack("<II", f.read(8))
        if version > FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {version} is newer than supported ({FORMAT_VERSION})")
        header = json.loads(f.read(hdr_len).decode("utf-8"))
        if kind is not None and header["kind"] != kind:
            raise CheckpointError(
                f"{path}: expected a {kind!r} checkpoint, found {header['kind']!r}")
        if expected_digest is not None and header["config_digest"] != expected_digest:
            raise ConfigDigestMismatch(
                f"{path}: config digest {header['config_digest'][:12]}... does not match "
                f"expected {expected_digest[:12]}...")
        arrays = {}
        payload = hashlib.sha256()
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise CheckpointError(f"{path}: truncated array {spec['name']!r}")
            payload.update(buf)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        expected_sha = header.get("arrays_sha256")
        if expected_sha is not None and payload.hexdigest() != expected_sha:
            raise CheckpointError(f"{path}: array data does not match its recorded digest")
    return header["kind"], header["config_digest"], arrays, header.get("extra", {})


def module_arrays(module) -> dict:
    """Torch module state as plain float32 numpy arrays."""
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module, arrays: dict) -> None:
    import torch

    state = module.state_dict()
    missing = set(state) - set(arrays)
    extra_keys = set(arrays) - set(state)
    if missing or extra_keys:
        raise CheckpointError(
            f"state mismatch: missing {sorted(missing)[:4]}, unexpected {sorted(extra_keys)[:4]}")
    module.load_state_dict({k: torch.from_numpy(np.array(arrays[k])).reshape(state[k].shape)
                            for k in state})
