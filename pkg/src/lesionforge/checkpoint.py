"""Named-tensor checkpoint container.

Layout: magic ``LFCKPT1\\n``, an 8-byte little-endian header length, a
canonical-JSON header (format version, model kind, config digest,
metadata, tensor manifest), the raw little-endian payload, and a CRC-32
trailer over the payload. Serialization is canonical, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"LFCKPT1\n"
FORMAT_VERSION = 1
_OPTIM_PREFIX = "optim/"


def config_digest(config) -> str:
    """Stable short digest of a config mapping (order-insensitive)."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class CheckpointData:
    """Decoded container: model arrays plus optional optimizer state."""

    model_kind: str
    digest: str
    arrays: dict
    meta: dict = field(default_factory=dict)
    optimizer_arrays: dict = field(default_factory=dict)
    optimizer_step: int | None = None

    @property
    def config(self) -> dict:
        return self.meta.get("config", {})


def save_checkpoint(
    path,
    store,
    model_kind: str,
    config: dict | None = None,
    optimizer=None,
    meta: dict | None = None,
) -> Path:
    """Write every named tensor (and optimizer slots, if given) to disk."""
    arrays = {name: np.ascontiguousarray(p.data) for name, p in store.items()}
    optimizer_step = None
    if optimizer is not None:
        optimizer_step = optimizer.t
        for name, arr in optimizer.state_arrays().items():
            arrays[_OPTIM_PREFIX + name] = np.ascontiguousarray(arr)

    meta = dict(meta or {})
    if config is not None:
        meta["config"] = config
    manifest = []
    offset = 0
    payload_parts = []
    for name in sorted(arrays):
        arr = arrays[name].astype(arrays[name].dtype.newbyteorder("<"))
        raw = arr.tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
            }
        )
        payload_parts.append(raw)
        offset += len(raw)
    payload = b"".join(payload_parts)
    header = {
        "format_version": FORMAT_VERSION,
        "model_kind": model_kind,
        "config_digest": config_digest(meta.get("config", {})),
        "optimizer_step": optimizer_step,
        "meta": meta,
        "manifest": manifest,
        "payload_bytes": len(payload),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))
    return path


def load_checkpoint(path, expect_kind: str | None = None) -> CheckpointData:
    """Decode and fully validate a container before returning any tensor."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint container (bad magic)")
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    header_start = len(MAGIC) + 8
    header_end = header_start + header_len
    if len(raw) < header_end:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(raw[header_start:header_end])
    except ValueError as exc:
        raise CheckpointError(f"{path} has an unreadable header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {version}, this build reads "
            f"{FORMAT_VERSION}"
        )
    kind = header.get("model_kind", "")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(
            f"{path} holds a {kind!r} model, expected {expect_kind!r}"
        )
    payload_bytes = int(header.get("payload_bytes", 0))
    payload_end = header_end + payload_bytes
    if len(raw) < payload_end + 4:
        raise CheckpointError(
            f"{path} is truncated: payload needs {payload_bytes} bytes plus "
            f"a 4-byte checksum, file has {len(raw) - header_end}"
        )
    payload = raw[header_end:payload_end]
    (stored_crc,) = struct.unpack_from("<I", raw, payload_end)
    if zlib.crc32(payload) != stored_crc:
        raise CheckpointError(f"{path} failed its payload checksum (corrupt)")

    arrays, optim_arrays = {}, {}
    seen_end = 0
    for entry in header["manifest"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        start = int(entry["offset"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if start < seen_end or start + nbytes > payload_bytes:
            raise CheckpointError(
                f"{path} manifest entry {entry['name']!r} overlaps or "
                f"exceeds the payload"
            )
        seen_end = start + nbytes
        arr = np.frombuffer(
            payload, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
            offset=start,
        ).reshape(shape).copy()
        name = entry["name"]
        if name.startswith(_OPTIM_PREFIX):
            optim_arrays[name[len(_OPTIM_PREFIX):]] = arr
        else:
            arrays[name] = arr
    return CheckpointData(
        model_kind=kind,
        digest=header.get("config_digest", ""),
        arrays=arrays,
        meta=header.get("meta", {}),
        optimizer_arrays=optim_arrays,
        optimizer_step=header.get("optimizer_step"),
    )


def load_into_store(store, data: CheckpointData, prefix: str = "") -> None:
    """Copy checkpoint tensors into an existing parameter store.

    Name-set mismatches report the first 10 offenders on each side.
    """
    want = {name for name, _ in store.items()}
    have = {
        name[len(prefix):] for name in data.arrays if name.startswith(prefix)
    }
    missing = sorted(want - have)
    extra = sorted(have - want)
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match the model: missing {missing[:10]}, "
            f"unexpected {extra[:10]}"
        )
    for name, param in store.items():
        arr = data.arrays[prefix + name]
        if arr.shape != param.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {arr.shape} in the checkpoint "
                f"but {param.shape} in the model"
            )
        param.data[...] = arr
