"""Little-endian binary container for model and mixture parameters.

Layout::

    b"RGMP"  u32 version  4-byte section tag
    u32 meta_len  meta (UTF-8 JSON)
    u32 n_entries
    per entry: u16 name_len, name, u8 ndim, u32 dims..., u64 offset
    raw float64 data, offsets relative to the start of the data block

Tags: ``ARGN`` for policy checkpoints, ``GMM0`` for mixture parameters.
Writing is deterministic: identical arrays and metadata give identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .argn import PolicyModel, arch_from_dict, arch_to_dict
from .gmm import GmmParams
from .numerics import ShapeError

MAGIC = b"RGMP"
VERSION = 1
TAG_MODEL = b"ARGN"
TAG_GMM = b"GMM0"


class CheckpointError(ValueError):
    """Malformed or mismatched container."""


def write_container(path, tag: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(tag) != 4:
        raise ValueError("section tag must be 4 bytes")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    head = io.BytesIO()
    head.write(MAGIC)
    head.write(struct.pack("<I", VERSION))
    head.write(tag)
    head.write(struct.pack("<I", len(meta_bytes)))
    head.write(meta_bytes)
    head.write(struct.pack("<I", len(arrays)))
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        head.write(struct.pack("<H", len(raw)))
        head.write(raw)
        head.write(struct.pack("<B", a.ndim))
        head.write(struct.pack(f"<{a.ndim}I", *a.shape))
        head.write(struct.pack("<Q", offset))
        blob = a.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    Path(path).write_bytes(head.getvalue() + b"".join(blobs))


def read_container(path, expect_tag: bytes | None = None) -> tuple[bytes, dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    buf = io.BytesIO(data)

    def take(n: int) -> bytes:
        chunk = buf.read(n)
        if len(chunk) != n:
            raise CheckpointError(f"{path}: truncated container")
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an RGMP container")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    tag = take(4)
    if expect_tag is not None and tag != expect_tag:
        raise CheckpointError(f"{path}: section {tag!r}, expected {expect_tag!r}")
    (meta_len,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad metadata ({exc})") from None
    (count,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (offset,) = struct.unpack("<Q", take(8))
        entries.append((name, shape, offset))
    base = buf.tell()
    arrays = {}
    for name, shape, offset in entries:
        size = int(np.prod(shape, dtype=np.int64)) * 8
        start = base + offset
        if start + size > len(data):
            raise CheckpointError(f"{path}: entry {name} runs past end of file")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=start).reshape(shape).astype(np.float64)
    return tag, meta, arrays


def save_model(path, model: PolicyModel, extra: dict | None = None) -> None:
    meta = {"arch": arch_to_dict(model.arch), **(extra or {})}
    write_container(path, TAG_MODEL, meta, model.state_dict())


def load_model(path) -> tuple[PolicyModel, dict]:
    """Rebuild the model from its stored architecture; every shape is checked."""
    _, meta, arrays = read_container(path, TAG_MODEL)
    try:
        arch = arch_from_dict(meta["arch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad architecture record ({exc})") from None
    model = PolicyModel(arch, seed=0)
    try:
        model.load_state_dict(arrays)
    except ShapeError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model, meta


def save_gmm(path, theta: GmmParams, extra: dict | None = None) -> None:
    meta = {"K": theta.n_components, "dim": theta.dim, **(extra or {})}
    write_container(path, TAG_GMM, meta, {
        "priors": theta.priors,
        "means": theta.means,
        "covariances": theta.covariances,
    })


def load_gmm(path) -> tuple[GmmParams, dict]:
    _, meta, arrays = read_container(path, TAG_GMM)
    try:
        k, d = int(meta["K"]), int(meta["dim"])
        expected = {"priors": (k,), "means": (k, d), "covariances": (k, d, d)}
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
        theta = GmmParams(arrays["priors"], arrays["means"], arrays["covariances"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing entry {exc}") from None
    except CheckpointError:
        raise
    except ValueError as exc:
        raise CheckpointError(f"{path}: invalid mixture ({exc})") from None
    return theta, meta
