"""Checkpoints: a plain-text manifest plus concatenated NT1 payloads.

Manifest lines are ``name shape trainable group offset`` with shape written
as ``AxBxC`` and offset the byte position of the entry's NT1 block in the
payload file. Lines starting with ``#`` carry free-form metadata.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..numcore import nt1
from .registry import ParamRegistry

MANIFEST_SUFFIX = ".manifest"
PAYLOAD_SUFFIX = ".nt1"


class CheckpointError(ValueError):
    pass


def save(reg: ParamRegistry, path: str | Path, names: list[str] | None = None, meta: dict[str, str] | None = None) -> tuple[Path, Path]:
    """Write ``<path>.manifest`` and ``<path>.nt1`` in registry order."""
    path = Path(path)
    names = reg.names() if names is None else names
    lines = [f"# {k}={v}" for k, v in (meta or {}).items()]
    offset = 0
    payload = bytearray()
    for name in names:
        e = reg.entry(name)
        block = nt1.encode(reg[name].data)
        shape = "x".join(str(s) for s in e.shape)
        lines.append(f"{name} {shape} {int(e.trainable)} {e.group} {offset}")
        payload += block
        offset += len(block)
    manifest = path.with_name(path.name + MANIFEST_SUFFIX)
    data = path.with_name(path.name + PAYLOAD_SUFFIX)
    manifest.write_text("\n".join(lines) + "\n")
    data.write_bytes(bytes(payload))
    return manifest, data


def read_manifest(path: str | Path) -> tuple[list[tuple[str, tuple[int, ...], bool, str, int]], dict[str, str]]:
    path = Path(path)
    manifest = path if path.name.endswith(MANIFEST_SUFFIX) else path.with_name(path.name + MANIFEST_SUFFIX)
    rows, meta = [], {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k.strip()] = v.strip()
            continue
        parts = line.split()
        if len(parts) != 5:
            raise CheckpointError(f"{manifest}:{lineno}: expected 5 fields, got {len(parts)}")
        name, shape, flag, group, off = parts
        rows.append((name, tuple(int(s) for s in shape.split("x")), flag == "1", group, int(off)))
    return rows, meta


def load(reg: ParamRegistry, path: str | Path, strict: bool = True) -> dict[str, str]:
    """Copy checkpoint values into an existing registry; returns the metadata."""
    path = Path(path)
    base = path.with_name(path.name[: -len(MANIFEST_SUFFIX)]) if path.name.endswith(MANIFEST_SUFFIX) else path
    rows, meta = read_manifest(base)
    with open(base.with_name(base.name + PAYLOAD_SUFFIX), "rb") as fh:
        for name, shape, _, _, off in rows:
            if name not in reg:
                if strict:
                    raise CheckpointError(f"checkpoint entry {name!r} not in model")
                continue
            fh.seek(off)
            arr = nt1.read_from(fh)
            if arr.shape != shape or reg.entry(name).shape != shape:
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} vs model {reg.entry(name).shape}")
            reg[name].data[...] = arr
    return meta


def save_full(model, path) -> tuple[Path, Path]:
    return save(model.reg, path, meta={"kind": "full"})


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    rows, _ = read_manifest(path)
    out = {}
    with open(path.with_name(path.name + PAYLOAD_SUFFIX), "rb") as fh:
        for name, _, _, _, off in rows:
            fh.seek(off)
            out[name] = nt1.read_from(fh)
    return out
