"""Single-file checkpoint container.

Layout: 8-byte magic, u32 little-endian manifest length, UTF-8 JSON manifest,
then one raw little-endian float64 block per parameter (live weights, in
manifest order) followed by the EMA blocks in the same order. Save/load is
bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

from .autodiff import Parameter
from .errors import ContractViolation, FormatError

MAGIC = b"TDCRCKP1"


def save_checkpoint(path, params: list[Parameter], meta: dict) -> None:
    """Write parameters (live + EMA) plus a JSON manifest to one file.

    `meta` must be JSON-serializable; the parameter table is added under the
    reserved key "params".
    """
    if "params" in meta:
        raise ContractViolation("meta key 'params' is reserved")
    manifest = dict(meta)
    manifest["params"] = [{"name": p.name, "shape": list(p.shape)} for p in params]
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(blob)).astype("<u4").tobytes())
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        for p in params:
            fh.write(np.ascontiguousarray(p.ema, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, list[Parameter]]:
    """Read a checkpoint; returns (meta, parameters with value and ema set)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    n = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    try:
        manifest = json.loads(raw[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint manifest: {exc}") from exc
    specs = manifest.pop("params", None)
    if specs is None:
        raise FormatError(f"{path}: checkpoint manifest lacks parameter table")
    off = 12 + n
    sizes = [int(np.prod(s["shape"], dtype=np.int64)) if s["shape"] else 1 for s in specs]
    need = off + 2 * 8 * sum(sizes)
    if len(raw) != need:
        raise FormatError(f"{path}: checkpoint holds {len(raw)} bytes, manifest implies {need}")

    def take(count):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return arr

    params = []
    for spec, size in zip(specs, sizes):
        p = Parameter(take(size).reshape(spec["shape"]), spec["name"])
        params.append(p)
    for p, size, spec in zip(params, sizes, specs):
        p.ema = take(size).reshape(spec["shape"]).copy()
    return manifest, params
