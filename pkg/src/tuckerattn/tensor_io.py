"""ATNZ v1: a JSON manifest plus one raw blob of little-endian, row-major values.

A container named ``model`` is the file pair ``model.json`` / ``model.bin``.
The manifest is validated in full before the blob is read.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention_reference import MhaWeights
from .tucker import ARRAY_FIELDS, TuckerAttentionParams
from .variants import GqaWeights, MlaWeights

FORMAT = "ATNZ"
VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class ContainerError(Exception):
    """Base class for malformed containers."""


class FormatVersionError(ContainerError):
    """Manifest does not declare ATNZ version 1."""


class TruncatedBlobError(ContainerError):
    """Blob file is shorter than the manifest requires."""


class ShapeLengthError(ContainerError):
    """An entry's byte length disagrees with its shape and dtype, or entries overlap."""


@dataclass
class Container:
    tensors: dict = field(default_factory=dict)
    kind: str = "tensors"
    attrs: dict = field(default_factory=dict)


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def save_container(path, tensors: dict, kind: str = "tensors", attrs: dict | None = None,
                   dtype: str = "f64") -> tuple[Path, Path]:
    """Write ``tensors`` (name -> array) with every entry stored as ``dtype``.

    Storing f64 data as ``f32`` is lossy; everything else round-trips bit for bit.
    """
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    manifest_path, blob_path = _paths(path)
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(np.asarray(arr), dtype=DTYPES[dtype]).tobytes(order="C")
        entries.append({
            "name": name, "dtype": dtype, "shape": list(np.shape(arr)),
            "byte_offset": offset, "byte_length": len(data),
        })
        chunks.append(data)
        offset += len(data)
    manifest = {"format": FORMAT, "version": VERSION, "kind": kind,
                "attrs": attrs or {}, "entries": entries}
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path, blob_path


def _validate(manifest) -> list:
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise FormatVersionError(f"not an {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise FormatVersionError(f"unsupported {FORMAT} version {manifest.get('version')!r}")
    entries = manifest.get("entries")
    if not isinstance(entries, list):
        raise FormatVersionError("manifest has no entry list")
    end = 0
    for e in sorted(entries, key=lambda e: e.get("byte_offset", 0)):
        if e.get("dtype") not in DTYPES:
            raise ShapeLengthError(f"entry {e.get('name')!r}: unknown dtype {e.get('dtype')!r}")
        shape = e.get("shape")
        if not isinstance(shape, list) or any(not isinstance(s, int) or s < 0 for s in shape):
            raise ShapeLengthError(f"entry {e.get('name')!r}: bad shape {shape!r}")
        expected = int(np.prod(shape, dtype=np.int64)) * DTYPES[e["dtype"]].itemsize
        if e.get("byte_length") != expected:
            raise ShapeLengthError(
                f"entry {e['name']!r}: byte_length {e.get('byte_length')} but shape needs {expected}")
        if not isinstance(e.get("byte_offset"), int) or e["byte_offset"] < end:
            raise ShapeLengthError(f"entry {e['name']!r}: overlapping or negative byte_offset")
        end = e["byte_offset"] + expected
    return entries


def load_container(path) -> Container:
    manifest_path, blob_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatVersionError(f"{manifest_path}: manifest is not JSON ({exc})") from exc
    entries = _validate(manifest)
    blob = blob_path.read_bytes()
    tensors = {}
    for e in entries:
        start, stop = e["byte_offset"], e["byte_offset"] + e["byte_length"]
        if stop > len(blob):
            raise TruncatedBlobError(f"{blob_path}: entry {e['name']!r} needs bytes up to {stop}, "
                                     f"blob has {len(blob)}")
        arr = np.frombuffer(blob[start:stop], dtype=DTYPES[e["dtype"]]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float64)
    return Container(tensors, manifest.get("kind", "tensors"), manifest.get("attrs", {}))


def save_weights(path, obj, dtype: str = "f64"):
    """Save any of the weight containers, tagging the manifest with its kind."""
    if isinstance(obj, MhaWeights):
        arrays = {"wq": obj.wq, "wk": obj.wk, "wv": obj.wv, "wo": obj.wo}
        return save_container(path, arrays, "mha", {"n_heads": obj.n_heads}, dtype)
    if isinstance(obj, GqaWeights):
        arrays = {"wq": obj.wq, "wk_groups": obj.wk_groups, "wv_groups": obj.wv_groups, "wo": obj.wo}
        return save_container(path, arrays, "gqa", {"n_heads": obj.n_heads}, dtype)
    if isinstance(obj, MlaWeights):
        names = ("w_dq", "w_uq", "w_dkv", "w_uk", "w_uv", "wo", "w_dv", "wq_rot", "wk_rot")
        arrays = {n: getattr(obj, n) for n in names if getattr(obj, n) is not None}
        return save_container(path, arrays, "mla", {}, dtype)
    if isinstance(obj, TuckerAttentionParams):
        attrs = {"scale_dim": float(obj.scale_dim), "shared_kv": bool(obj.shared_kv)}
        return save_container(path, obj.arrays(), "tucker", attrs, dtype)
    raise TypeError(f"cannot save {type(obj).__name__}")


def load_weights(path):
    """Inverse of :func:`save_weights`; plain tensor containers come back as :class:`Container`."""
    c = load_container(path)
    t, a = c.tensors, c.attrs
    try:
        if c.kind == "mha":
            return MhaWeights(t["wq"], t["wk"], t["wv"], t["wo"], int(a["n_heads"]))
        if c.kind == "gqa":
            return GqaWeights(t["wq"], t["wk_groups"], t["wv_groups"], t["wo"], int(a["n_heads"]))
        if c.kind == "mla":
            return MlaWeights(**t)
        if c.kind == "tucker":
            arrays = {n: t.get(n) for n in ARRAY_FIELDS}
            return TuckerAttentionParams(**arrays, scale_dim=float(a["scale_dim"]),
                                         shared_kv=bool(a.get("shared_kv", False)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ShapeLengthError(f"{c.kind} container is inconsistent: {exc}") from exc
    return c
