"""Reading and writing layer weight containers.

Native layout (all integers little-endian)::

    b"LWRA" | u32 format_version | u64 manifest_length | manifest JSON (UTF-8) | payload

Layer ``offset`` values in the manifest are relative to the first payload byte.
Each tensor is stored row-major in its declared dtype. Everything is upcast
to float64 on load.

The interchange reader understands the safetensors layout: a u64 header
length, a JSON header mapping tensor names to ``dtype``/``shape``/
``data_offsets``, then the data block.
"""
from __future__ import annotations

import fnmatch
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import (BoundsError, CheckpointError, CheckpointFormatError, MalformedHeaderError,
                     TruncatedFileError, UnknownDtypeError)

MAGIC = b"LWRA"
FORMAT_VERSION = 1
ROLES = ("fine_tuned", "ground_truth", "recovered")
_PREFIX = struct.Struct("<4sIQ")

_DTYPES = {"f16": np.dtype("<f2"), "bf16": np.dtype("<u2"),
           "f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_INTERCHANGE_DTYPES = {"F16": "f16", "BF16": "bf16", "F32": "f32", "F64": "f64"}


def itemsize(dtype: str) -> int:
    return _DTYPES[dtype].itemsize


@dataclass
class LayerEntry:
    layer_id: str
    rows: int
    cols: int
    dtype: str = "f64"
    offset: int | None = None
    length: int | None = None

    def to_dict(self):
        return {"layer_id": self.layer_id, "rows": self.rows, "cols": self.cols,
                "dtype": self.dtype, "offset": self.offset, "length": self.length}


@dataclass
class CheckpointManifest:
    model_id: str
    layers: list[LayerEntry] = field(default_factory=list)
    role: str = "fine_tuned"
    provenance: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_dict(self):
        return {"format_version": self.format_version, "model_id": self.model_id,
                "role": self.role, "provenance": self.provenance,
                "layers": [e.to_dict() for e in self.layers]}

    @property
    def layer_ids(self) -> list[str]:
        return [e.layer_id for e in self.layers]


def build_manifest(model_id: str, matrices: Mapping[str, np.ndarray], role="fine_tuned",
                   dtype="f64", provenance=None) -> CheckpointManifest:
    """Manifest describing ``matrices`` in insertion order; offsets filled on write."""
    layers = [LayerEntry(name, *np.shape(m), dtype=dtype) for name, m in matrices.items()]
    return CheckpointManifest(model_id, layers, role, dict(provenance or {}))


def _to_bf16_bits(a: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(a, dtype="<f4").view("<u4").astype(np.uint64)
    rounded = bits + 0x7FFF + ((bits >> 16) & 1)  # round half to even
    return (rounded >> 16).astype("<u2")


def _from_bf16_bits(raw: np.ndarray) -> np.ndarray:
    return (raw.astype("<u4") << 16).view("<f4").astype(np.float64)


def _encode(a: np.ndarray, dtype: str) -> bytes:
    if dtype == "bf16":
        return _to_bf16_bits(a).tobytes()
    return np.ascontiguousarray(a, dtype=_DTYPES[dtype]).tobytes()


def _decode(buf: bytes, dtype: str, rows: int, cols: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=_DTYPES[dtype])
    out = _from_bf16_bits(raw) if dtype == "bf16" else raw.astype(np.float64)
    return out.reshape(rows, cols)


def write_checkpoint(path, manifest: CheckpointManifest, matrices: Mapping[str, np.ndarray]):
    """Write ``matrices`` in the order the manifest lists them.

    Offsets and lengths left as ``None`` are computed; explicit values must
    match the contiguous layout or a :class:`BoundsError` is raised.
    """
    if manifest.role not in ROLES:
        raise CheckpointFormatError(path, f"unknown role {manifest.role!r}")
    ids = manifest.layer_ids
    if len(set(ids)) != len(ids):
        raise CheckpointFormatError(path, "duplicate layer ids in manifest")
    if set(ids) != set(matrices):
        diff = sorted(set(ids).symmetric_difference(matrices))
        raise CheckpointFormatError(path, f"manifest and matrices disagree on layers {diff}")
    chunks, offset = [], 0
    for entry in manifest.layers:
        m = np.asarray(matrices[entry.layer_id])
        if m.ndim != 2 or m.shape != (entry.rows, entry.cols):
            raise CheckpointFormatError(
                path, f"layer {entry.layer_id!r}: shape {m.shape} != manifest "
                      f"({entry.rows}, {entry.cols})")
        if entry.dtype not in _DTYPES:
            raise UnknownDtypeError(path, f"dtype {entry.dtype!r} for layer {entry.layer_id!r}")
        data = _encode(m, entry.dtype)
        if entry.offset is not None and entry.offset != offset:
            raise BoundsError(path, f"layer {entry.layer_id!r}: declared offset {entry.offset}, "
                                    f"layout gives {offset}")
        if entry.length is not None and entry.length != len(data):
            raise BoundsError(path, f"layer {entry.layer_id!r}: declared length {entry.length}, "
                                    f"data has {len(data)}")
        entry.offset, entry.length = offset, len(data)
        chunks.append(data)
        offset += len(data)
    header = json.dumps(manifest.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, manifest.format_version, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def _parse_manifest(path, doc) -> CheckpointManifest:
    try:
        layers = [LayerEntry(str(e["layer_id"]), int(e["rows"]), int(e["cols"]), str(e["dtype"]),
                             int(e["offset"]), int(e["length"])) for e in doc["layers"]]
        return CheckpointManifest(str(doc["model_id"]), layers, str(doc.get("role", "fine_tuned")),
                                  dict(doc.get("provenance", {})), int(doc["format_version"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(path, f"invalid manifest: {exc}") from None


def read_checkpoint(path, layers=None):
    """Load a native container; returns ``(manifest, {layer_id: float64 matrix})``.

    ``layers`` optionally restricts which entries are decoded; the others are
    never read from disk.
    """
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < 4 or prefix[:4] != MAGIC:
            raise CheckpointFormatError(path, "bad magic bytes; not an LWRA checkpoint")
        if len(prefix) < _PREFIX.size:
            raise TruncatedFileError(path, "file ends inside the fixed header")
        _, version, mlen = _PREFIX.unpack(prefix)
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(path, f"unsupported format version {version}")
        if _PREFIX.size + mlen > size:
            raise TruncatedFileError(path, f"manifest length {mlen} runs past end of file")
        try:
            doc = json.loads(fh.read(mlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(path, f"manifest is not valid JSON: {exc}") from None
        manifest = _parse_manifest(path, doc)
        if manifest.format_version != version:
            raise CheckpointFormatError(path, "manifest version disagrees with header")
        payload_start = _PREFIX.size + mlen
        payload_size = size - payload_start

        seen, spans = set(), []
        for e in manifest.layers:
            if e.layer_id in seen:
                raise CheckpointFormatError(path, f"duplicate layer id {e.layer_id!r}")
            seen.add(e.layer_id)
            if e.dtype not in _DTYPES:
                raise UnknownDtypeError(path, f"dtype {e.dtype!r} for layer {e.layer_id!r}")
            if e.rows < 1 or e.cols < 1:
                raise BoundsError(path, f"layer {e.layer_id!r} has non-positive shape")
            if e.length != e.rows * e.cols * itemsize(e.dtype):
                raise BoundsError(path, f"layer {e.layer_id!r}: length {e.length} does not "
                                        f"match {e.rows}x{e.cols} {e.dtype}")
            if e.offset < 0:
                raise BoundsError(path, f"layer {e.layer_id!r}: negative offset")
            if e.offset + e.length > payload_size:
                raise BoundsError(path, f"layer {e.layer_id!r}: bytes [{e.offset}, "
                                        f"{e.offset + e.length}) exceed payload of {payload_size}")
            spans.append((e.offset, e.offset + e.length, e.layer_id))
        spans.sort()
        for (s0, e0, a), (s1, _, b) in zip(spans, spans[1:]):
            if s1 < e0:
                raise BoundsError(path, f"layers {a!r} and {b!r} overlap")

        wanted = None if layers is None else set(layers)
        matrices = {}
        for e in manifest.layers:
            if wanted is not None and e.layer_id not in wanted:
                continue
            fh.seek(payload_start + e.offset)
            buf = fh.read(e.length)
            if len(buf) != e.length:
                raise TruncatedFileError(path, f"layer {e.layer_id!r} is truncated")
            matrices[e.layer_id] = _decode(buf, e.dtype, e.rows, e.cols)
    return manifest, matrices


def read_interchange(path, layer_name_filter=None):
    """Extract 2-D tensors from a safetensors file.

    ``layer_name_filter`` is a glob pattern (or ``None`` for everything).
    Tensors that are not 2-D are skipped and listed under
    ``manifest.provenance['skipped']``. Returns ``(manifest, matrices)``.
    """
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        raw_len = fh.read(8)
        if len(raw_len) < 8:
            raise MalformedHeaderError(path, "file shorter than the 8-byte header length")
        (hlen,) = struct.unpack("<Q", raw_len)
        if 8 + hlen > size:
            raise MalformedHeaderError(path, f"header length {hlen} exceeds file size {size}")
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedHeaderError(path, f"header is not valid JSON: {exc}") from None
        if not isinstance(header, dict):
            raise MalformedHeaderError(path, "header must be a JSON object")
        data_start = 8 + hlen
        data_size = size - data_start
        metadata = header.pop("__metadata__", None) or {}

        entries, skipped, matrices = [], [], {}
        for name in sorted(header):
            info = header[name]
            try:
                dtype_code, shape = info["dtype"], [int(s) for s in info["shape"]]
                begin, end = (int(v) for v in info["data_offsets"])
            except (KeyError, TypeError, ValueError):
                raise MalformedHeaderError(path, f"tensor {name!r} has an invalid entry") from None
            if not 0 <= begin <= end <= data_size:
                raise MalformedHeaderError(path, f"tensor {name!r} offsets [{begin}, {end}) "
                                                 f"outside data of {data_size} bytes")
            if layer_name_filter is not None and not fnmatch.fnmatchcase(name, layer_name_filter):
                continue
            if len(shape) != 2:
                skipped.append({"name": name, "shape": shape, "reason": "not 2-D"})
                continue
            if dtype_code not in _INTERCHANGE_DTYPES:
                raise UnknownDtypeError(path, f"tensor {name!r} has unsupported dtype {dtype_code}")
            code = _INTERCHANGE_DTYPES[dtype_code]
            rows, cols = shape
            if end - begin != rows * cols * itemsize(code):
                raise MalformedHeaderError(path, f"tensor {name!r} byte span does not match shape")
            fh.seek(data_start + begin)
            matrices[name] = _decode(fh.read(end - begin), code, rows, cols)
            entries.append(LayerEntry(name, rows, cols, code, begin, end - begin))
    provenance = {"source": "safetensors", "path": str(path), "metadata": metadata,
                  "skipped": skipped}
    model_id = os.path.splitext(os.path.basename(str(path)))[0]
    return CheckpointManifest(model_id, entries, "fine_tuned", provenance), matrices


def load_any(path, layer_name_filter=None):
    """Dispatch on extension: ``.safetensors`` via the interchange reader, else native."""
    if str(path).endswith(".safetensors"):
        return read_interchange(path, layer_name_filter)
    manifest, matrices = read_checkpoint(path)
    if layer_name_filter is not None:
        matrices = {k: v for k, v in matrices.items() if fnmatch.fnmatchcase(k, layer_name_filter)}
    return manifest, matrices


__all__ = ["CheckpointError", "CheckpointManifest", "LayerEntry", "build_manifest",
           "load_any", "read_checkpoint", "read_interchange", "write_checkpoint"]
