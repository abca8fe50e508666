"""Tensor containers, LoRA adapters and dense task updates.

The on-disk container is a header-plus-flat-buffer layout:

    [8 bytes: little-endian u64 header length N]
    [N bytes: UTF-8 JSON header]
    [raw little-endian float32 buffers]

The header maps each tensor key to ``{"dtype": "F32", "shape": [...],
"data_offsets": [begin, end]}`` with offsets relative to the end of the header,
plus an optional ``"__metadata__"`` string map.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from knots.errors import (
    CorruptFile,
    IncompleteAdapter,
    MissingKey,
    NonFiniteTensor,
    ParseError,
    RankMismatch,
    ShapeError,
    UnsupportedDtype,
)

METADATA_KEY = "__metadata__"
_LE_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class TensorMap:
    """Named collection of rank-1/rank-2 float tensors plus string metadata."""

    entries: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for key, value in self.entries.items():
            if not isinstance(key, str) or not key:
                raise ParseError(f"tensor keys must be nonempty strings, got {key!r}")
            if key == METADATA_KEY:
                raise ParseError(f"{METADATA_KEY!r} is reserved")
            if value.ndim not in (1, 2):
                raise ShapeError(f"tensor {key!r} has rank {value.ndim}; only rank 1 or 2 is supported")
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ParseError("metadata must map strings to strings")

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self.entries[key]
        except KeyError:
            raise MissingKey(f"no tensor named {key!r}") from None

    def __contains__(self, key: object) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self) -> list[str]:
        return sorted(self.entries)


@dataclass(frozen=True)
class LoraAdapter:
    layers: dict[str, tuple[np.ndarray, np.ndarray]]  # key -> (B: O x r, A: r x I)
    rank: int
    target_keys: list[str]
    source_id: str = ""
    lora_scale: float = 1.0
    metadata: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class TaskUpdate:
    """Per-layer dense weight deltas of one finetuned model."""

    layers: dict[str, np.ndarray]
    source_id: str = ""

    def keys(self) -> list[str]:
        return sorted(self.layers)

    def numerical_rank(self, key: str, eps: float = 1e-5) -> int:
        s = np.linalg.svd(self.layers[key], compute_uv=False)
        if s.size == 0 or s[0] == 0:
            return 0
        return int(np.count_nonzero(s > eps * s[0]))


# --------------------------------------------------------------------------
# container IO


def _encode(tensors: TensorMap) -> bytes:
    header: dict[str, object] = {}
    buffers = []
    offset = 0
    for key in sorted(tensors.entries):
        arr = tensors.entries[key]
        if not np.issubdtype(arr.dtype, np.floating):
            raise UnsupportedDtype(f"tensor {key!r} has dtype {arr.dtype}; only floating tensors can be saved")
        raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        header[key] = {"dtype": "F32", "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        buffers.append(raw)
        offset += len(raw)
    if tensors.metadata:
        header[METADATA_KEY] = dict(sorted(tensors.metadata.items()))
    blob = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return struct.pack("<Q", len(blob)) + blob + b"".join(buffers)


def _decode(data: bytes, *, allow_nonfinite: bool = False, source: str = "<bytes>") -> TensorMap:
    if len(data) < 8:
        raise CorruptFile(f"{source}: file too short for header length ({len(data)} bytes)")
    (n,) = struct.unpack("<Q", data[:8])
    if 8 + n > len(data):
        raise CorruptFile(f"{source}: declared header length {n} exceeds file size {len(data)}")
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{source}: header is not valid UTF-8 JSON ({exc})") from None
    if not isinstance(header, dict):
        raise ParseError(f"{source}: header must be a JSON object")

    payload = memoryview(data)[8 + n :]
    metadata = header.pop(METADATA_KEY, {}) or {}
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise ParseError(f"{source}: {METADATA_KEY} must be a string map")

    entries = {}
    for key, info in header.items():
        if not isinstance(info, dict) or not {"dtype", "shape", "data_offsets"} <= info.keys():
            raise ParseError(f"{source}: malformed entry for {key!r}")
        if info["dtype"] != "F32":
            raise UnsupportedDtype(f"{source}: tensor {key!r} has dtype {info['dtype']!r}; only F32 is supported")
        shape, offsets = info["shape"], info["data_offsets"]
        if (
            not isinstance(shape, list)
            or not all(isinstance(d, int) and d >= 0 for d in shape)
            or not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)
        ):
            raise ParseError(f"{source}: bad shape/offsets for {key!r}")
        begin, end = offsets
        if not 0 <= begin <= end:
            raise ParseError(f"{source}: bad offsets for {key!r}")
        if end - begin != 4 * int(np.prod(shape, dtype=np.int64)):
            raise ParseError(f"{source}: offsets of {key!r} disagree with shape {shape}")
        if end > len(payload):
            raise CorruptFile(f"{source}: tensor {key!r} extends past end of payload ({end} > {len(payload)})")
        arr = np.frombuffer(payload[begin:end], dtype=_LE_F32).reshape(shape).astype(np.float32)
        if not allow_nonfinite and not np.all(np.isfinite(arr)):
            raise NonFiniteTensor(f"{source}: tensor {key!r} contains NaN or Inf")
        arr.flags.writeable = False
        entries[key] = arr
    return TensorMap(entries, dict(metadata))


def load_tensor_map(path: str | os.PathLike, *, allow_nonfinite: bool = False) -> TensorMap:
    return _decode(Path(path).read_bytes(), allow_nonfinite=allow_nonfinite, source=str(path))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the destination directory, then rename over."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor_map(tensors: TensorMap, path: str | os.PathLike) -> None:
    """Save as F32. Float64 tensors are rounded to float32 on the way out."""
    atomic_write_bytes(path, _encode(tensors))


def tensor_map_bytes(tensors: TensorMap) -> bytes:
    return _encode(tensors)


def file_digest(path: str | os.PathLike) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# adapters


@dataclass(frozen=True)
class KeyConvention:
    a_suffix: str
    b_suffix: str

    def a_key(self, layer: str) -> str:
        return layer + self.a_suffix

    def b_key(self, layer: str) -> str:
        return layer + self.b_suffix


KEY_CONVENTIONS = {
    "lora": KeyConvention(".lora_A", ".lora_B"),
    "ab": KeyConvention(".A", ".B"),
}


def _convention(key_convention: str | KeyConvention) -> KeyConvention:
    if isinstance(key_convention, KeyConvention):
        return key_convention
    try:
        return KEY_CONVENTIONS[key_convention]
    except KeyError:
        raise ParseError(
            f"unknown key convention {key_convention!r}; choose from {sorted(KEY_CONVENTIONS)}"
        ) from None


def adapter_from_tensor_map(
    tensors: TensorMap, key_convention: str | KeyConvention = "lora", source_id: str = ""
) -> LoraAdapter:
    conv = _convention(key_convention)
    a_layers = {k[: -len(conv.a_suffix)] for k in tensors.entries if k.endswith(conv.a_suffix)}
    b_layers = {k[: -len(conv.b_suffix)] for k in tensors.entries if k.endswith(conv.b_suffix)}
    if a_layers != b_layers:
        missing = sorted(a_layers ^ b_layers)
        raise IncompleteAdapter(f"layers without a partner factor: {missing}")
    if not a_layers:
        raise IncompleteAdapter("container holds no adapter factors under this key convention")

    layers = {}
    ranks = {}
    for layer in sorted(a_layers):
        a, b = tensors[conv.a_key(layer)], tensors[conv.b_key(layer)]
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"{layer}: adapter factors must be matrices")
        if b.shape[1] != a.shape[0]:
            raise ShapeError(f"{layer}: B is {b.shape} but A is {a.shape}")
        r = a.shape[0]
        if r < 1 or r > min(b.shape[0], a.shape[1]):
            raise ShapeError(f"{layer}: rank {r} exceeds min(O, I) = {min(b.shape[0], a.shape[1])}")
        layers[layer] = (b, a)
        ranks[layer] = r
    if len(set(ranks.values())) != 1:
        raise RankMismatch(f"adapter ranks differ across layers: {ranks}")

    meta = dict(tensors.metadata)
    try:
        scale = float(meta.get("lora_scale", "1.0"))
    except ValueError:
        raise ParseError(f"lora_scale metadata is not a number: {meta['lora_scale']!r}") from None
    return LoraAdapter(
        layers=layers,
        rank=next(iter(ranks.values())),
        target_keys=sorted(layers),
        source_id=meta.get("source_id", source_id),
        lora_scale=scale,
        metadata=meta,
    )


def load_adapter(path: str | os.PathLike, key_convention: str | KeyConvention = "lora") -> LoraAdapter:
    """Load a LoRA adapter. ``source_id`` comes from metadata, else the file stem."""
    return adapter_from_tensor_map(load_tensor_map(path), key_convention, source_id=Path(path).stem)


def save_adapter(adapter: LoraAdapter, path: str | os.PathLike, key_convention: str | KeyConvention = "lora") -> None:
    conv = _convention(key_convention)
    entries = {}
    for layer, (b, a) in adapter.layers.items():
        entries[conv.a_key(layer)] = a
        entries[conv.b_key(layer)] = b
    meta = dict(adapter.metadata)
    if adapter.source_id:
        meta["source_id"] = adapter.source_id
    if adapter.lora_scale != 1.0:
        meta["lora_scale"] = repr(float(adapter.lora_scale))
    save_tensor_map(TensorMap(entries, meta), path)


def check_compatible(adapters: Iterable[LoraAdapter]) -> None:
    adapters = list(adapters)
    if not adapters:
        return
    ref = adapters[0]
    for other in adapters[1:]:
        if other.target_keys != ref.target_keys:
            raise ShapeError(f"adapters {ref.source_id!r} and {other.source_id!r} target different layers")
        for key in ref.target_keys:
            b0, a0 = ref.layers[key]
            b1, a1 = other.layers[key]
            if (b0.shape[0], a0.shape[1]) != (b1.shape[0], a1.shape[1]):
                raise ShapeError(f"{key}: layer shapes differ between {ref.source_id!r} and {other.source_id!r}")


def materialize_update(adapter: LoraAdapter) -> TaskUpdate:
    """Dense ``lora_scale * B @ A`` per layer, in float64."""
    layers = {}
    for key in adapter.target_keys:
        b, a = adapter.layers[key]
        if b.shape[1] != a.shape[0]:
            raise ShapeError(f"{key}: cannot multiply B {b.shape} by A {a.shape}")
        delta = b.astype(np.float64) @ a.astype(np.float64)
        if adapter.lora_scale != 1.0:
            delta *= adapter.lora_scale
        layers[key] = delta
    return TaskUpdate(layers, adapter.source_id)


def apply_update(base: TensorMap, update: TaskUpdate | Mapping[str, np.ndarray], keys: Iterable[str] | None = None) -> TensorMap:
    """Return ``base`` with deltas added at ``keys`` (default: every key of the update).

    Adapted tensors come back in float64; untouched tensors are shared as-is.
    """
    deltas = update.layers if isinstance(update, TaskUpdate) else dict(update)
    keys = sorted(deltas) if keys is None else list(keys)
    entries = dict(base.entries)
    for key in keys:
        if key not in base.entries:
            raise MissingKey(f"base checkpoint has no tensor {key!r}")
        w, d = base.entries[key], deltas[key]
        if w.shape != d.shape:
            raise ShapeError(f"{key}: base is {w.shape} but update is {d.shape}")
        entries[key] = w.astype(np.float64) + d
    return TensorMap(entries, dict(base.metadata))
