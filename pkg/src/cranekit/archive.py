"""Tensor archive container.

Each shard file is laid out as::

    [u64 little-endian header length H][H bytes of UTF-8 JSON header][payload]

The header maps tensor names to ``{"dtype", "shape", "data_offsets"}`` with
offsets relative to the payload start. Archives larger than one shard live in
a directory holding the shard files plus ``archive.index.json``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

INDEX_NAME = "archive.index.json"

# name -> (numpy storage dtype, element width)
DTYPES: dict[str, tuple[np.dtype, int]] = {
    "F64": (np.dtype("<f8"), 8),
    "F32": (np.dtype("<f4"), 4),
    "F16": (np.dtype("<f2"), 2),
    "BF16": (np.dtype("<u2"), 2),  # raw bit patterns
}


class ArchiveError(ValueError):
    """Malformed or inconsistent archive contents."""


@dataclass(frozen=True)
class TensorMeta:
    dtype: str
    shape: tuple[int, ...]
    byte_offset: int = 0
    byte_length: int = 0

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


@dataclass(frozen=True)
class TensorView:
    """A typed tensor; ``data`` holds storage values (bf16 as uint16 bits)."""

    meta: TensorMeta
    data: np.ndarray = field(repr=False)

    @property
    def dtype(self) -> str:
        return self.meta.dtype

    @property
    def shape(self) -> tuple[int, ...]:
        return self.meta.shape

    @classmethod
    def from_array(cls, values, dtype: str = "F64") -> "TensorView":
        """Narrow ``values`` (any real array) to ``dtype`` with round-to-nearest-even."""
        if dtype not in DTYPES:
            raise ArchiveError(f"unsupported dtype {dtype!r}")
        arr = np.asarray(values)
        stored = narrow(arr.astype(np.float64, copy=False), dtype)
        width = DTYPES[dtype][1]
        meta = TensorMeta(dtype, tuple(int(s) for s in arr.shape), 0, stored.size * width)
        return cls(meta, stored)

    @classmethod
    def from_storage(cls, stored: np.ndarray, dtype: str) -> "TensorView":
        np_dtype, width = DTYPES[dtype]
        stored = np.ascontiguousarray(stored, dtype=np_dtype)
        meta = TensorMeta(dtype, tuple(stored.shape), 0, stored.size * width)
        return cls(meta, stored)

    def f64(self) -> np.ndarray:
        return load_f64(self)

    def tobytes(self) -> bytes:
        return np.ascontiguousarray(self.data, dtype=DTYPES[self.dtype][0]).tobytes()


def _bf16_bits_to_f64(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << 16).view(np.float32).astype(np.float64)


def _f64_to_f32_round_to_odd(x: np.ndarray) -> np.ndarray:
    # Round-to-odd into f32 keeps the later f32 -> bf16 rounding free of double-rounding.
    f = x.astype(np.float32)
    inexact = np.isfinite(f) & (f.astype(np.float64) != x)
    if not inexact.any():
        return f
    f = f.copy()
    xi, fi = x[inexact], f[inexact]
    overshoot = np.abs(fi.astype(np.float64)) > np.abs(xi)
    fi = np.where(overshoot, np.nextafter(fi, np.float32(0)), fi)
    fi = (fi.view(np.uint32) | np.uint32(1)).view(np.float32)
    f[inexact] = fi
    return f


def _f64_to_bf16_bits(x: np.ndarray) -> np.ndarray:
    f = _f64_to_f32_round_to_odd(x)
    bits = f.view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = ((bits + 0x7FFF + lsb) >> 16).astype(np.uint16)
    nan = np.isnan(f)
    if nan.any():
        rounded[nan] = ((bits[nan] >> 16) | 0x40).astype(np.uint16)
    return rounded


def narrow(x: np.ndarray, dtype: str) -> np.ndarray:
    """Convert f64 values to the storage representation of ``dtype`` (RNE)."""
    x = np.asarray(x, dtype=np.float64)
    if dtype == "F64":
        return x.astype("<f8", copy=True)
    if dtype == "F32":
        return x.astype("<f4")
    if dtype == "F16":
        # f64 -> f16 is a single correctly rounded conversion in numpy.
        return x.astype("<f2")
    if dtype == "BF16":
        return _f64_to_bf16_bits(x)
    raise ArchiveError(f"unsupported dtype {dtype!r}")


def load_f64(view: TensorView) -> np.ndarray:
    """Losslessly widen a tensor to f64 (a fresh, writable array)."""
    if view.dtype == "BF16":
        out = _bf16_bits_to_f64(view.data)
    else:
        out = view.data.astype(np.float64, copy=True)
    return out.reshape(view.shape)


class TensorArchive(Mapping[str, TensorView]):
    """Immutable name -> TensorView mapping iterated in lexicographic name order."""

    def __init__(self, tensors: Mapping[str, TensorView] | None = None, shard_list: Sequence[Path] = ()):
        tensors = dict(tensors or {})
        self._names = sorted(tensors)
        self._tensors = {n: tensors[n] for n in self._names}
        self.shard_list = [Path(p) for p in shard_list]

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype: str = "F64") -> "TensorArchive":
        return cls({n: TensorView.from_array(a, dtype) for n, a in arrays.items()})

    def __getitem__(self, name: str) -> TensorView:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)

    @property
    def header(self) -> dict[str, TensorMeta]:
        return {n: v.meta for n, v in self._tensors.items()}

    def f64(self, name: str) -> np.ndarray:
        return load_f64(self._tensors[name])

    def to_f64_dict(self) -> dict[str, np.ndarray]:
        return {n: self.f64(n) for n in self._names}

    def __repr__(self) -> str:
        return f"TensorArchive({len(self)} tensors)"


def archives_equal(a: Mapping[str, TensorView], b: Mapping[str, TensorView]) -> bool:
    """Bit-exact equality of names, dtypes, shapes and stored bytes."""
    if sorted(a) != sorted(b):
        return False
    for name in a:
        x, y = a[name], b[name]
        if x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes():
            return False
    return True


# ---------------------------------------------------------------- reading


def _reject_duplicate_keys(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ArchiveError(f"duplicate tensor name {k!r} in header")
        out[k] = v
    return out


def _read_shard(path: Path) -> dict[str, TensorView]:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ArchiveError(f"{path}: file shorter than the 8-byte header length")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if 8 + hlen > len(raw):
        raise ArchiveError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"), object_pairs_hook=_reject_duplicate_keys)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise ArchiveError(f"{path}: header is not a JSON object")
    payload = memoryview(raw)[8 + hlen :]

    tensors: dict[str, TensorView] = {}
    spans = []
    for name, entry in header.items():
        if name == "__metadata__":
            continue
        try:
            dtype = entry["dtype"]
            shape = tuple(entry["shape"])
            begin, end = entry["data_offsets"]
        except (TypeError, KeyError, ValueError) as exc:
            raise ArchiveError(f"{path}: malformed entry for {name!r}") from exc
        if dtype not in DTYPES:
            raise ArchiveError(f"{path}: tensor {name!r} has unsupported dtype {dtype!r}")
        if not all(isinstance(s, int) and s >= 0 for s in shape):
            raise ArchiveError(f"{path}: tensor {name!r} has invalid shape {list(shape)}")
        if not (isinstance(begin, int) and isinstance(end, int) and 0 <= begin <= end <= len(payload)):
            raise ArchiveError(f"{path}: tensor {name!r} byte range [{begin},{end}) outside payload")
        np_dtype, width = DTYPES[dtype]
        numel = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if end - begin != numel * width:
            raise ArchiveError(f"{path}: tensor {name!r} byte length {end - begin} != {numel} x {width}")
        spans.append((begin, end, name))
        data = np.frombuffer(payload[begin:end], dtype=np_dtype).reshape(shape).copy()
        tensors[name] = TensorView(TensorMeta(dtype, shape, begin, end - begin), data)

    # Empty tensors occupy no bytes; among the rest, sorted neighbours suffice.
    spans = sorted(s for s in spans if s[1] > s[0])
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise ArchiveError(f"{path}: tensors {n0!r} and {n1!r} overlap")
    return tensors


def _expand_paths(paths: str | os.PathLike | Iterable[str | os.PathLike]) -> list[Path]:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    out: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            index = p / INDEX_NAME
            if not index.exists():
                raise ArchiveError(f"{p}: directory without {INDEX_NAME}")
            weight_map = json.loads(index.read_text())["weight_map"]
            out.extend(p / s for s in sorted(set(weight_map.values())))
        else:
            out.append(p)
    return out


def open_archive(paths) -> TensorArchive:
    """Open one shard, several shards, or a sharded archive directory."""
    shard_paths = _expand_paths(paths)
    merged: dict[str, TensorView] = {}
    for p in shard_paths:
        for name, view in _read_shard(p).items():
            if name in merged:
                raise ArchiveError(f"duplicate tensor name {name!r} across shards ({p})")
            merged[name] = view
    return TensorArchive(merged, shard_list=shard_paths)


# ---------------------------------------------------------------- writing


def encode_shard(tensors: Mapping[str, TensorView]) -> bytes:
    header = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        view = tensors[name]
        blob = view.tobytes()
        header[name] = {"dtype": view.dtype, "shape": list(view.shape), "data_offsets": [offset, offset + len(blob)]}
        chunks.append(blob)
        offset += len(blob)
    hbytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def plan_shards(sizes: Mapping[str, int], shard_budget: int) -> list[list[str]]:
    """Greedy lexicographic packing; an oversize tensor gets a shard of its own."""
    if shard_budget <= 0:
        raise ValueError("shard_budget must be positive")
    shards: list[list[str]] = []
    current: list[str] = []
    used = 0
    for name in sorted(sizes):
        size = sizes[name]
        if current and used + size > shard_budget:
            shards.append(current)
            current, used = [], 0
        current.append(name)
        used += size
    if current or not shards:
        shards.append(current)
    return shards


def write_archive(tensors: Mapping[str, TensorView], dest, shard_budget: int = 1 << 30) -> list[Path]:
    """Write ``tensors`` and return the shard paths.

    A single-shard archive is written to ``dest`` as a file. When more than one
    shard is needed ``dest`` becomes a directory of ``shard-XXXXX-of-YYYYY.bin``
    files plus ``archive.index.json``.
    """
    for name, view in tensors.items():
        name.encode("utf-8")
        if view.data.size != view.meta.numel:
            raise ArchiveError(f"tensor {name!r}: data length does not match shape {list(view.shape)}")
    sizes = {n: v.data.size * DTYPES[v.dtype][1] for n, v in tensors.items()}
    plan = plan_shards(sizes, shard_budget)
    dest = Path(dest)
    if len(plan) == 1:
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_bytes(encode_shard({n: tensors[n] for n in plan[0]}))
        return [dest]

    dest.mkdir(parents=True, exist_ok=True)
    paths = []
    weight_map = {}
    for i, names in enumerate(plan):
        fname = f"shard-{i + 1:05d}-of-{len(plan):05d}.bin"
        (dest / fname).write_bytes(encode_shard({n: tensors[n] for n in names}))
        paths.append(dest / fname)
        weight_map.update({n: fname for n in names})
    index = {"weight_map": dict(sorted(weight_map.items()))}
    (dest / INDEX_NAME).write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return paths


FNV_OFFSET = 0xCBF29CE484222325


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def hash_path(path) -> str:
    """FNV-1a 64 over a file, or over each file of a directory in name order."""
    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    h = FNV_OFFSET
    for f in files:
        h = fnv1a64(f.read_bytes(), h)
    return f"{h:016x}"
