"""Parameter container: typed tensors, flat byte view, and the MLPS file format.

Every lock, unlock, and attack in this package operates on a `ParamStore`.
Stores are immutable after construction; operations return new stores.
All on-disk numbers are little-endian.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from types import MappingProxyType

import numpy as np

from .errors import FormatError, SchemaError

MAGIC = b"MLPS"
VERSION = 1

_TAGS = ("fp32", "fp16", "mf16", "mf8", "int8")
_TAG_CODES = {t: i + 1 for i, t in enumerate(_TAGS)}
_WIDTHS = {"fp32": 4, "fp16": 2, "mf16": 2, "mf8": 1, "int8": 1}
_STORAGE = {
    "fp32": np.dtype("<f4"),
    "fp16": np.dtype("<f2"),
    "mf16": np.dtype("<u2"),
    "mf8": np.dtype("u1"),
    "int8": np.dtype("i1"),
}
# minifloat layout: (exponent bits, mantissa bits, exponent bias), saturating,
# no inf/nan codes.  mf16 uses exponent width 5 with bias 11.
_MINIFLOAT = {"mf16": (5, 10, 11), "mf8": (4, 3, 7)}


@dataclass(frozen=True)
class Dtype:
    """Storage/arithmetic format of a tensor.

    int8 is affine with a per-tensor scale and zero point; scale None means
    "derive symmetric scale max|w|/127 when quantizing".
    """

    tag: str
    scale: float | None = None
    zero_point: int = 0

    def __post_init__(self):
        if self.tag not in _TAGS:
            raise SchemaError(f"unknown dtype tag {self.tag!r}")

    @property
    def width(self) -> int:
        return _WIDTHS[self.tag]

    @property
    def code_bits(self) -> int:
        return 8 * self.width

    @property
    def storage(self) -> np.dtype:
        return _STORAGE[self.tag]

    def decode(self, raw: np.ndarray) -> np.ndarray:
        """Raw storage array -> float32 values."""
        if self.tag in ("fp32", "fp16"):
            return raw.astype(np.float32)
        if self.tag == "int8":
            scale = 1.0 if self.scale is None else self.scale
            return ((raw.astype(np.int32) - self.zero_point) * scale).astype(np.float32)
        return _minifloat_values(self.tag)[raw]

    def encode(self, values: np.ndarray) -> np.ndarray:
        """Float values -> raw storage array (nearest representable)."""
        values = np.asarray(values, dtype=np.float64)
        if self.tag == "fp32":
            return values.astype("<f4")
        if self.tag == "fp16":
            return values.astype("<f2")
        if self.tag == "int8":
            if self.scale is None:
                raise SchemaError("int8 encode requires an explicit scale")
            q = np.rint(values / self.scale) + self.zero_point
            return np.clip(q, -128, 127).astype("i1")
        return _minifloat_encode(self.tag, values)

    def code_view(self, raw: np.ndarray) -> np.ndarray:
        """Raw storage array viewed as unsigned integer codes."""
        return raw.view({4: "<u4", 2: "<u2", 1: "u1"}[self.width])

    def from_codes(self, codes: np.ndarray) -> np.ndarray:
        return codes.astype({4: "<u4", 2: "<u2", 1: "u1"}[self.width]).view(self.storage)

    def value_order_keys(self) -> np.ndarray:
        """Keys that sort all codes of this dtype by numeric value.

        Floats use the sign-magnitude total order (negatives descending by
        magnitude, then positives ascending); int8 orders by signed value.
        """
        n = 1 << self.code_bits
        codes = np.arange(n, dtype=np.uint64)
        if self.tag == "int8":
            return (codes + 128) & 0xFF  # reinterpret as signed, shift to unsigned
        if self.tag in ("fp32", "fp16"):
            sign_bit = np.uint64(1 << (self.code_bits - 1))
            mask = np.uint64(n - 1)
            neg = (codes & sign_bit) != 0
            return np.where(neg, ~codes & mask, codes | sign_bit)
        # minifloats are sign-magnitude by construction
        sign_bit = np.uint64(1 << (self.code_bits - 1))
        mask = np.uint64((1 << self.code_bits) - 1)
        neg = (codes & sign_bit) != 0
        return np.where(neg, (sign_bit - 1) - (codes & (sign_bit - 1)), codes | sign_bit)


FP32 = Dtype("fp32")
FP16 = Dtype("fp16")
MF16 = Dtype("mf16")
MF8 = Dtype("mf8")


def int8_affine(scale: float | None = None, zero_point: int = 0) -> Dtype:
    return Dtype("int8", scale=scale, zero_point=zero_point)


@lru_cache(maxsize=None)
def _minifloat_values(tag: str) -> np.ndarray:
    """Decoded float32 value of every code of a minifloat dtype."""
    e_bits, m_bits, bias = _MINIFLOAT[tag]
    w = 1 + e_bits + m_bits
    codes = np.arange(1 << w, dtype=np.uint32)
    sign = np.where(codes >> (w - 1), -1.0, 1.0)
    exp = (codes >> m_bits) & ((1 << e_bits) - 1)
    man = (codes & ((1 << m_bits) - 1)).astype(np.float64) / (1 << m_bits)
    sub = exp == 0
    mag = np.where(sub, man * 2.0 ** (1 - bias), (1.0 + man) * 2.0 ** (exp.astype(np.float64) - bias))
    return (sign * mag).astype(np.float32)


@lru_cache(maxsize=None)
def _minifloat_quant_table(tag: str):
    """(sorted positive magnitudes, matching codes) for nearest-value encode."""
    vals = _minifloat_values(tag).astype(np.float64)
    w = 1 + sum(_MINIFLOAT[tag][:2])
    pos = np.arange(1 << (w - 1), dtype=np.uint32)  # non-negative codes
    mags = vals[pos]
    order = np.argsort(mags, kind="stable")
    return mags[order], pos[order]


def _minifloat_encode(tag: str, values: np.ndarray) -> np.ndarray:
    mags, codes = _minifloat_quant_table(tag)
    w = 1 + sum(_MINIFLOAT[tag][:2])
    a = np.abs(values)
    a = np.minimum(a, mags[-1])  # saturate, no inf
    mid = (mags[:-1] + mags[1:]) / 2.0
    idx = np.searchsorted(mid, a, side="right")
    raw = codes[idx].astype(np.uint32)
    raw = np.where(np.signbit(values), raw | (1 << (w - 1)), raw)
    return raw.astype(_STORAGE[tag])


@dataclass(frozen=True)
class ParamTensor:
    """Named tensor with a fixed dtype; data is the raw storage array."""

    name: str
    shape: tuple[int, ...]
    dtype: Dtype
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if any(d <= 0 for d in self.shape):
            raise SchemaError(f"{self.name}: non-positive dimension in {self.shape}")
        flat = np.ascontiguousarray(self.data).reshape(-1).view(self.dtype.storage)
        if flat.size != self.count:
            raise SchemaError(
                f"{self.name}: {flat.size} values stored, shape wants {self.count}"
            )
        flat.setflags(write=False)
        object.__setattr__(self, "data", flat)

    @classmethod
    def from_values(cls, name: str, values: np.ndarray, dtype: Dtype = FP32) -> "ParamTensor":
        values = np.asarray(values)
        return cls(name, tuple(values.shape), dtype, dtype.encode(values.reshape(-1)))

    @property
    def count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def nbytes(self) -> int:
        return self.count * self.dtype.width

    def values(self) -> np.ndarray:
        """Decoded float32 values in the declared shape."""
        return self.dtype.decode(self.data).reshape(self.shape)

    def codes(self) -> np.ndarray:
        return self.dtype.code_view(self.data)

    def tobytes(self) -> bytes:
        return self.data.tobytes()


class ParamStore:
    """Ordered, named tensors plus string metadata.

    Order is part of identity: the flat byte stream concatenates tensor
    buffers in declared order, so two stores with the same tensors in a
    different order are different stores.
    """

    def __init__(self, tensors, meta: dict[str, str] | None = None):
        tensors = tuple(tensors)
        names = [t.name for t in tensors]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate tensor names")
        self.tensors = tensors
        self.meta = MappingProxyType(dict(meta or {}))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamStore):
            return NotImplemented
        return (
            self.schema() == other.schema()
            and dict(self.meta) == dict(other.meta)
            and self.flatten() == other.flatten()
        )

    def __len__(self) -> int:
        return len(self.tensors)

    def __getitem__(self, name: str) -> ParamTensor:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def total_count(self) -> int:
        return sum(t.count for t in self.tensors)

    def schema(self) -> tuple:
        return tuple((t.name, t.shape, t.dtype) for t in self.tensors)

    def flatten(self) -> bytes:
        return b"".join(t.tobytes() for t in self.tensors)

    def values(self) -> np.ndarray:
        """All decoded values as one float32 vector, in tensor order."""
        if not self.tensors:
            return np.empty(0, dtype=np.float32)
        return np.concatenate([t.values().reshape(-1) for t in self.tensors])

    def replace_values(self, flat_values: np.ndarray) -> "ParamStore":
        """New store with the same schema, values taken from a flat vector."""
        if flat_values.size != self.total_count:
            raise SchemaError(
                f"{flat_values.size} values for a store of {self.total_count}"
            )
        out, at = [], 0
        for t in self.tensors:
            chunk = flat_values[at : at + t.count]
            out.append(ParamTensor.from_values(t.name, chunk.reshape(t.shape), t.dtype))
            at += t.count
        return ParamStore(out, self.meta)


def unflatten(data: bytes, schema, meta: dict[str, str] | None = None) -> ParamStore:
    """Inverse of `ParamStore.flatten` for a known schema."""
    expected = sum(int(np.prod(s, dtype=np.int64)) * d.width for _, s, d in schema)
    if len(data) != expected:
        raise SchemaError(f"stream is {len(data)} bytes, schema wants {expected}")
    tensors, at = [], 0
    for name, shape, dtype in schema:
        n = int(np.prod(shape, dtype=np.int64)) * dtype.width
        raw = np.frombuffer(data[at : at + n], dtype=dtype.storage)
        tensors.append(ParamTensor(name, tuple(shape), dtype, raw))
        at += n
    return ParamStore(tensors, meta)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.at = 0

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.data):
            raise FormatError("truncated", f"wanted {n} bytes at offset {self.at}")
        out = self.data[self.at : self.at + n]
        self.at += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _encode_meta(meta) -> bytes:
    out = [struct.pack("<I", len(meta))]
    for k in meta:
        out.append(_pack_str(k))
        out.append(_pack_str(meta[k]))
    return b"".join(out)


def _decode_meta(r: _Reader) -> dict[str, str]:
    return {r.string(): r.string() for _ in range(r.u32())}


def _encode_dtype(d: Dtype) -> bytes:
    return struct.pack("<B", _TAG_CODES[d.tag])


def _dtype_from_tag(code: int, name: str, meta: dict[str, str]) -> Dtype:
    for tag, c in _TAG_CODES.items():
        if c == code:
            break
    else:
        raise FormatError("truncated", f"unknown dtype tag {code}")
    if tag == "int8":
        scale = meta.get(f"int8.scale.{name}")
        zp = meta.get(f"int8.zp.{name}", "0")
        return Dtype("int8", scale=float(scale) if scale else None, zero_point=int(zp))
    return Dtype(tag)


def _int8_meta(store: ParamStore) -> dict[str, str]:
    meta = dict(store.meta)
    for t in store.tensors:
        if t.dtype.tag == "int8" and t.dtype.scale is not None:
            meta[f"int8.scale.{t.name}"] = repr(t.dtype.scale)
            meta[f"int8.zp.{t.name}"] = str(t.dtype.zero_point)
    return meta


def dumps(store: ParamStore) -> bytes:
    """Serialize a store to MLPS bytes."""
    out = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(store.tensors))]
    out.append(_encode_meta(_int8_meta(store)))
    for t in store.tensors:
        out.append(_pack_str(t.name))
        out.append(_encode_dtype(t.dtype))
        out.append(struct.pack("<B", len(t.shape)))
        out.append(struct.pack(f"<{len(t.shape)}Q", *t.shape))
        out.append(t.tobytes())
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


def loads(data: bytes) -> ParamStore:
    """Parse MLPS bytes back into a store."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad-magic", "not an MLPS file")
    if len(data) < 38:  # magic+version+count+empty meta+digest
        raise FormatError("truncated", "shorter than the minimal container")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checksum", "SHA-256 trailer mismatch")
    r = _Reader(body)
    r.take(4)
    version = r.u16()
    if version != VERSION:
        raise FormatError("version", f"version {version}, expected {VERSION}")
    n_tensors = r.u32()
    meta = _decode_meta(r)
    tensors = []
    for _ in range(n_tensors):
        name = r.string()
        dtype = _dtype_from_tag(r.u8(), name, meta)
        rank = r.u8()
        shape = tuple(r.u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = np.frombuffer(r.take(count * dtype.width), dtype=dtype.storage)
        tensors.append(ParamTensor(name, shape, dtype, raw))
    if r.at != len(body):
        raise FormatError("truncated", f"{len(body) - r.at} trailing bytes")
    user_meta = {k: v for k, v in meta.items() if not k.startswith("int8.")}
    return ParamStore(tensors, user_meta)


def save(store: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(store))


def load(path) -> ParamStore:
    with open(path, "rb") as fh:
        return loads(fh.read())
