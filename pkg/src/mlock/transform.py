"""Keyed parameter transformations: AES, value shuffling, pre-transformed AES.

All three destroy model function under a wrong key. They differ in what else
they give the attacker:

* AES-CTR alone encrypts perfectly but wrong-key output is uniform bytes,
  which a cheap statistical test spots instantly.
* Shuffling permutes the value sequence: indistinguishable in aggregate, but
  the value multiset survives (no encryption).
* Pre-transformed AES first maps values to uniform 32-bit codes through a
  public invertible map built from the parameter distribution, then encrypts;
  wrong-key decrypts detransform into values that match the genuine
  distribution.

Wrong keys are deliberately undetectable: every unlock returns a
schema-valid store.
"""

from __future__ import annotations

import enum
import hashlib
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from scipy import special

from .errors import CapacityError, DescriptorError, FormatError, OutlierSaturationWarning, SchemaError
from .params import (
    Dtype,
    ParamStore,
    ParamTensor,
    _pack_str,
    _Reader,
    _encode_meta,
    _decode_meta,
    _encode_dtype,
    _dtype_from_tag,
    _TAG_CODES,
)

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

MAGIC = b"MLCK"
VERSION = 1
CODE_SPACE_BITS = 32  # uniform code space of the pre-transform
ZERO_NONCE = bytes(16)


class TransformKind(enum.Enum):
    AES = 1
    SHUFFLE = 2
    PT_AES = 3


def _aes_ctr(key: bytes, nonce: bytes, data: bytes) -> bytes:
    if len(key) != 32:
        raise SchemaError("key must be 256 bits")
    enc = Cipher(algorithms.AES(key), modes.CTR(nonce)).encryptor()
    return enc.update(data) + enc.finalize()


def _keystream_words(key: bytes, count: int) -> np.ndarray:
    raw = _aes_ctr(key, ZERO_NONCE, bytes(count * 8))
    return np.frombuffer(raw, dtype="<u8")


# --- keyed permutation -------------------------------------------------------

_U64_MAX = np.uint64(0xFFFFFFFFFFFFFFFF)


def _fy_python(perm: np.ndarray, words: np.ndarray) -> int:
    wi = 0
    total = len(words)
    for i in range(len(perm) - 1, 0, -1):
        bound = i + 1
        limit = (int(_U64_MAX) // bound) * bound
        while True:
            if wi >= total:
                return -1
            w = int(words[wi])
            wi += 1
            if w < limit:
                break
        j = w % bound
        perm[i], perm[j] = perm[j], perm[i]
    return wi


if _HAVE_NUMBA:

    @njit(cache=False)
    def _fy_numba(perm, words):  # pragma: no cover - numba-compiled
        wi = 0
        total = len(words)
        for i in range(len(perm) - 1, 0, -1):
            bound = np.uint64(i + 1)
            limit = (np.uint64(0xFFFFFFFFFFFFFFFF) // bound) * bound
            while True:
                if wi >= total:
                    return -1
                w = words[wi]
                wi += 1
                if w < limit:
                    break
            j = np.int64(w % bound)
            tmp = perm[i]
            perm[i] = perm[j]
            perm[j] = tmp
        return wi


def keyed_permutation(key: bytes, n: int, use_numba: bool = _HAVE_NUMBA) -> np.ndarray:
    """Fisher-Yates permutation of range(n) driven by an AES-CTR keystream.

    Rejection sampling keeps every draw unbiased; the same key always yields
    the same permutation on every platform.
    """
    perm = np.arange(n, dtype=np.int64)
    if n < 2:
        return perm
    need = n + 64
    while True:
        words = _keystream_words(key, need)
        fy = _fy_numba if use_numba else _fy_python
        consumed = fy(perm, words)
        if consumed >= 0:
            return perm
        perm = np.arange(n, dtype=np.int64)  # pragma: no cover - ~2^-50 event
        need *= 2  # pragma: no cover


# --- pre-transforms ----------------------------------------------------------


def gaussian_cdf(x, mu: float, sigma: float):
    """Gaussian CDF via erf; maps N(mu, sigma^2) samples to uniform (0,1)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return 0.5 * (1.0 + special.erf((np.asarray(x, dtype=np.float64) - mu) / (sigma * np.sqrt(2.0))))


@dataclass(frozen=True)
class GaussianPreTransform:
    """Analytic CDF map. Kept for comparison: outliers saturate (flagged),
    and real parameter distributions are only approximately Gaussian, so
    indistinguishability is weaker than the empirical table."""

    dtype: Dtype
    mu: float
    sigma: float
    saturated_count: int = 0

    mode = "gaussian"

    @property
    def ident(self) -> str:
        return f"gaussian/{self.dtype.tag}"

    def encode(self, tensor: ParamTensor, rng=None) -> np.ndarray:
        y = gaussian_cdf(tensor.values().reshape(-1), self.mu, self.sigma)
        raw = np.floor(y * 2.0**CODE_SPACE_BITS)
        saturated = int(((raw < 1) | (raw > 2**CODE_SPACE_BITS - 2)).sum())
        if saturated:
            object.__setattr__(self, "saturated_count", self.saturated_count + saturated)
            warnings.warn(
                f"{saturated} outlier value(s) saturated the Gaussian pre-transform",
                OutlierSaturationWarning,
            )
        return np.clip(raw, 1, 2**CODE_SPACE_BITS - 2).astype("<u4")

    def decode(self, codes: np.ndarray) -> np.ndarray:
        y = (codes.astype(np.float64) + 0.5) / 2.0**CODE_SPACE_BITS
        x = self.mu + self.sigma * np.sqrt(2.0) * special.erfinv(2.0 * y - 1.0)
        return self.dtype.encode(x)


@dataclass(frozen=True)
class EmpiricalPreTransform:
    """Staircase empirical-CDF map between dtype codes and uniform 32-bit
    codes.

    Every dtype code owns a contiguous interval of the 32-bit space sized
    proportionally to its frequency in the source store (minimum one slot, so
    the map is exactly invertible on all 2^n codes). Encoding draws a uniform
    code inside the value's interval; decoding finds the interval. Wrong-key
    decrypt therefore yields values distributed like the source parameters.
    """

    dtype: Dtype
    starts_by_code: np.ndarray = field(repr=False)  # u32 interval start per code
    codes_by_value: np.ndarray = field(repr=False)  # codes in ascending value order

    mode = "empirical"

    @property
    def ident(self) -> str:
        return f"empirical/{self.dtype.tag}"

    @property
    def precision_bits(self) -> int:
        return self.dtype.code_bits

    @property
    def starts_value_order(self) -> np.ndarray:
        return self.starts_by_code[self.codes_by_value].astype(np.uint64)

    def interval_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        starts = self.starts_value_order
        ends = np.append(starts[1:], np.uint64(2**CODE_SPACE_BITS))
        lo = np.empty_like(self.starts_by_code, dtype=np.uint64)
        hi = np.empty_like(lo)
        lo[self.codes_by_value] = starts
        hi[self.codes_by_value] = ends
        return lo, hi

    def encode(self, tensor: ParamTensor, rng: np.random.Generator | None = None) -> np.ndarray:
        if tensor.dtype != self.dtype:
            raise SchemaError(
                f"pre-transform built for {self.dtype.tag}, tensor is {tensor.dtype.tag}"
            )
        if rng is None:
            rng = np.random.default_rng()
        lo, hi = self.interval_bounds()
        codes = tensor.codes().reshape(-1).astype(np.int64)
        u = rng.integers(lo[codes], hi[codes], dtype=np.uint64)
        return u.astype("<u4")

    def decode(self, codes: np.ndarray) -> np.ndarray:
        starts = self.starts_value_order
        idx = np.searchsorted(starts, codes.astype(np.uint64), side="right") - 1
        return self.dtype.from_codes(self.codes_by_value[idx])

    def inverse_table(self) -> np.ndarray:
        """Coarse staircase sampled every 2^(32-n) codes, as stored on disk."""
        n = self.precision_bits
        step = np.uint64(2 ** (CODE_SPACE_BITS - n))
        probes = np.arange(1 << n, dtype=np.uint64) * step
        idx = np.searchsorted(self.starts_value_order, probes, side="right") - 1
        return self.codes_by_value[idx].astype("<u4")


PreTransform = GaussianPreTransform | EmpiricalPreTransform


def build_gaussian_pretransform(store: ParamStore) -> GaussianPreTransform:
    """Fit mu and sigma on the store and return the analytic map."""
    dtype = _single_dtype(store)
    vals = store.values().astype(np.float64)
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        raise SchemaError("store has no finite values")
    sigma = float(vals.std())
    if sigma == 0:
        raise SchemaError("degenerate store: zero variance")
    return GaussianPreTransform(dtype, float(vals.mean()), sigma)


def build_empirical_pretransform(store: ParamStore, n: int | None = None) -> EmpiricalPreTransform:
    """Build the staircase lookup table from the store's code histogram.

    `n` is the dtype code width; up to 16 bits is cheap, 32 is supported but
    needs 2^32-entry tables. Exact invertibility takes precedence over exact
    uniformity: unused codes still get one slot of the 32-bit space each,
    which costs at most 2^n / 2^32 of probability mass.
    """
    dtype = _single_dtype(store)
    if n is None:
        n = dtype.code_bits
    if n != dtype.code_bits:
        raise SchemaError(f"{dtype.tag} has {dtype.code_bits}-bit codes, not {n}")
    if n > 32:
        raise CapacityError(f"{n}-bit codes exceed the supported table size")
    if store.total_count == 0:
        raise SchemaError("store is empty")
    size = 1 << n
    counts = np.zeros(size, dtype=np.int64)
    for t in store.tensors:
        counts += np.bincount(t.codes().reshape(-1).astype(np.int64), minlength=size)
    order = np.argsort(dtype.value_order_keys(), kind="stable")
    counts_vo = counts[order]

    spare = 2**CODE_SPACE_BITS - size  # after the one guaranteed slot per code
    exact = spare * (counts_vo / counts_vo.sum())
    lengths = np.floor(exact).astype(np.uint64)
    remainder = spare - int(lengths.sum())
    if remainder:
        frac = exact - np.floor(exact)
        bonus = np.argsort(-frac, kind="stable")[:remainder]
        lengths[bonus] += np.uint64(1)
    lengths += np.uint64(1)
    starts_vo = np.zeros(size, dtype=np.uint64)
    np.cumsum(lengths[:-1], out=starts_vo[1:])
    starts_by_code = np.empty(size, dtype="<u4")
    starts_by_code[order] = starts_vo.astype("<u4")
    return EmpiricalPreTransform(dtype, starts_by_code, order.astype(np.int64))


def _single_dtype(store: ParamStore) -> Dtype:
    dtypes = {t.dtype for t in store.tensors}
    if len(dtypes) != 1:
        raise SchemaError("transform needs a single-dtype store")
    return next(iter(dtypes))


# --- locked model container --------------------------------------------------


@dataclass(frozen=True)
class TransformDescriptor:
    """Public description of how a model was locked (never secret)."""

    kind: TransformKind
    nonce: bytes | None
    schema: tuple
    pretransform_id: str | None = None

    def __post_init__(self):
        uses_aes = self.kind in (TransformKind.AES, TransformKind.PT_AES)
        if uses_aes and (self.nonce is None or len(self.nonce) != 16):
            raise SchemaError("AES transforms need a 16-byte nonce")
        if not uses_aes and self.nonce is not None:
            raise SchemaError("only AES transforms carry a nonce")


@dataclass(frozen=True)
class LockedModel:
    descriptor: TransformDescriptor
    payload: bytes
    pretransform: PreTransform | None
    meta: dict
    integrity: str = ""

    def __post_init__(self):
        object.__setattr__(self, "meta", dict(self.meta))
        object.__setattr__(self, "integrity", hashlib.sha256(self.payload).hexdigest())


def _new_nonce(rng: np.random.Generator | None) -> bytes:
    if rng is None:
        return os.urandom(16)
    return rng.bytes(16)


def aes_lock(store: ParamStore, key: bytes, rng: np.random.Generator | None = None) -> LockedModel:
    """AES-256-CTR over the flat byte stream. No authentication on purpose:
    a wrong key must decrypt to garbage, not to an error."""
    nonce = _new_nonce(rng)
    payload = _aes_ctr(key, nonce, store.flatten())
    desc = TransformDescriptor(TransformKind.AES, nonce, store.schema())
    return LockedModel(desc, payload, None, dict(store.meta))


def aes_unlock(locked: LockedModel, key: bytes) -> ParamStore:
    from .params import unflatten

    data = _aes_ctr(key, locked.descriptor.nonce, locked.payload)
    return unflatten(data, locked.descriptor.schema, locked.meta)


def _width_pools(schema) -> dict[int, int]:
    pools: dict[int, int] = {}
    for _, shape, dtype in schema:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pools[dtype.width] = pools.get(dtype.width, 0) + count
    return pools


def _pool_permutations(key: bytes, schema) -> dict[int, np.ndarray]:
    # values of equal byte width form one pool; each pool gets its own
    # width-salted subkey so mixed-width stores stay deterministic
    pools = _width_pools(schema)
    perms = {}
    for width in sorted(pools):
        pool_key = hashlib.sha256(key + struct.pack("<I", width)).digest()
        perms[width] = keyed_permutation(pool_key, pools[width])
    return perms


def _gather_codes(store: ParamStore) -> dict[int, np.ndarray]:
    groups: dict[int, list] = {}
    for t in store.tensors:
        groups.setdefault(t.dtype.width, []).append(t.codes().reshape(-1))
    return {w: np.concatenate(v) for w, v in groups.items()}


def _scatter_codes(schema, meta, pools: dict[int, np.ndarray]) -> ParamStore:
    offsets = {w: 0 for w in pools}
    tensors = []
    for name, shape, dtype in schema:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        w = dtype.width
        chunk = pools[w][offsets[w] : offsets[w] + count]
        offsets[w] += count
        tensors.append(ParamTensor(name, shape, dtype, dtype.from_codes(chunk)))
    return ParamStore(tensors, meta)


def shuffle_lock(store: ParamStore, key: bytes) -> LockedModel:
    """Keyed pseudo-random permutation of the flat value sequence.

    Values, not bytes: each parameter keeps its bit pattern, so the value
    multiset is publicly visible - that is this transform's documented leak.
    """
    perms = _pool_permutations(key, store.schema())
    pools = _gather_codes(store)
    shuffled = {w: arr[perms[w]] for w, arr in pools.items()}
    permuted = _scatter_codes(store.schema(), store.meta, shuffled)
    desc = TransformDescriptor(TransformKind.SHUFFLE, None, store.schema())
    return LockedModel(desc, permuted.flatten(), None, dict(store.meta))


def shuffle_unlock(locked: LockedModel, key: bytes) -> ParamStore:
    from .params import unflatten

    permuted = unflatten(locked.payload, locked.descriptor.schema, locked.meta)
    perms = _pool_permutations(key, locked.descriptor.schema)
    pools = _gather_codes(permuted)
    restored = {}
    for w, arr in pools.items():
        out = np.empty_like(arr)
        out[perms[w]] = arr
        restored[w] = out
    return _scatter_codes(locked.descriptor.schema, locked.meta, restored)


def pretransformed_aes_lock(
    store: ParamStore,
    key: bytes,
    pre: PreTransform,
    rng: np.random.Generator | None = None,
) -> LockedModel:
    """Map values to uniform 32-bit codes through the public pre-transform,
    then AES-CTR. The reversed pre-transform ships with the model."""
    if pre is None:
        raise DescriptorError("pre-transformed AES needs a pre-transform")
    codes = [pre.encode(t, rng) for t in store.tensors]
    plain = b"".join(c.tobytes() for c in codes)
    nonce = _new_nonce(rng)
    payload = _aes_ctr(key, nonce, plain)
    desc = TransformDescriptor(TransformKind.PT_AES, nonce, store.schema(), pre.ident)
    return LockedModel(desc, payload, pre, dict(store.meta))


def pretransformed_aes_unlock(locked: LockedModel, key: bytes) -> ParamStore:
    pre = locked.pretransform
    if pre is None:
        raise DescriptorError("locked model carries no pre-transform")
    plain = _aes_ctr(key, locked.descriptor.nonce, locked.payload)
    u = np.frombuffer(plain, dtype="<u4")
    tensors, at = [], 0
    for name, shape, dtype in locked.descriptor.schema:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if at + count > u.size:
            raise SchemaError("payload shorter than the schema requires")
        tensors.append(ParamTensor(name, shape, dtype, pre.decode(u[at : at + count])))
        at += count
    if at != u.size:
        raise SchemaError("payload longer than the schema requires")
    return ParamStore(tensors, locked.meta)


def lock(
    store: ParamStore,
    key: bytes,
    kind: TransformKind,
    pretransform: PreTransform | None = None,
    rng: np.random.Generator | None = None,
) -> LockedModel:
    if kind is TransformKind.AES:
        return aes_lock(store, key, rng)
    if kind is TransformKind.SHUFFLE:
        return shuffle_lock(store, key)
    if kind is TransformKind.PT_AES:
        return pretransformed_aes_lock(store, key, pretransform, rng)
    raise ValueError(kind)


def unlock(locked: LockedModel, key: bytes) -> ParamStore:
    kind = locked.descriptor.kind
    if kind is TransformKind.AES:
        return aes_unlock(locked, key)
    if kind is TransformKind.SHUFFLE:
        return shuffle_unlock(locked, key)
    if kind is TransformKind.PT_AES:
        return pretransformed_aes_unlock(locked, key)
    raise ValueError(kind)


# --- MLCK container ----------------------------------------------------------


def dumps(locked: LockedModel) -> bytes:
    out = [MAGIC, struct.pack("<H", VERSION), struct.pack("<B", locked.descriptor.kind.value)]
    out.append(locked.descriptor.nonce or bytes(16))
    meta = dict(locked.meta)
    for name, _, dtype in locked.descriptor.schema:
        if dtype.tag == "int8" and dtype.scale is not None:
            meta[f"int8.scale.{name}"] = repr(dtype.scale)
            meta[f"int8.zp.{name}"] = str(dtype.zero_point)
    out.append(_encode_meta(meta))
    out.append(struct.pack("<I", len(locked.descriptor.schema)))
    for name, shape, dtype in locked.descriptor.schema:
        out.append(_pack_str(name))
        out.append(_encode_dtype(dtype))
        out.append(struct.pack("<B", len(shape)))
        out.append(struct.pack(f"<{len(shape)}Q", *shape))
    pre = locked.pretransform
    if pre is None:
        out.append(b"\x00")
    elif pre.mode == "gaussian":
        out.append(b"\x01")
        out.append(struct.pack("<B", _TAG_CODES[pre.dtype.tag]))
        out.append(struct.pack("<ddQ", pre.mu, pre.sigma, pre.saturated_count))
    else:
        out.append(b"\x02")
        out.append(struct.pack("<B", _TAG_CODES[pre.dtype.tag]))
        out.append(struct.pack("<B", pre.precision_bits))
        out.append(pre.starts_by_code.astype("<u4").tobytes())
        out.append(pre.inverse_table().tobytes())
    out.append(struct.pack("<Q", len(locked.payload)))
    out.append(locked.payload)
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


def loads(data: bytes) -> LockedModel:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad-magic", "not an MLCK file")
    if len(data) < 4 + 2 + 1 + 16 + 4 + 4 + 1 + 8 + 32:
        raise FormatError("truncated", "shorter than the minimal container")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checksum", "SHA-256 trailer mismatch")
    r = _Reader(body)
    r.take(4)
    version = r.u16()
    if version != VERSION:
        raise FormatError("version", f"version {version}, expected {VERSION}")
    kind = TransformKind(r.u8())
    nonce = r.take(16)
    meta = _decode_meta(r)
    schema = []
    for _ in range(r.u32()):
        name = r.string()
        dtype = _dtype_from_tag(r.u8(), name, meta)
        rank = r.u8()
        schema.append((name, tuple(r.u64() for _ in range(rank)), dtype))
    mode = r.u8()
    pre = None
    if mode == 1:
        dtype = _dtype_from_tag(r.u8(), "", meta)
        mu, sigma, saturated = struct.unpack("<ddQ", r.take(24))
        pre = GaussianPreTransform(dtype, mu, sigma, saturated)
    elif mode == 2:
        dtype = _dtype_from_tag(r.u8(), "", meta)
        n = r.u8()
        size = 1 << n
        starts = np.frombuffer(r.take(4 * size), dtype="<u4")
        r.take(4 * size)  # inverse table is derivable from the starts
        order = np.argsort(dtype.value_order_keys(), kind="stable").astype(np.int64)
        pre = EmpiricalPreTransform(dtype, starts, order)
    elif mode != 0:
        raise FormatError("truncated", f"unknown pre-transform mode {mode}")
    payload = r.take(r.u64())
    if r.at != len(body):
        raise FormatError("truncated", f"{len(body) - r.at} trailing bytes")
    user_meta = {k: v for k, v in meta.items() if not k.startswith("int8.")}
    desc = TransformDescriptor(
        kind,
        nonce if kind in (TransformKind.AES, TransformKind.PT_AES) else None,
        tuple(schema),
        pre.ident if pre else None,
    )
    return LockedModel(desc, payload, pre, user_meta)


def save(locked: LockedModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(locked))


def load(path) -> LockedModel:
    with open(path, "rb") as fh:
        return loads(fh.read())
