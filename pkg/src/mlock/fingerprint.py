"""Hardware fingerprints and key material derived from them.

Three sources: a timing probe over a dependent-addition loop (device-family
characteristic), the floating-point accumulation error of a linear-layer
chain (platform/arithmetic characteristic), and a noisy PUF bit source made
reliable with a repetition-code fuzzy extractor.

The timing and arithmetic probes run on the host CPU; the measurement
mechanism (cycle counting of arithmetic, accumulation-order error) is the
same one GPU devices expose.
"""

from __future__ import annotations

import enum
import hashlib
import os
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CapabilityError,
    CapacityError,
    RecoveryFailed,
    SchemaError,
    UnstableFingerprint,
)
from .params import FP16, FP32, Dtype

CLOCK_SYMBOLS = 5  # 20-bit output, rendered as 5 hex symbols
CLOCK_MASK = (1 << 20) - 1
DEFAULT_TRIALS = 31
DEFAULT_DIVISOR = 1 << 17  # ns per quantum of the timing value
KEY_BYTES = 32


class Method(enum.Enum):
    CLOCK = 1
    FINITE_PRECISION = 2
    PUF = 3
    COMPOSITE = 4


@dataclass(frozen=True)
class Fingerprint:
    method: Method
    symbols: str  # lowercase hex
    entropy_bits: int

    def __post_init__(self):
        if not self.symbols or any(c not in "0123456789abcdef" for c in self.symbols):
            raise SchemaError(f"symbols must be lowercase hex, got {self.symbols!r}")
        if self.method is Method.CLOCK and len(self.symbols) != CLOCK_SYMBOLS:
            raise SchemaError("clock fingerprints are exactly 5 hex symbols")
        if self.method is Method.FINITE_PRECISION and len(self.symbols) != 64:
            raise SchemaError("finite-precision fingerprints are 64 hex symbols")
        if self.entropy_bits < 0 or self.entropy_bits > 4 * len(self.symbols):
            raise SchemaError("entropy budget exceeds symbol capacity")


@dataclass(frozen=True)
class HardwareProfile:
    authorized_fingerprints: frozenset[Fingerprint]
    label: str

    def authorizes(self, fp: Fingerprint) -> bool:
        return fp in self.authorized_fingerprints


@dataclass(frozen=True)
class EntropyEstimate:
    bits: int
    qualifier: str  # "upper-bound" | "theoretical" | "assumed-key-size"


def _dependent_adds(iters: int) -> int:
    # C-level accumulator chain; each step depends on the previous sum.
    return sum(range(iters))


def clock_fingerprint(
    iters: int,
    trials: int = DEFAULT_TRIALS,
    counter=None,
    divisor: int = DEFAULT_DIVISOR,
) -> Fingerprint:
    """Time a dependent-addition loop and render the tick count as 5 hex
    symbols.

    Each trial runs `iters` chained additions between two counter reads; the
    elapsed ticks are quantized by `divisor` and masked to 20 bits. The
    reported value is the strict majority across trials; without one the
    probe raises with the observed spread. `counter` defaults to the
    monotonic nanosecond clock and is injectable for tests.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if counter is None:
        counter = getattr(time, "perf_counter_ns", None)
        if counter is None:  # pragma: no cover
            raise CapabilityError("no monotonic tick counter available")
    votes = Counter()
    for _ in range(trials):
        t0 = counter()
        _dependent_adds(iters)
        t1 = counter()
        votes[((t1 - t0) // divisor) & CLOCK_MASK] += 1
    value, count = votes.most_common(1)[0]
    if count * 2 <= trials:
        raise UnstableFingerprint(votes)
    return Fingerprint(Method.CLOCK, f"{value:0{CLOCK_SYMBOLS}x}", 20)


def finite_precision_fingerprint(
    seed: int,
    layers: int,
    width: int,
    dtype: Dtype = FP32,
    order: str = "native",
) -> Fingerprint:
    """Hash the accumulation error of a seeded linear-layer chain.

    The chain is evaluated twice: natively at `dtype` (the platform's own
    accumulation order), and in float64 with a pinned strictly-sequential
    accumulation, rounded to `dtype` after every layer. The SHA-256 of the
    difference is the fingerprint: identical arithmetic gives an identical
    hash, a different accumulation order gives a different one.

    `order="reversed"` feeds the native path its inputs in reverse index
    order, standing in for a platform that accumulates the other way.
    """
    if layers < 1 or width < 1:
        raise ValueError("layers and width must be >= 1")
    if dtype.tag not in ("fp32", "fp16"):
        raise SchemaError(f"unsupported probe dtype {dtype.tag}")
    if order not in ("native", "reversed"):
        raise ValueError("order must be 'native' or 'reversed'")
    np_dtype = np.float32 if dtype.tag == "fp32" else np.float16
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(width)
    x_native = rng.standard_normal(width).astype(np_dtype)
    x_ref = x_native.astype(np.float64)
    for _ in range(layers):
        w = (rng.standard_normal((width, width)) * scale).astype(np_dtype)
        if order == "reversed":
            x_native = np.ascontiguousarray(w[:, ::-1]) @ np.ascontiguousarray(x_native[::-1])
        else:
            x_native = w @ x_native
        # pinned reference: sequential left-to-right accumulation in float64,
        # rounded to the probe dtype once per layer
        seq = np.cumsum(w.astype(np.float64) * x_ref[None, :], axis=1)[:, -1]
        x_ref = seq.astype(np_dtype).astype(np.float64)
    error = x_native.astype(np.float64) - x_ref
    digest = hashlib.sha256(error.astype("<f8").tobytes()).hexdigest()
    return Fingerprint(Method.FINITE_PRECISION, digest, 2 * layers)


def puf_read(
    source,
    bits: int,
    error_rate: float = 0.05,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Read a noisy bit vector from a PUF source.

    `source` may be a file path (bits taken from its contents) or an integer
    seed for the synthetic mode, where a hidden ground truth is derived from
    the seed and each read flips every bit independently with `error_rate`.
    """
    if bits < 1:
        raise ValueError("bits must be >= 1")
    if isinstance(source, (str, Path)):
        raw = Path(source).read_bytes()
        if len(raw) * 8 < bits:
            raise CapacityError(f"source has {len(raw) * 8} bits, need {bits}")
        return np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:bits]
    if not 0.0 <= error_rate <= 1.0:
        raise ValueError("error_rate must be in [0, 1]")
    truth_rng = np.random.default_rng(np.random.SeedSequence([int(source), 0x5AF]))
    truth = truth_rng.integers(0, 2, size=bits, dtype=np.uint8)
    if rng is None:
        rng = np.random.default_rng()
    flips = (rng.random(bits) < error_rate).astype(np.uint8)
    return truth ^ flips


@dataclass(frozen=True)
class FuzzyHelper:
    """Public helper data of the repetition-code secure sketch."""

    repetition: int  # odd, >= 3
    helper_data: bytes  # reference XOR repeated random key bits
    key_check: bytes  # 8-byte truncated hash of the derived key

    def __post_init__(self):
        if self.repetition < 3 or self.repetition % 2 == 0:
            raise SchemaError("repetition length must be odd and >= 3")
        if len(self.helper_data) != self.repetition * KEY_BYTES:
            raise SchemaError("helper data must be repetition x key length")


def _bits_to_bytes(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(np.uint8)).tobytes()


def fuzzy_gen(
    reference_bits: np.ndarray, rng: np.random.Generator | None = None
) -> tuple[bytes, FuzzyHelper]:
    """Derive a 256-bit key from reference PUF bits plus public helper data.

    Tolerates up to floor((r-1)/2) bit flips per r-bit block at recovery.
    """
    reference_bits = np.asarray(reference_bits, dtype=np.uint8).reshape(-1)
    if reference_bits.size % (8 * KEY_BYTES) != 0:
        raise CapacityError("reference length must be 256 x repetition")
    r = reference_bits.size // (8 * KEY_BYTES)
    if r < 3 or r % 2 == 0:
        raise CapacityError(f"implied repetition {r} must be odd and >= 3")
    if rng is None:
        rng = np.random.default_rng()
    random_word = rng.integers(0, 2, size=8 * KEY_BYTES, dtype=np.uint8)
    helper_bits = reference_bits ^ np.repeat(random_word, r)
    key = hashlib.sha256(_bits_to_bytes(reference_bits)).digest()
    check = hashlib.sha256(key).digest()[:8]
    return key, FuzzyHelper(r, _bits_to_bytes(helper_bits), check)


def fuzzy_rep(noisy_bits: np.ndarray, helper: FuzzyHelper) -> bytes:
    """Recover the key from a noisy re-read and the public helper."""
    noisy_bits = np.asarray(noisy_bits, dtype=np.uint8).reshape(-1)
    r = helper.repetition
    if noisy_bits.size != 8 * KEY_BYTES * r:
        raise CapacityError(f"need {8 * KEY_BYTES * r} bits, got {noisy_bits.size}")
    helper_bits = np.unpackbits(np.frombuffer(helper.helper_data, dtype=np.uint8))
    codeword = noisy_bits ^ helper_bits
    decoded = (codeword.reshape(-1, r).sum(axis=1) * 2 > r).astype(np.uint8)
    corrected = helper_bits ^ np.repeat(decoded, r)
    key = hashlib.sha256(_bits_to_bytes(corrected)).digest()
    if hashlib.sha256(key).digest()[:8] != helper.key_check:
        raise RecoveryFailed("key check mismatch after error correction")
    return key


def derive_key(fp: Fingerprint) -> bytes:
    """SHA-256 over the method tag byte followed by the UTF-8 symbols."""
    if not fp.symbols:
        raise SchemaError("fingerprint has no symbols")
    return hashlib.sha256(bytes([fp.method.value]) + fp.symbols.encode("utf-8")).digest()


def combine(fingerprints) -> Fingerprint:
    """Concatenate fingerprints into a composite with summed entropy."""
    fps = list(fingerprints)
    if not fps:
        raise ValueError("nothing to combine")
    symbols = "".join(f.symbols for f in fps)
    bits = min(sum(f.entropy_bits for f in fps), 4 * len(symbols))
    return Fingerprint(Method.COMPOSITE, symbols, bits)


def entropy_estimate(method: Method, op_count: int | None = None) -> EntropyEstimate:
    """Entropy budget per source: clock 20 (strict upper bound), finite
    precision 2 bits per probe operation (theoretical), PUF 256 (key size)."""
    if method is Method.CLOCK:
        return EntropyEstimate(20, "upper-bound")
    if method is Method.FINITE_PRECISION:
        if op_count is None:
            raise ValueError("finite-precision estimate needs the probe op count")
        return EntropyEstimate(2 * op_count, "theoretical")
    if method is Method.PUF:
        return EntropyEstimate(256, "assumed-key-size")
    raise ValueError("estimate composites per constituent method")
