"""Statistical tests deciding whether candidate parameters look genuine.

This is the attacker's cheap filter: a candidate that fails here can be
discarded without ever running the model. Indistinguishable transforms must
make these tests useless; plain AES must not survive them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .errors import SampleError
from .params import ParamStore

MIN_BYTES = 256 * 20
DEFAULT_BINS = 64
# The byte stage discards a candidate only when uniformity is *not* rejected
# at this level. Discarding the true key is unrecoverable, so the filter is
# deliberately conservative; it still flags virtually every AES-GARBAGE
# candidate, whose uniformity p-value is uniform on (0,1).
UNIFORM_CONSISTENCY_CUTOFF = 1e-4


class Verdict(enum.Enum):
    PLAUSIBLE = "plausible"
    IMPLAUSIBLE = "implausible"


@dataclass(frozen=True)
class DistributionStats:
    """Reference summary of a genuine parameter set."""

    byte_histogram: np.ndarray  # 256 counts
    bin_edges: np.ndarray  # interior edges of equal-probability value bins
    edge_cdf: np.ndarray  # empirical CDF of the reference at each edge
    value_histogram: np.ndarray  # counts per bin (len(bin_edges) + 1)
    sample_size: int
    mean: float
    variance: float
    kurtosis: float

    def to_dict(self) -> dict:
        return {
            "sample_size": self.sample_size,
            "mean": self.mean,
            "variance": self.variance,
            "kurtosis": self.kurtosis,
            "byte_histogram": self.byte_histogram.tolist(),
            "bin_edges": self.bin_edges.tolist(),
            "value_histogram": self.value_histogram.tolist(),
        }


def byte_histogram(data: bytes) -> np.ndarray:
    return np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)


def uniformity_chi2(data: bytes | np.ndarray) -> tuple[float, float]:
    """Pearson chi-square of a byte stream against the uniform byte law.

    255 degrees of freedom; the p-value is the regularized upper incomplete
    gamma function at the statistic.
    """
    counts = (
        np.asarray(data, dtype=np.float64)
        if isinstance(data, np.ndarray) and data.size == 256
        else byte_histogram(data).astype(np.float64)
    )
    n = counts.sum()
    if n < MIN_BYTES:
        raise SampleError(f"{int(n)} bytes, need at least {MIN_BYTES}")
    expected = n / 256.0
    stat = float(((counts - expected) ** 2 / expected).sum())
    p = float(special.gammaincc(255 / 2.0, stat / 2.0))
    return stat, p


def ks_two_sample(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic with asymptotic p-value."""
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise SampleError("both samples must be non-empty")
    res = stats.ks_2samp(a, b, method="asymp")
    return float(res.statistic), float(res.pvalue)


def reference_stats(values: np.ndarray, data: bytes | None = None, bins: int = DEFAULT_BINS) -> DistributionStats:
    """Build the reference summary from genuine parameter values.

    Bins are equal-probability quantiles of the reference, which maximizes
    power against smooth alternatives.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        raise SampleError("reference has no finite values")
    qs = np.linspace(0.0, 1.0, bins + 1)[1:-1]
    edges = np.quantile(finite, qs)
    srt = np.sort(finite)
    edge_cdf = np.searchsorted(srt, edges, side="right") / finite.size
    hist = np.histogram(finite, bins=np.concatenate(([-np.inf], edges, [np.inf])))[0]
    if data is None:
        data = finite.astype("<f4").tobytes()
    m = float(finite.mean())
    v = float(finite.var())
    k = float(((finite - m) ** 4).mean() / v**2) if v > 0 else 0.0
    return DistributionStats(
        byte_histogram=byte_histogram(data),
        bin_edges=edges,
        edge_cdf=edge_cdf,
        value_histogram=hist,
        sample_size=finite.size,
        mean=m,
        variance=v,
        kurtosis=k,
    )


def value_ks(values: np.ndarray, reference: DistributionStats) -> tuple[float, float]:
    """KS distance between candidate values and the reference CDF at the bin
    edges, with the two-sample asymptotic p-value.

    Non-finite candidate values land beyond the outermost edges and show up
    as tail-mass discrepancies.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    n = values.size
    if n == 0:
        raise SampleError("candidate has no values")
    nan = np.isnan(values)
    if nan.any():  # NaN sorts unpredictably; pin it to the upper tail
        values = np.where(nan, np.inf, values)
    cand_cdf = np.searchsorted(np.sort(values), reference.bin_edges, side="right") / n
    d = float(np.abs(cand_cdf - reference.edge_cdf).max())
    m = reference.sample_size
    en = np.sqrt(n * m / (n + m))
    p = float(special.kolmogorov(en * d))
    return d, p


def distinguish(candidate: ParamStore, reference: DistributionStats, alpha: float = 0.01) -> Verdict:
    """Decide whether a detransformed candidate is plausible as genuine
    parameters.

    Two stages: candidate bytes consistent with uniform noise mean an
    encryption-garbage candidate; otherwise the value distribution must match
    the reference at level `alpha`.
    """
    _, p_uniform = uniformity_chi2(candidate.flatten())
    if p_uniform > UNIFORM_CONSISTENCY_CUTOFF:
        return Verdict.IMPLAUSIBLE
    _, p_value = value_ks(candidate.values(), reference)
    if p_value < alpha:
        return Verdict.IMPLAUSIBLE
    return Verdict.PLAUSIBLE
