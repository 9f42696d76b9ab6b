"""Paired method comparison: metric differences, Wilcoxon signed-rank test, z-scores, MOS tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .errors import DegenerateSampleError, InputError

EXACT_MAX_N = 12


def metric_diff(scores_a: Sequence[float] | Mapping[str, float],
                scores_b: Sequence[float] | Mapping[str, float]) -> list[float]:
    """Elementwise ``a - b``. Mappings are aligned by image id (order taken from ``a``)."""
    if isinstance(scores_a, Mapping) or isinstance(scores_b, Mapping):
        if not (isinstance(scores_a, Mapping) and isinstance(scores_b, Mapping)):
            raise InputError("both score collections must be keyed by image id, or neither")
        only_a = sorted(set(scores_a) - set(scores_b))
        only_b = sorted(set(scores_b) - set(scores_a))
        if only_a or only_b:
            raise InputError(f"image ids not aligned: only in first {only_a[:10]}, only in second {only_b[:10]}")
        return [float(scores_a[k]) - float(scores_b[k]) for k in scores_a]
    if len(scores_a) != len(scores_b):
        raise InputError(f"score lists differ in length: {len(scores_a)} vs {len(scores_b)}")
    return [float(a) - float(b) for a, b in zip(scores_a, scores_b)]


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """Ascending ranks starting at 1; tied values share the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(v.size, dtype=np.float64)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


@dataclass
class SignedRankResult:
    n: int
    W: float
    sigma_W: float
    z: float
    p_value: float  # two-sided, normal approximation
    deltas: list[float] = field(repr=False)
    signed_ranks: list[float] = field(repr=False, default_factory=list)
    n_zero: int = 0
    p_exact: float | None = None  # two-sided, full enumeration
    p_exact_greater: float | None = None  # P(W >= observed)
    p_exact_less: float | None = None  # P(W <= observed)

    @property
    def p_normal_greater(self) -> float:
        return normal_sf(self.z)

    @property
    def p_normal_less(self) -> float:
        return normal_sf(-self.z)

    @property
    def p_report(self) -> float:
        """The exact p when available, otherwise the normal approximation."""
        return self.p_exact if self.p_exact is not None else self.p_value

    def as_dict(self) -> dict:
        d = {"n": self.n, "n_zero": self.n_zero, "W": self.W, "sigma_W": self.sigma_W, "z": self.z,
             "p_normal": self.p_value}
        if self.p_exact is not None:
            d.update(p_exact=self.p_exact, p_exact_greater=self.p_exact_greater, p_exact_less=self.p_exact_less)
        return d


def wilcoxon_signed_rank(deltas: Sequence[float], exact_max_n: int = EXACT_MAX_N) -> SignedRankResult:
    """Signed-rank statistic W = sum(sign(d) * rank(|d|)) with exact zeros dropped.

    sigma_W = sqrt(n(n+1)(2n+1)/6), z = W / sigma_W, no continuity correction.
    For n <= ``exact_max_n`` the exact p-values come from all 2^n sign assignments.
    """
    d = np.asarray(deltas, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise InputError("deltas must be finite")
    nonzero = d[d != 0.0]
    n = int(nonzero.size)
    if n == 0:
        raise DegenerateSampleError("all differences are zero; the signed-rank test is undefined")
    ranks = average_ranks(np.abs(nonzero))
    signed = np.sign(nonzero) * ranks
    w = float(signed.sum())
    sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 6.0)
    z = w / sigma
    res = SignedRankResult(n=n, W=w, sigma_W=sigma, z=z, p_value=min(1.0, 2.0 * normal_sf(abs(z))),
                           deltas=d.tolist(), signed_ranks=signed.tolist(), n_zero=int(d.size - n))
    if n <= exact_max_n:
        ge, le, two, total = kernels.signed_rank_tail_counts(np.ascontiguousarray(ranks), w)
        res.p_exact, res.p_exact_greater, res.p_exact_less = two / total, ge / total, le / total
    return res


@dataclass
class ZScoreSummary:
    mean: float
    std: float
    q1: float
    median: float
    q3: float
    iqr: float
    whisker_low: float
    whisker_high: float
    z: list[float] = field(repr=False)


def zscores(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    sd = v.std()
    if v.size < 2 or sd == 0.0:
        raise DegenerateSampleError("z-scores need at least two distinct values")
    return (v - v.mean()) / sd


def zscore_summary(values: Sequence[float]) -> ZScoreSummary:
    """Population z-normalization plus box-plot quartiles (linear interpolation)."""
    if len(values) < 4:
        raise InputError(f"quartiles need at least 4 values, got {len(values)}")
    z = zscores(values)
    q1, med, q3 = np.percentile(z, [25, 50, 75])
    iqr = q3 - q1
    lo = float(z[z >= q1 - 1.5 * iqr].min())
    hi = float(z[z <= q3 + 1.5 * iqr].max())
    return ZScoreSummary(float(z.mean()), float(z.std()), float(q1), float(med), float(q3), float(iqr), lo, hi,
                         z.tolist())


@dataclass
class MosRow:
    mean: float
    std: float
    max: float
    min: float
    n: int


@dataclass
class MosTable:
    rows: dict[tuple[str, str], MosRow]  # (method, question) -> aggregate

    def get(self, method: str, question: str) -> MosRow:
        return self.rows[(method, question)]


def mos_aggregate(raw: Mapping[str, Mapping[str, Sequence[float]]]) -> MosTable:
    """``raw[method][question]`` is a list of scores in [1, 5].

    Each group gets mean, sample standard deviation (0 for a single score),
    max and min.
    """
    rows = {}
    for method, questions in raw.items():
        for question, scores in questions.items():
            arr = np.asarray(scores, dtype=np.float64)
            if arr.size == 0:
                raise InputError(f"no scores for {method!r} / {question!r}")
            if np.any((arr < 1.0) | (arr > 5.0)):
                raise InputError(f"scores for {method!r} / {question!r} must lie in [1, 5]")
            std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
            rows[(method, question)] = MosRow(float(arr.mean()), std, float(arr.max()), float(arr.min()), arr.size)
    return MosTable(rows)
