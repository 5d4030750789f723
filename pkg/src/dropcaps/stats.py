"""Two-sided Mann-Whitney U test, Bonferroni correction and significance markers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import InputError

EXACT_LIMIT = 16
# (upper bound inclusive, marker), most significant first
MARKER_BANDS = ((1e-4, "****"), (1e-3, "***"), (1e-2, "**"), (5e-2, "*"))


@dataclass(frozen=True)
class MannWhitneyResult:
    u_a: float
    u_b: float
    p_value: float
    method: str  # "exact" or "normal"


def _exact_cdf_counts(n: int, m: int) -> np.ndarray:
    """Number of rank arrangements giving each U value (0..n*m), no ties."""
    # counts[i][j] polynomial over U for i items of a and j of b
    table = [[None] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        for j in range(m + 1):
            if i == 0 or j == 0:
                c = np.zeros(i * j + 1, dtype=np.int64)
                c[0] = 1
            else:
                # largest element belongs to a (adds j to U) or to b (adds 0)
                c = np.zeros(i * j + 1, dtype=np.int64)
                from_a = table[i - 1][j]
                c[j:j + len(from_a)] += from_a
                from_b = table[i][j - 1]
                c[:len(from_b)] += from_b
            table[i][j] = c
    return table[n][m]


def mann_whitney_u(a: Sequence[float], b: Sequence[float], method: str = "auto") -> MannWhitneyResult:
    """Two-sided test of ``a`` against ``b``.

    Exact null distribution when there are no ties and ``len(a)+len(b) <= 16``;
    otherwise a normal approximation with tie and continuity correction.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise InputError("both samples need at least one observation")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InputError("samples contain non-finite values")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    u_a = float(ranks[:n].sum() - n * (n + 1) / 2)
    u_b = n * m - u_a
    has_ties = len(np.unique(pooled)) < len(pooled)
    if method == "auto":
        method = "exact" if (not has_ties and n + m <= EXACT_LIMIT) else "normal"
    if method == "exact":
        if has_ties:
            raise InputError("exact distribution requires tie-free samples")
        counts = _exact_cdf_counts(n, m)
        total = counts.sum()
        u = int(round(min(u_a, u_b)))
        p = min(1.0, 2.0 * counts[:u + 1].sum() / total)
    elif method == "normal":
        big_n = n + m
        _, tie_sizes = np.unique(pooled, return_counts=True)
        tie_term = float((tie_sizes ** 3 - tie_sizes).sum()) / (big_n * (big_n - 1))
        var = n * m / 12.0 * ((big_n + 1) - tie_term)
        if var <= 0:
            p = 1.0
        else:
            z = max(abs(u_a - n * m / 2.0) - 0.5, 0.0) / math.sqrt(var)
            p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    else:
        raise InputError(f"unknown method {method!r}")
    return MannWhitneyResult(u_a, u_b, p, method)


def bonferroni(p_values, family_size: int | None = None):
    """Multiply by the family size and clamp at 1; scalar in, scalar out."""
    arr = np.asarray(p_values, dtype=np.float64)
    m = arr.size if family_size is None else family_size
    if m < 1:
        raise InputError("family size must be >= 1")
    out = np.minimum(1.0, arr * m)
    return float(out) if arr.ndim == 0 else out


def significance_marker(p: float) -> str:
    """Bands are closed on the significant side: p == 0.05 gives '*'."""
    if not 0.0 <= p <= 1.0:
        raise InputError(f"p-value {p} outside [0, 1]")
    for bound, marker in MARKER_BANDS:
        if p <= bound:
            return marker
    return "ns"


@dataclass(frozen=True)
class SignificanceCell:
    p_raw: float
    p_corrected: float
    marker: str

    @classmethod
    def from_p(cls, p_raw: float, family_size: int = 4) -> "SignificanceCell":
        corrected = bonferroni(p_raw, family_size)
        return cls(float(p_raw), corrected, significance_marker(corrected))
