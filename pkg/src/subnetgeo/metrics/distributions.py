"""Error distributions by cohort: ECDFs, quantile tables and two-sample comparison."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_QUANTILES = (0.10, 0.25, 0.50, 0.75, 0.90)

# claimed-accuracy bin edges in km; a value falls in the first bin whose edge it does not exceed
ACCURACY_BIN_EDGES_KM = (1, 5, 10, 20, 50, 100, 200, 500, 1000)


def quantile_sorted(xs: Sequence[float], q: float) -> float:
    """Linear interpolation between order statistics (type 7) on pre-sorted data."""
    n = len(xs)
    if n == 0:
        raise ValueError("quantile of empty sample")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    h = (n - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, n - 1)
    return float(xs[lo] + (h - lo) * (xs[hi] - xs[lo]))


@dataclass
class EcdfTable:
    """Sorted sample plus its step function; every report carries weight 1."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.sort(np.asarray(self.values, dtype=float))
        if len(self.values) == 0:
            raise ValueError("ECDF of empty sample")

    def __len__(self) -> int:
        return len(self.values)

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct values and the cumulative share at each; last share is exactly 1."""
        xs, counts = np.unique(self.values, return_counts=True)
        cum = np.cumsum(counts)
        shares = cum / cum[-1]
        return xs, shares

    def cdf(self, x) -> np.ndarray:
        return np.searchsorted(self.values, x, side="right") / len(self.values)

    def quantile(self, q: float) -> float:
        return quantile_sorted(self.values, q)

    @property
    def median(self) -> float:
        return self.quantile(0.5)


@dataclass
class CohortStats:
    n: int
    quantiles: dict[float, float]
    ecdf: EcdfTable


@dataclass
class QuantileReport:
    dims: tuple[str, ...]
    cohorts: dict[tuple, CohortStats] = field(default_factory=dict)
    omitted: Counter = field(default_factory=Counter)


def accuracy_bin(km: float | None) -> str:
    if km is None:
        return "none"
    for edge in ACCURACY_BIN_EDGES_KM:
        if km <= edge:
            return f"<={edge}km"
    return f">{ACCURACY_BIN_EDGES_KM[-1]}km"


def _tag_label(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return "yes" if v else "no"
    return str(v)


def cohort_labels(records: Sequence, dim: str) -> list[str]:
    """Value of grouping dimension ``dim`` for each ErrorRecord."""
    if dim == "provider":
        return [r.provider for r in records]
    if dim == "cluster_class":
        return [r.cluster.cluster_class.value for r in records]
    if dim == "travel":
        return ["travel" if r.cluster.cluster_class.value == "TRAVEL" else "non_travel" for r in records]
    if dim == "accuracy_bin":
        return [accuracy_bin(r.claimed_accuracy_km) for r in records]
    return [_tag_label(r.tags.get(dim)) for r in records]


def cohort_value(rec, dim: str) -> str:
    """Value of grouping dimension ``dim`` for one ErrorRecord."""
    return cohort_labels((rec,), dim)[0]


class CohortColumns:
    """Error values and integer-coded cohort labels for a fixed record list.

    Build once and pass to several ``ecdf_and_quantiles`` calls over the
    same records; label columns are computed on first use.
    """

    def __init__(self, records: Sequence, value: Callable | None = None):
        self.records = records
        getter = value or (lambda r: r.error_m)
        self.values = np.fromiter((getter(r) for r in records), dtype=float, count=len(records))
        self._codes: dict[str, tuple[np.ndarray, list[str]]] = {}

    def __len__(self) -> int:
        return len(self.records)

    def codes(self, dim: str) -> tuple[np.ndarray, list[str]]:
        if dim not in self._codes:
            index: dict[str, int] = {}
            labels = cohort_labels(self.records, dim)
            inv = np.fromiter((index.setdefault(v, len(index)) for v in labels), dtype=np.int64, count=len(labels))
            self._codes[dim] = (inv, list(index))
        return self._codes[dim]


def ecdf_and_quantiles(
    errors: Iterable | CohortColumns,
    group_by: Sequence[str] = ("provider",),
    quantiles: Sequence[float] = DEFAULT_QUANTILES,
    value: Callable | None = None,
    cohorts: Iterable[tuple] | None = None,
) -> QuantileReport:
    """Per-cohort ECDF and type-7 quantiles of ``value(record)`` (default: error_m).

    When ``cohorts`` is given, requested cohorts with no records are left
    out and counted in ``omitted``.
    """
    if isinstance(errors, CohortColumns):
        if value is not None:
            raise ValueError("value is fixed when the CohortColumns are built")
        cols = errors
    else:
        cols = CohortColumns(errors if isinstance(errors, Sequence) else list(errors), value)
    dims = tuple(group_by)
    n = len(cols)
    # one integer per record: mixed radix over the per-dim label codes
    code = np.zeros(n, dtype=np.int64)
    names: list[list[str]] = []
    for d in dims:
        inv, labels = cols.codes(d)
        names.append(labels)
        code = code * max(len(labels), 1) + inv
    order = np.argsort(code, kind="stable")
    code_s = code[order]
    starts = np.flatnonzero(np.r_[True, code_s[1:] != code_s[:-1]]) if n else np.array([], dtype=int)
    groups: dict[tuple, np.ndarray] = {}
    for a, b in zip(starts.tolist(), [*starts[1:].tolist(), n]):
        c = int(code_s[a])
        key = []
        for labels in reversed(names):
            c, r = divmod(c, max(len(labels), 1))
            key.append(labels[r])
        groups[tuple(reversed(key))] = cols.values[order[a:b]]
    report = QuantileReport(dims)
    wanted = sorted(groups) if cohorts is None else [tuple(c) for c in cohorts]
    for key in wanted:
        v = groups.get(key)
        if v is None or len(v) == 0:
            report.omitted["empty_cohort"] += 1
            continue
        table = EcdfTable(v)
        report.cohorts[key] = CohortStats(len(v), {q: table.quantile(q) for q in quantiles}, table)
    return report


@dataclass(frozen=True)
class Divergence:
    median_ratio: float  # median(a) / median(b) - 1
    ks: float


def cohort_compare(a: EcdfTable, b: EcdfTable) -> Divergence:
    """Relative median difference and Kolmogorov-Smirnov distance between two cohorts."""
    ma, mb = a.median, b.median
    if mb == 0:
        ratio = 0.0 if ma == 0 else math.inf
    else:
        ratio = ma / mb - 1
    grid = np.union1d(a.values, b.values)
    ks = float(np.max(np.abs(a.cdf(grid) - b.cdf(grid))))
    return Divergence(ratio, ks)
