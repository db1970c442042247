"""Address churn: how often a device is back on the same IP d nights later."""

from __future__ import annotations

import functools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ..core import LocationCluster, chunked, night_bounds


@dataclass
class ChurnCurve:
    isp: str
    pairs: np.ndarray  # pairs[d] = night-cluster pairs d nights apart
    same: np.ndarray  # same[d] = those pairs on an identical address

    @property
    def d_max(self) -> int:
        return len(self.pairs) - 1

    @property
    def share(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.pairs > 0, self.same / np.maximum(self.pairs, 1), np.nan)

    def __add__(self, other: "ChurnCurve") -> "ChurnCurve":
        return ChurnCurve(self.isp, self.pairs + other.pairs, self.same + other.same)


@functools.lru_cache(maxsize=64)
def _lag_index(span: int) -> np.ndarray:
    """Flattened b - a + span - 1 for a span x span matrix, for summing diagonals by lag."""
    r = np.arange(span)
    return (r[None, :] - r[:, None] + span - 1).ravel()


def _group_counts(nights: np.ndarray, ips: np.ndarray, d_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Pair counts for one (device, ISP) group.

    ``nights`` and ``ips`` list one night-incidence each (address codes are
    arbitrary integers). Lag 0 pairs each incidence with itself, so share(0) = 1.
    """
    width = d_max + 1
    pairs = np.zeros(width, dtype=np.int64)
    same = np.zeros(width, dtype=np.int64)
    pairs[0] = same[0] = len(nights)
    lo = int(nights.min())
    span = int(nights.max()) - lo + 1
    top = min(d_max, span - 1)
    if top < 1:
        return pairs, same
    rel = nights - lo
    total = np.bincount(rel, minlength=span)
    pairs[1 : top + 1] = np.correlate(total, total, mode="full")[span : span + top]
    codes, inv = np.unique(ips, return_inverse=True)
    if len(codes) == 1:
        same[1 : top + 1] = pairs[1 : top + 1]
        return pairs, same
    m = np.zeros((len(codes), span), dtype=np.int64)
    np.add.at(m, (inv, rel), 1)
    # co[a, b] = incidences on one address at nights a and b; lag d sums the d-th diagonal
    co = m.T @ m
    by_lag = np.bincount(_lag_index(span), weights=co.ravel(), minlength=2 * span - 1)
    same[1 : top + 1] = np.rint(by_lag[span : span + top]).astype(np.int64)
    return pairs, same


def _process(groups, d_max: int) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    acc: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for isp, nights, ips in groups:
        p, s = _group_counts(nights, ips, d_max)
        if isp in acc:
            acc[isp][0][:] += p
            acc[isp][1][:] += s
        else:
            acc[isp] = (p, s)
    return acc


def churn_curve(
    records: Iterable[tuple[LocationCluster, str]],
    d_max: int = 60,
    utc_offset_hours: float = 0.0,
    threads: int = 1,
) -> dict[str, ChurnCurve]:
    """Per-ISP returning share at lags 0..d_max.

    ``records`` pairs each cluster with its ISP label. Only night-time,
    address-level clusters count; a cluster spanning several nights counts
    once for each night it touches. Devices on several ISPs contribute
    separate pair sets to each.
    """
    recs = [(c, isp) for c, isp in records if not c.truncated]
    if not recs:
        return {}
    first, last = night_bounds([c for c, _ in recs], utc_offset_hours)
    group_ids: dict[tuple[str, str], int] = {}
    g = np.fromiter((group_ids.setdefault((isp, c.device_id), len(group_ids)) for c, isp in recs),
                    dtype=np.int64, count=len(recs))
    ip_ids: dict = {}
    ip = np.fromiter((ip_ids.setdefault(int(c.ip) if c.ip.version == 4 else c.ip, len(ip_ids)) for c, _ in recs),
                     dtype=np.int64, count=len(recs))
    # one row per (cluster, night touched)
    reps = np.maximum(last - first + 1, 0)
    n_inc = int(reps.sum())
    offsets = np.arange(n_inc) - np.repeat(np.cumsum(reps) - reps, reps)
    g_e, ip_e = np.repeat(g, reps), np.repeat(ip, reps)
    night_e = np.repeat(first, reps) + offsets
    order = np.argsort(g_e, kind="stable")
    g_e, ip_e, night_e = g_e[order], ip_e[order], night_e[order]
    bounds = np.flatnonzero(np.r_[True, g_e[1:] != g_e[:-1], True]) if n_inc else np.array([0])
    keys = list(group_ids)
    spans = sorted((keys[int(g_e[a])], a, b) for a, b in zip(bounds[:-1].tolist(), bounds[1:].tolist()))
    items = [(key[0], night_e[a:b], ip_e[a:b]) for key, a, b in spans]
    parts = chunked(items, threads)
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(threads) as ex:
            partials = list(ex.map(lambda part: _process(part, d_max), parts))
    else:
        partials = [_process(part, d_max) for part in parts]
    # integer counters: merge order cannot change the result
    out: dict[str, ChurnCurve] = {}
    for part in partials:
        for isp, (p, s) in part.items():
            curve = ChurnCurve(isp, p, s)
            out[isp] = out[isp] + curve if isp in out else curve
    return dict(sorted(out.items()))
