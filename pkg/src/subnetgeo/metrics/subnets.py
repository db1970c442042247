"""Per-subnet geography: aggregation, physical scale, visit counts and movement."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..core import LocationCluster, SubnetKey
from ..geodesy import HullScale, LocalProjection, PlanePoint, hull_scale, medioid
from .stats import Correlation, pearson

DEFAULT_FRACTIONS = (0.5, 0.75, 0.9, 1.0)
PERSISTENCE_LADDER = (10, 20, 50)


@dataclass(frozen=True)
class ScaleConfig:
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    min_devices: int = 10
    min_addresses: int = 10
    error_cap_m: float = 100_000.0
    unique_points: bool = False


@dataclass
class SubnetAggregate:
    key: SubnetKey
    devices: int
    addresses: int
    xy: np.ndarray
    medioid: PlanePoint
    scales: dict[float, HullScale] = field(default_factory=dict)
    mean_error_m: float | None = None
    n_errors: int = 0
    visits: Counter = field(default_factory=Counter)  # visit count v -> number of (device, ip) pairs

    def passes(self, min_devices: int, min_addresses: int) -> bool:
        return self.devices >= min_devices and self.addresses >= min_addresses

    def scale(self, f: float) -> float | None:
        s = self.scales.get(f)
        return None if s is None else s.scale


def _safe_key(c: LocationCluster) -> SubnetKey | None:
    return c.subnet


def subnet_aggregate(
    clusters: Sequence[LocationCluster],
    cfg: ScaleConfig,
    projection: LocalProjection,
    errors: Iterable | None = None,
) -> dict[SubnetKey, SubnetAggregate]:
    """Summarise clusters per /24 (or /48) subnet.

    Every subnet gets counts, projected points and a medioid; hull scales
    are computed only for subnets meeting the device and address minimums.
    Mean error discards records above ``cfg.error_cap_m``.
    """
    groups: dict[SubnetKey, list[int]] = defaultdict(list)
    for i, c in enumerate(clusters):
        k = _safe_key(c)
        if k is not None:
            groups[k].append(i)
    mean_err = mean_error_by_subnet(errors or (), cfg.error_cap_m)

    if clusters:
        lat = np.fromiter((c.lat for c in clusters), dtype=float, count=len(clusters))
        lon = np.fromiter((c.lon for c in clusters), dtype=float, count=len(clusters))
        x_all, y_all = projection.forward(lat, lon)
    out: dict[SubnetKey, SubnetAggregate] = {}
    for k in sorted(groups):
        idx = groups[k]
        members = [clusters[i] for i in idx]
        devices = len({c.device_id for c in members})
        pairs = Counter((c.device_id, c.ip) for c in members if not c.truncated)
        addresses = len({ip for _, ip in pairs})
        xy = np.column_stack([x_all[idx], y_all[idx]])
        agg = SubnetAggregate(
            key=k,
            devices=devices,
            addresses=addresses,
            xy=xy,
            medioid=medioid(xy),
            visits=Counter(pairs.values()),
        )
        if k in mean_err:
            agg.mean_error_m, agg.n_errors = mean_err[k]
        if agg.passes(cfg.min_devices, cfg.min_addresses):
            for f in cfg.fractions:
                agg.scales[f] = hull_scale(xy, f, unique=cfg.unique_points)
        out[k] = agg
    return out


def mean_error_by_subnet(errors: Iterable, cap_m: float) -> dict[SubnetKey, tuple[float, int]]:
    """(mean error, count) per subnet; records above ``cap_m`` are discarded, not clipped."""
    sums: dict[SubnetKey, list[float]] = defaultdict(list)
    for rec in errors:
        if rec.error_m > cap_m:
            continue
        k = _safe_key(rec.cluster)
        if k is not None:
            sums[k].append(rec.error_m)
    return {k: (math.fsum(v) / len(v), len(v)) for k, v in sums.items()}


def with_mean_errors(
    aggs: Mapping[SubnetKey, SubnetAggregate], mean_errors: Mapping[SubnetKey, tuple[float, int]]
) -> dict[SubnetKey, SubnetAggregate]:
    """Copies of ``aggs`` carrying another provider's mean errors."""
    out = {}
    for k, a in aggs.items():
        m, n = mean_errors.get(k, (None, 0))
        out[k] = replace(a, mean_error_m=m, n_errors=n)
    return out


def scale_error_correlation(
    aggs: Mapping[SubnetKey, SubnetAggregate] | Iterable[SubnetAggregate], f: float = 0.75
) -> Correlation:
    """Pearson r between hull scale at ``f`` and mean geolocation error across subnets."""
    items = aggs.values() if isinstance(aggs, Mapping) else aggs
    xs, ys = [], []
    for a in sorted(items, key=lambda a: a.key):
        s = a.scale(f)
        if s is None or a.mean_error_m is None:
            continue
        xs.append(s)
        ys.append(a.mean_error_m)
    if len(xs) < 3:
        return Correlation(math.nan, math.nan, len(xs))
    return pearson(xs, ys)


@dataclass
class VisitHistogram:
    pair_counts: Counter  # v -> number of (device, ip) pairs with v visits

    @property
    def total_visits(self) -> int:
        return sum(v * n for v, n in self.pair_counts.items())

    def weighted(self) -> dict[int, float]:
        """Share of visits falling on pairs with exactly v visits."""
        tot = self.total_visits
        return {v: v * n / tot for v, n in sorted(self.pair_counts.items())} if tot else {}

    def unweighted(self) -> dict[int, float]:
        tot = sum(self.pair_counts.values())
        return {v: n / tot for v, n in sorted(self.pair_counts.items())} if tot else {}


def visit_histogram(clusters: Iterable[LocationCluster], subnet_filter=None) -> VisitHistogram:
    """Visit counts per (device, address) pair; truncated records are skipped.

    ``subnet_filter`` is a predicate on SubnetKey or a collection of keys.
    """
    if subnet_filter is not None and not callable(subnet_filter):
        allowed = set(subnet_filter)
        subnet_filter = allowed.__contains__
    pairs: Counter = Counter()
    for c in clusters:
        if c.truncated:
            continue
        if subnet_filter is not None:
            k = _safe_key(c)
            if k is None or not subnet_filter(k):
                continue
        pairs[(c.device_id, c.ip)] += 1
    return VisitHistogram(Counter(pairs.values()))


def merge_visits(aggs: Iterable[SubnetAggregate]) -> VisitHistogram:
    total: Counter = Counter()
    for a in aggs:
        total.update(a.visits)
    return VisitHistogram(total)


@dataclass
class PersistenceRow:
    threshold: int
    n_first: int
    n_second: int
    forward: float | None  # share of first-period passers that pass the relaxed cut later
    backward: float | None


@dataclass
class MovementReport:
    displacements: dict[SubnetKey, float]
    persistence: list[PersistenceRow]

    def median(self) -> float | None:
        if not self.displacements:
            return None
        return float(np.median(list(self.displacements.values())))


def _persistence(src, dst, threshold, base_devices, base_addresses) -> tuple[int, float | None]:
    passing = [k for k, a in src.items() if a.passes(threshold, threshold)]
    if threshold == base_devices:
        relaxed = (base_devices, base_addresses)
    else:
        relaxed = (base_devices, 0)
    kept = sum(1 for k in passing if k in dst and dst[k].passes(*relaxed))
    return len(passing), (kept / len(passing) if passing else None)


def subnet_movement(
    aggs1: Mapping[SubnetKey, SubnetAggregate],
    aggs2: Mapping[SubnetKey, SubnetAggregate],
    min_devices: int = 10,
    min_addresses: int = 10,
    ladder: Sequence[int] = PERSISTENCE_LADDER,
) -> MovementReport:
    """Medioid displacement between two periods, plus persistence rates.

    Displacements cover subnets that pass the base cuts in both periods.
    For each ladder threshold T, persistence is the share of subnets passing
    T devices and T addresses in one period that, in the other period, pass
    the base cut (for T at the base) or have at least the base device count.
    """
    disp = {}
    for k in sorted(set(aggs1) & set(aggs2)):
        a, b = aggs1[k], aggs2[k]
        if a.passes(min_devices, min_addresses) and b.passes(min_devices, min_addresses):
            disp[k] = math.hypot(a.medioid.x - b.medioid.x, a.medioid.y - b.medioid.y)
    rows = []
    for t in ladder:
        n1, fwd = _persistence(aggs1, aggs2, t, min_devices, min_addresses)
        n2, bwd = _persistence(aggs2, aggs1, t, min_devices, min_addresses)
        rows.append(PersistenceRow(t, n1, n2, fwd, bwd))
    return MovementReport(disp, rows)
