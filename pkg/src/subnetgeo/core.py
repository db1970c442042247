"""Location-report data model, input parsing and per-row filtering."""

from __future__ import annotations

import bisect
import csv
import enum
import functools
import ipaddress
import math
import operator
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Iterable, Iterator, Sequence

import numpy as np

from .geodesy import GeoPoint, haversine_m, vincenty_array, vincenty_distance

CLUSTER_COLUMNS = (
    "device_id",
    "t_start",
    "t_end",
    "lat",
    "lon",
    "accuracy_m",
    "cluster_class",
    "ip",
    "bump_count",
)

DAY_S = 86400
NIGHT_END_S = 6 * 3600
FORTY_MILES_M = 64373.76

REJECTION_REASONS = (
    "malformed",
    "accuracy",
    "precision",
    "special_use",
    "foreign_registry",
    "out_of_region",
)


class ConfigError(Exception):
    """Fatal configuration problem (exit code 2)."""


class DataError(Exception):
    """Fatal problem with input data (exit code 3)."""


class SpecialUseError(ValueError):
    def __init__(self, ip, kind: str):
        super().__init__(f"{ip} is special-use ({kind})")
        self.ip = ip
        self.kind = kind


class ClusterClass(str, enum.Enum):
    TRAVEL = "TRAVEL"
    LONG_AREA_DWELL = "LONG_AREA_DWELL"
    AREA_DWELL = "AREA_DWELL"
    SHORT_AREA_DWELL = "SHORT_AREA_DWELL"
    POTENTIAL_AREA_DWELL = "POTENTIAL_AREA_DWELL"
    PING = "PING"
    LARGE_VARIANCE = "LARGE_VARIANCE"
    MOVING = "MOVING"
    SPLIT = "SPLIT"


_CLASS_LOOKUP = {c.value: c for c in ClusterClass}
_CLASS_LOOKUP.update({c.value.replace("_", " "): c for c in ClusterClass})


@dataclass(slots=True)
class LocationCluster:
    """One GPS cluster. Treated as immutable; not frozen because that triples construction cost."""

    device_id: str
    t_start: datetime
    t_end: datetime
    lat: float
    lon: float
    accuracy_m: float
    coord_decimals: int
    cluster_class: ClusterClass
    ip: ipaddress.IPv4Address | ipaddress.IPv6Address
    bump_count: int = 1
    truncated: bool = False
    subnet: "SubnetKey | None" = field(init=False, repr=False, compare=False)  # None for special-use

    def __post_init__(self):
        ip = self.ip
        if ip.version == 4:
            net = int(ip) >> 8
            try:
                self.subnet = _V4_KEYS[net]
            except KeyError:
                self.subnet = _V4_KEYS[net] = None if special_v4_kind(net << 8) else SubnetKey(4, net << 8)
        else:
            self.subnet = None if _special_v6_kind(ip) else SubnetKey(6, int(ip) & ~((1 << 80) - 1))

    @property
    def point(self) -> GeoPoint:
        return GeoPoint(self.lat, self.lon)


def _haversine_scalar(lat1: float, lon1: float, lat2: float, lon2: float, radius: float = 6371008.8) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    h = math.sin((p2 - p1) / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(math.radians(lon2 - lon1) / 2) ** 2
    return 2 * radius * math.asin(math.sqrt(min(h, 1.0)))


@dataclass(frozen=True)
class CityRegion:
    name: str
    center_lat: float
    center_lon: float
    radius_m: float = FORTY_MILES_M

    @property
    def center(self) -> GeoPoint:
        return GeoPoint(self.center_lat, self.center_lon)

    def contains(self, lat: float, lon: float) -> bool:
        # spherical distance is within 0.5% of the ellipsoid; only the margin needs Vincenty
        h = _haversine_scalar(self.center_lat, self.center_lon, lat, lon)
        if h < self.radius_m * 0.994:
            return True
        if h > self.radius_m * 1.006:
            return False
        return vincenty_distance(self.center, GeoPoint(lat, lon)) <= self.radius_m

    def contains_many(self, lat, lon) -> np.ndarray:
        """Vectorised ``contains`` over coordinate arrays."""
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        h = haversine_m(self.center_lat, self.center_lon, lat, lon)
        inside = h < self.radius_m * 0.994
        band = np.flatnonzero(~inside & (h <= self.radius_m * 1.006))
        if band.size:
            d = vincenty_array(
                np.full(band.size, self.center_lat), np.full(band.size, self.center_lon), lat[band], lon[band]
            )
            inside[band] = d <= self.radius_m
        return inside


@dataclass(frozen=True)
class FilterPolicy:
    max_accuracy_m: float = 50.0
    min_coord_decimals: int = 5
    exclude_special_use: bool = True
    exclude_foreign_registry: bool = True
    regions: tuple[CityRegion, ...] = ()


@dataclass(frozen=True, slots=True, order=True)
class SubnetKey:
    version: int
    network: int  # integer value of the prefix base address, host bits zeroed

    @property
    def prefix_len(self) -> int:
        return 24 if self.version == 4 else 48

    def to_network(self) -> ipaddress.IPv4Network | ipaddress.IPv6Network:
        cls = ipaddress.IPv4Network if self.version == 4 else ipaddress.IPv6Network
        return cls((self.network, self.prefix_len))

    def __str__(self) -> str:
        return str(self.to_network())


# IPv4 special-purpose ranges, disjoint and sorted; anything else is public
_V4_SPECIAL = sorted(
    (int(n.network_address), int(n.broadcast_address), kind)
    for n, kind in (
        (ipaddress.IPv4Network(cidr), kind)
        for cidr, kind in (
            ("0.0.0.0/8", "reserved"),
            ("10.0.0.0/8", "private"),
            ("100.64.0.0/10", "shared_cgnat"),
            ("127.0.0.0/8", "loopback"),
            ("169.254.0.0/16", "link_local"),
            ("172.16.0.0/12", "private"),
            ("192.0.0.0/24", "reserved"),
            ("192.0.2.0/24", "reserved"),
            ("192.168.0.0/16", "private"),
            ("198.18.0.0/15", "reserved"),
            ("198.51.100.0/24", "reserved"),
            ("203.0.113.0/24", "reserved"),
            ("224.0.0.0/4", "multicast"),
            ("240.0.0.0/4", "reserved"),
        )
    )
)
_V4_STARTS = [lo for lo, _, _ in _V4_SPECIAL]
# /24 -> SubnetKey, or None when special-use; every special range is /24-aligned or wider
# except 0.0.0.0, whose /24 is reserved anyway
_V4_KEYS: dict[int, "SubnetKey | None"] = {}


def special_v4_kind(n: int) -> str | None:
    if n == 0:
        return "unspecified"
    i = bisect.bisect_right(_V4_STARTS, n) - 1
    if i >= 0 and n <= _V4_SPECIAL[i][1]:
        return _V4_SPECIAL[i][2]
    return None


_V6_DOC = ipaddress.IPv6Network("2001:db8::/32")


@functools.lru_cache(maxsize=65536)
def _special_v6_kind(ip: ipaddress.IPv6Address) -> str | None:
    if ip in _V6_DOC:
        return None  # documentation prefix: keyed like public space so IPv6 fixtures work
    if ip.ipv4_mapped is not None:
        return special_v4_kind(int(ip.ipv4_mapped))
    if ip.is_unspecified:
        return "unspecified"
    if ip.is_loopback:
        return "loopback"
    if ip.is_link_local:
        return "link_local"
    if ip.is_multicast:
        return "multicast"
    if ip.is_global:
        return None
    if ip.is_private:
        return "private"
    return "reserved"


def special_use_kind(ip) -> str | None:
    """Name of the special-purpose range ``ip`` falls in, or None for public addresses."""
    if ip.version == 4:
        return special_v4_kind(int(ip))
    return _special_v6_kind(ip)


def subnet_key(ip) -> SubnetKey:
    """Canonical /24 (IPv4) or /48 (IPv6) containing ``ip``."""
    if isinstance(ip, SubnetKey):
        return ip
    if isinstance(ip, str):
        ip = ipaddress.ip_address(ip)
    kind = special_use_kind(ip)
    if kind is not None:
        raise SpecialUseError(ip, kind)
    if ip.version == 4:
        net = int(ip) >> 8
        return _V4_KEYS.setdefault(net, SubnetKey(4, net << 8))
    return SubnetKey(6, int(ip) & ~((1 << 80) - 1))


@functools.lru_cache(maxsize=1 << 20)
def parse_ip_field(text: str) -> tuple[ipaddress.IPv4Address | ipaddress.IPv6Address, bool]:
    """Parse an address; ``a.b.c`` or ``a.b.c.0/24`` marks a /24-truncated record."""
    text = text.strip()
    if "/" in text:
        net = ipaddress.ip_network(text, strict=True)
        if net.version != 4 or net.prefixlen != 24:
            raise ValueError(f"only /24 truncation is supported: {text}")
        return net.network_address, True
    if text.count(".") == 2 and ":" not in text:
        return ipaddress.IPv4Address(text + ".0"), True
    return ipaddress.ip_address(text), False


def count_decimals(text: str) -> int:
    text = text.strip()
    if "e" in text or "E" in text:
        return 0
    dot = text.find(".")
    return 0 if dot < 0 else len(text) - dot - 1


def parse_timestamp(text: str) -> datetime:
    if len(text) == 20 and text[-1] == "Z":
        return datetime.fromisoformat(text[:-1] + "+00:00")
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


@dataclass
class RejectionTally:
    """Row accounting. Merges with ``+`` (associative and commutative)."""

    total: int = 0
    accepted: int = 0
    rejected: Counter = field(default_factory=Counter)
    detail: Counter = field(default_factory=Counter)

    def __add__(self, other: "RejectionTally") -> "RejectionTally":
        return RejectionTally(
            self.total + other.total,
            self.accepted + other.accepted,
            self.rejected + other.rejected,
            self.detail + other.detail,
        )

    def reject(self, reason: str, detail: str | None = None) -> None:
        self.rejected[reason] += 1
        if detail:
            self.detail[f"{reason}:{detail}"] += 1

    @property
    def balanced(self) -> bool:
        return self.accepted + sum(self.rejected.values()) == self.total

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "accepted": self.accepted,
            "rejected": {r: self.rejected.get(r, 0) for r in REJECTION_REASONS},
            "detail": dict(sorted(self.detail.items())),
            "balanced": self.balanced,
        }


def _row_to_cluster(row: Sequence[str]) -> LocationCluster:
    """Build a cluster from fields in CLUSTER_COLUMNS order."""
    device_id, t_start, t_end, lat_s, lon_s, acc_s, cls_s, ip_s, bumps_s = row
    lat, lon = float(lat_s), float(lon_s)
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):  # also rejects NaN
        raise ValueError("coordinates out of range")
    t0, t1 = parse_timestamp(t_start), parse_timestamp(t_end)
    if t1 < t0:
        raise ValueError("t_end precedes t_start")
    acc = float(acc_s)
    if not acc >= 0:
        raise ValueError("negative accuracy")
    bumps = int(bumps_s)
    if bumps < 1:
        raise ValueError("bump_count < 1")
    cls = _CLASS_LOOKUP[cls_s.strip().upper()]
    ip, truncated = parse_ip_field(ip_s)
    return LocationCluster(
        device_id, t0, t1, lat, lon, acc,
        min(count_decimals(lat_s), count_decimals(lon_s)), cls, ip, bumps, truncated,
    )


def filter_cluster(c: LocationCluster, policy: FilterPolicy, nic_lookup=None) -> tuple[str, str | None] | None:
    """Rejection (reason, detail) for ``c`` under ``policy``, or None if it passes.

    ``nic_lookup`` maps an address to its registry name (e.g. "ARIN", "RIPE"),
    returning None when unknown; unknown addresses are treated as domestic.
    """
    if c.accuracy_m > policy.max_accuracy_m:
        return "accuracy", None
    if c.coord_decimals < policy.min_coord_decimals:
        return "precision", None
    if policy.exclude_special_use:
        kind = special_use_kind(c.ip)
        if kind is not None:
            return "special_use", kind
    if policy.exclude_foreign_registry and nic_lookup is not None:
        nic = nic_lookup(c.ip)
        if nic is not None and nic.upper() != "ARIN":
            return "foreign_registry", nic.upper()
    if policy.regions and not any(r.contains(c.lat, c.lon) for r in policy.regions):
        return "out_of_region", None
    return None


def parse_rows(
    rows: Iterable[Sequence[str]], policy: FilterPolicy, nic_lookup=None
) -> tuple[list[LocationCluster], RejectionTally]:
    """Parse and filter rows given in CLUSTER_COLUMNS order.

    Verdicts match ``filter_cluster`` applied row by row.
    """
    tally = RejectionTally()
    candidates: list[LocationCluster] = []
    local = replace(policy, regions=())  # region cut is applied in bulk below
    for row in rows:
        tally.total += 1
        try:
            c = _row_to_cluster(row)
        except (ValueError, KeyError, TypeError, AttributeError, IndexError):
            tally.reject("malformed")
            continue
        verdict = filter_cluster(c, local, nic_lookup)
        if verdict is None:
            candidates.append(c)
        else:
            tally.reject(*verdict)
    if not policy.regions or not candidates:
        tally.accepted += len(candidates)
        return candidates, tally
    lat = np.fromiter((c.lat for c in candidates), dtype=float, count=len(candidates))
    lon = np.fromiter((c.lon for c in candidates), dtype=float, count=len(candidates))
    inside = np.zeros(len(candidates), dtype=bool)
    for r in policy.regions:
        inside |= r.contains_many(lat, lon)
    kept = [c for c, ok in zip(candidates, inside.tolist()) if ok]
    tally.accepted += len(kept)
    tally.rejected["out_of_region"] += len(candidates) - len(kept)
    return kept, tally


def read_cluster_rows(stream) -> Iterator[list[str]]:
    """Rows of a cluster file as field lists in CLUSTER_COLUMNS order.

    The header is checked first; extra columns are ignored and short rows
    yield lists with missing fields, which parse as malformed.
    """
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        raise ConfigError("cluster file has no header row")
    names = [h.strip() for h in header]
    missing = [c for c in CLUSTER_COLUMNS if c not in names]
    if missing:
        raise ConfigError(f"cluster file header lacks columns: {', '.join(missing)}")
    pos = [names.index(c) for c in CLUSTER_COLUMNS]
    width = max(pos) + 1
    if pos == list(range(len(CLUSTER_COLUMNS))) and len(names) == width:
        # canonical layout: rows already have the right order and length
        yield from (row for row in reader if row)
        return
    pick = operator.itemgetter(*pos)
    for row in reader:
        if not row:
            continue  # blank line
        if len(row) < width:
            yield row[:0]  # too short: malformed
        else:
            yield list(pick(row))


def parse_clusters(stream, policy: FilterPolicy, nic_lookup=None) -> tuple[list[LocationCluster], RejectionTally]:
    """Parse and filter a delimited cluster stream.

    Malformed rows are tallied, not fatal; a missing or incomplete header
    raises ConfigError.
    """
    return parse_rows(read_cluster_rows(stream), policy, nic_lookup)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def cluster_to_row(c: LocationCluster, decimals: int = 6) -> list[str]:
    if c.truncated:
        ip_text = str(c.ip).rsplit(".", 1)[0]
    else:
        ip_text = str(c.ip)
    return [
        c.device_id,
        format_timestamp(c.t_start),
        format_timestamp(c.t_end),
        f"{c.lat:.{decimals}f}",
        f"{c.lon:.{decimals}f}",
        f"{c.accuracy_m:g}",
        c.cluster_class.value,
        ip_text,
        str(c.bump_count),
    ]


# -- night-time flag -------------------------------------------------------


def _local_seconds(ts: datetime, utc_offset_hours: float) -> float:
    return ts.timestamp() + utc_offset_hours * 3600.0


def night_range(t_start: datetime, t_end: datetime, utc_offset_hours: float = 0.0) -> range:
    """Local day numbers (days since 1970-01-01) whose 00:00-06:00 window the span touches.

    A night is labelled by the date of its 00:00 boundary. The window is
    half-open: a span starting exactly at 06:00 does not touch that night.
    """
    ls = _local_seconds(t_start, utc_offset_hours)
    le = _local_seconds(t_end, utc_offset_hours)
    first = math.floor((ls - NIGHT_END_S) / DAY_S) + 1
    last = math.floor(le / DAY_S)
    return range(first, last + 1)


def night_flag(c: LocationCluster, utc_offset_hours: float = 0.0) -> bool:
    """True iff the cluster's local time span intersects 00:00-06:00 of any day."""
    return len(night_range(c.t_start, c.t_end, utc_offset_hours)) > 0


def night_bounds(clusters: Sequence[LocationCluster], utc_offset_hours: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``night_range``: first and last night per cluster (empty when last < first)."""
    n = len(clusters)
    off = utc_offset_hours * 3600.0
    ls = np.fromiter((c.t_start.timestamp() for c in clusters), dtype=float, count=n) + off
    le = np.fromiter((c.t_end.timestamp() for c in clusters), dtype=float, count=n) + off
    first = np.floor((ls - NIGHT_END_S) / DAY_S).astype(np.int64) + 1
    last = np.floor(le / DAY_S).astype(np.int64)
    return first, last


def night_flags(clusters: Sequence[LocationCluster], utc_offset_hours: float = 0.0) -> np.ndarray:
    """Vectorised ``night_flag`` over many clusters."""
    first, last = night_bounds(clusters, utc_offset_hours)
    return last >= first


# -- class tabulation ------------------------------------------------------


@dataclass
class ClassTable:
    clusters: Counter = field(default_factory=Counter)
    bumps: Counter = field(default_factory=Counter)

    def __add__(self, other: "ClassTable") -> "ClassTable":
        return ClassTable(self.clusters + other.clusters, self.bumps + other.bumps)

    def shares(self) -> dict[ClusterClass, tuple[float, float]]:
        """class -> (share of bumps, share of clusters), in declaration order."""
        nb = sum(self.bumps.values())
        nc = sum(self.clusters.values())
        out = {}
        for cls in ClusterClass:
            if self.clusters.get(cls, 0) == 0:
                continue
            out[cls] = (self.bumps[cls] / nb if nb else 0.0, self.clusters[cls] / nc if nc else 0.0)
        return out


def tabulate_classes(clusters: Iterable[LocationCluster]) -> ClassTable:
    table = ClassTable()
    for c in clusters:
        table.clusters[c.cluster_class] += 1
        table.bumps[c.cluster_class] += c.bump_count
    return table


def chunked(seq: Sequence, n: int) -> list[Sequence]:
    """Split ``seq`` into ``n`` contiguous, order-preserving parts."""
    n = max(1, n)
    size = math.ceil(len(seq) / n) if seq else 0
    return [seq[i : i + size] for i in range(0, len(seq), size)] if size else [seq]
