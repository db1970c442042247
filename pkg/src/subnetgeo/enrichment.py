"""Join location reports to geolocation-database predictions and registry organisations."""

from __future__ import annotations

import csv
import fnmatch
import ipaddress
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from typing import Any, Generic, Iterable, Sequence, TypeVar

import numpy as np

from .core import ConfigError, DataError, LocationCluster, SubnetKey, subnet_key
from .geodesy import GeoPoint, vincenty_array

T = TypeVar("T")

TOO_CLOSE_M = 25.0
MODALITIES = ("fixed", "mobile")
CATEGORIES = ("consumer_isp", "university", "fortune100", "other")


class PrefixConflictError(DataError):
    def __init__(self, offenders: list[str]):
        super().__init__("conflicting duplicate prefixes: " + ", ".join(offenders))
        self.offenders = offenders


class RegistryCycleError(DataError):
    def __init__(self, handles: list[str]):
        super().__init__("cycle in registry parent chain: " + " -> ".join(handles))
        self.handles = handles


class PrefixTable(Generic[T]):
    """Longest-prefix-match table over IPv4 and IPv6 networks.

    One hash map per (version, prefix length); lookups probe lengths from
    longest to shortest. Immutable after construction.
    """

    def __init__(self, entries: Iterable[tuple[Any, T]]):
        tables: dict[tuple[int, int], dict[int, T]] = {}
        conflicts: list[str] = []
        for net, value in entries:
            if not isinstance(net, (ipaddress.IPv4Network, ipaddress.IPv6Network)):
                net = ipaddress.ip_network(net, strict=True)
            key = (net.version, net.prefixlen)
            shift = net.max_prefixlen - net.prefixlen
            t = tables.setdefault(key, {})
            base = int(net.network_address) >> shift
            if base in t and t[base] != value:
                conflicts.append(str(net))
                continue
            t[base] = value
        if conflicts:
            raise PrefixConflictError(sorted(set(conflicts)))
        self._tables = tables
        self._lengths = {
            v: sorted((pl for (ver, pl) in tables if ver == v), reverse=True) for v in (4, 6)
        }
        self._v4_arrays = None

    def __len__(self) -> int:
        return sum(len(t) for t in self._tables.values())

    def items(self):
        for (ver, pl), t in sorted(self._tables.items()):
            cls = ipaddress.IPv4Network if ver == 4 else ipaddress.IPv6Network
            bits = 32 if ver == 4 else 128
            for base, value in sorted(t.items(), key=lambda kv: kv[0]):
                yield cls((base << (bits - pl), pl)), value

    def lookup_with_prefix(self, ip) -> tuple[Any, T] | None:
        if isinstance(ip, str):
            ip = ipaddress.ip_address(ip)
        v = ip.version
        bits = 32 if v == 4 else 128
        n = int(ip)
        for pl in self._lengths[v]:
            base = n >> (bits - pl)
            hit = self._tables[(v, pl)].get(base)
            if hit is not None:
                cls = ipaddress.IPv4Network if v == 4 else ipaddress.IPv6Network
                return cls((base << (bits - pl), pl)), hit
        return None

    def lookup(self, ip) -> T | None:
        hit = self.lookup_with_prefix(ip)
        return None if hit is None else hit[1]

    def lookup_v4_indices(self, addrs: np.ndarray) -> tuple[np.ndarray, list[T]]:
        """Batch IPv4 lookup. Returns (index per address into ``values``, values); -1 on miss."""
        if self._v4_arrays is None:
            values: list[T] = []
            layers = []
            for pl in self._lengths[4]:
                t = self._tables[(4, pl)]
                keys = np.fromiter(t.keys(), dtype=np.uint64, count=len(t))
                idx = np.arange(len(values), len(values) + len(t), dtype=np.int64)
                values.extend(t.values())
                order = np.argsort(keys, kind="stable")
                layers.append((pl, keys[order], idx[order]))
            self._v4_arrays = (layers, values)
        layers, values = self._v4_arrays
        addrs = np.asarray(addrs, dtype=np.uint64)
        out = np.full(len(addrs), -1, dtype=np.int64)
        for pl, keys, idx in layers:
            todo = np.nonzero(out < 0)[0]
            if len(todo) == 0 or len(keys) == 0:
                break
            probe = addrs[todo] >> np.uint64(32 - pl)
            pos = np.searchsorted(keys, probe)
            pos_c = np.minimum(pos, len(keys) - 1)
            found = keys[pos_c] == probe
            out[todo[found]] = idx[pos_c[found]]
        return out, values


def build_prefix_table(entries: Iterable[tuple[Any, T]]) -> PrefixTable[T]:
    return PrefixTable(entries)


# -- geolocation database snapshots ----------------------------------------


@dataclass(frozen=True, slots=True)
class GeoDbEntry:
    point: GeoPoint
    claimed_accuracy_km: float | None = None


@dataclass
class GeoDbSnapshot:
    provider: str
    table: PrefixTable[GeoDbEntry]
    valid_from: date | None = None
    valid_to: date | None = None

    def covers(self, day: date) -> bool:
        if self.valid_from is not None and day < self.valid_from:
            return False
        if self.valid_to is not None and day > self.valid_to:
            return False
        return True


def read_geodb_csv(stream) -> list[tuple[str, GeoDbEntry]]:
    reader = csv.DictReader(stream)
    need = {"network", "latitude", "longitude"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise ConfigError(f"geodb file header must contain {sorted(need)}")
    rows = []
    for i, row in enumerate(reader, 2):
        try:
            acc = (row.get("accuracy_km") or "").strip()
            rows.append(
                (
                    row["network"].strip(),
                    GeoDbEntry(
                        GeoPoint(float(row["latitude"]), float(row["longitude"])),
                        float(acc) if acc else None,
                    ),
                )
            )
        except ValueError as exc:
            raise DataError(f"geodb line {i}: {exc}") from None
    return rows


def load_geodb(path, provider: str, valid_from: date | None = None, valid_to: date | None = None) -> GeoDbSnapshot:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = read_geodb_csv(fh)
    try:
        table = PrefixTable((ipaddress.ip_network(n, strict=True), e) for n, e in rows)
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: {exc}") from None
    return GeoDbSnapshot(provider, table, valid_from, valid_to)


# -- registry ----------------------------------------------------------------


@dataclass(frozen=True)
class RegistryRecord:
    cidr: ipaddress.IPv4Network | ipaddress.IPv6Network
    net_handle: str
    org_name: str
    parent_handle: str | None = None


UNKNOWN_RECORD = RegistryRecord(ipaddress.ip_network("0.0.0.0/0"), "UNKNOWN", "unknown", None)


class Registry:
    """Offline registry dump indexed by CIDR and by net handle."""

    def __init__(self, records: Iterable[RegistryRecord]):
        self.records = list(records)
        self.by_handle: dict[str, RegistryRecord] = {}
        for r in self.records:
            if r.net_handle in self.by_handle and self.by_handle[r.net_handle] != r:
                raise DataError(f"duplicate net handle {r.net_handle}")
            self.by_handle[r.net_handle] = r
        self.table: PrefixTable[RegistryRecord] = PrefixTable((r.cidr, r) for r in self.records)

    @classmethod
    def from_csv(cls, stream) -> "Registry":
        reader = csv.DictReader(stream)
        need = {"cidr", "net_handle", "parent_handle", "org_name"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ConfigError(f"registry header must contain {sorted(need)}")
        recs = []
        for i, row in enumerate(reader, 2):
            try:
                net = ipaddress.ip_network(row["cidr"].strip(), strict=True)
            except ValueError as exc:
                raise DataError(f"registry line {i}: {exc}") from None
            recs.append(
                RegistryRecord(net, row["net_handle"].strip(), row["org_name"].strip(), (row["parent_handle"] or "").strip() or None)
            )
        return cls(recs)

    @classmethod
    def load(cls, path) -> "Registry":
        with open(path, newline="", encoding="utf-8") as fh:
            return cls.from_csv(fh)

    def resolve(self, subnet: SubnetKey) -> RegistryRecord:
        return resolve_org(subnet, self)


def resolve_org(subnet: SubnetKey, registry: Registry) -> RegistryRecord:
    """Registry record for ``subnet``, climbing parent links past over-specific allocations.

    Allocations longer than /24 (IPv4) or /48 (IPv6) are replaced by their
    parent until the prefix is short enough or the chain ends.
    Returns UNKNOWN_RECORD when nothing matches.
    """
    net = subnet.to_network()
    rec = registry.table.lookup(net.network_address)
    if rec is None:
        return UNKNOWN_RECORD
    threshold = subnet.prefix_len
    seen = [rec.net_handle]
    while rec.cidr.prefixlen > threshold and rec.parent_handle:
        parent = registry.by_handle.get(rec.parent_handle)
        if parent is None:
            break
        if parent.net_handle in seen:
            raise RegistryCycleError(seen + [parent.net_handle])
        seen.append(parent.net_handle)
        rec = parent
    return rec


# -- organisation classification ---------------------------------------------


@dataclass(frozen=True)
class OrgClass:
    dba_name: str
    modality: str
    category: str


@dataclass(frozen=True)
class DbaRule:
    pattern: str
    dba: str | None  # None keeps the normalised organisation name
    modality: str
    category: str

    def matches(self, org_name: str) -> bool:
        name = org_name.casefold()
        pat = self.pattern.casefold()
        if any(ch in pat for ch in "*?["):
            return fnmatch.fnmatchcase(name, pat)
        return pat in name


DEFAULT_RULES: tuple[DbaRule, ...] = (
    DbaRule("AT&T Mobility", "AT&T Mobile", "mobile", "consumer_isp"),
    DbaRule("AT&T Wireless", "AT&T Mobile", "mobile", "consumer_isp"),
    DbaRule("Verizon Wireless", "Verizon Mobile", "mobile", "consumer_isp"),
    DbaRule("Cellco Partnership", "Verizon Mobile", "mobile", "consumer_isp"),
    DbaRule("T-Mobile", "T-Mobile", "mobile", "consumer_isp"),
    DbaRule("Sprint", "Sprint", "mobile", "consumer_isp"),
    DbaRule("Comcast", "Comcast", "fixed", "consumer_isp"),
    DbaRule("Charter Communications", "Charter", "fixed", "consumer_isp"),
    DbaRule("Spectrum", "Charter", "fixed", "consumer_isp"),
    DbaRule("Cablevision", "Cablevision", "fixed", "consumer_isp"),
    DbaRule("Optimum Online", "Cablevision", "fixed", "consumer_isp"),
    DbaRule("RCN", "RCN", "fixed", "consumer_isp"),
    DbaRule("WideOpenWest", "WOW!", "fixed", "consumer_isp"),
    DbaRule("WOW!*", "WOW!", "fixed", "consumer_isp"),
    DbaRule("AT&T", "AT&T", "fixed", "consumer_isp"),
    DbaRule("Verizon", "Verizon", "fixed", "consumer_isp"),
    DbaRule("University of Chicago", "University of Chicago", "fixed", "university"),
    DbaRule("Northwestern University", "Northwestern University", "fixed", "university"),
    DbaRule("University of Illinois", "University of Illinois", "fixed", "university"),
    DbaRule("New York University", "New York University", "fixed", "university"),
    DbaRule("Columbia University", "Columbia University", "fixed", "university"),
    DbaRule("University of Pennsylvania", "University of Pennsylvania", "fixed", "university"),
    DbaRule("Temple University", "Temple University", "fixed", "university"),
    DbaRule("Amazon", "Amazon", "fixed", "fortune100"),
    DbaRule("Microsoft", "Microsoft", "fixed", "fortune100"),
    DbaRule("Google", "Google", "fixed", "fortune100"),
    DbaRule("JPMorgan", "JPMorgan Chase", "fixed", "fortune100"),
    DbaRule("Boeing", "Boeing", "fixed", "fortune100"),
    # word rule for carriers not named above
    DbaRule("*mobility*", None, "mobile", "other"),
    DbaRule("*wireless*", None, "mobile", "other"),
)

_SUFFIX_RE = re.compile(
    r"[,\s]+(llc|l\.l\.c\.|inc\.?|incorporated|corp\.?|corporation|co\.?|ltd\.?|lp|l\.p\.|holdings)$",
    re.IGNORECASE,
)


def normalize_org_name(name: str) -> str:
    out = " ".join(name.split())
    prev = None
    while prev != out:
        prev = out
        out = _SUFFIX_RE.sub("", out).strip(" ,")
    return out


class RuleTable:
    def __init__(self, rules: Sequence[DbaRule] = DEFAULT_RULES):
        for r in rules:
            if r.modality not in MODALITIES:
                raise ConfigError(f"rule {r.pattern!r}: modality must be one of {MODALITIES}")
            if r.category not in CATEGORIES:
                raise ConfigError(f"rule {r.pattern!r}: category must be one of {CATEGORIES}")
        self.rules = tuple(rules)
        self._cache: dict[str, OrgClass] = {}

    @classmethod
    def from_csv(cls, stream) -> "RuleTable":
        reader = csv.DictReader(stream)
        need = {"pattern", "dba", "modality", "category"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ConfigError(f"rule table header must contain {sorted(need)}")
        return cls(
            [
                DbaRule(r["pattern"], r["dba"].strip() or None, r["modality"].strip(), r["category"].strip())
                for r in reader
            ]
        )

    @classmethod
    def load(cls, path) -> "RuleTable":
        with open(path, newline="", encoding="utf-8") as fh:
            return cls.from_csv(fh)

    def classify(self, org_name: str) -> OrgClass:
        hit = self._cache.get(org_name)
        if hit is None:
            hit = self._cache[org_name] = _classify(org_name, self.rules)
        return hit


def _classify(org_name: str, rules: Sequence[DbaRule]) -> OrgClass:
    for rule in rules:
        if rule.matches(org_name):
            return OrgClass(rule.dba or normalize_org_name(org_name), rule.modality, rule.category)
    return OrgClass(normalize_org_name(org_name), "fixed", "other")


def classify_org(r: RegistryRecord, rules: RuleTable | Sequence[DbaRule] = DEFAULT_RULES) -> OrgClass:
    """First matching rule wins; unmatched organisations fall to category 'other'."""
    if isinstance(rules, RuleTable):
        return rules.classify(r.org_name)
    return _classify(r.org_name, rules)


class OrgResolver:
    """Memoised subnet -> (record, class) lookups for a registry and rule table."""

    def __init__(self, registry: Registry, rules: RuleTable):
        self.registry = registry
        self.rules = rules
        self._cache: dict[SubnetKey, tuple[RegistryRecord, OrgClass]] = {}

    def __call__(self, subnet: SubnetKey) -> tuple[RegistryRecord, OrgClass]:
        hit = self._cache.get(subnet)
        if hit is None:
            rec = resolve_org(subnet, self.registry)
            hit = self._cache[subnet] = (rec, self.rules.classify(rec.org_name))
        return hit


# -- error scoring ---------------------------------------------------------------


@dataclass(slots=True)
class ErrorRecord:
    cluster: LocationCluster
    provider: str
    predicted: GeoPoint
    error_m: float
    claimed_accuracy_km: float | None
    too_close: bool
    tags: dict = field(default_factory=dict)


@dataclass
class ScoreTally:
    scored: Counter = field(default_factory=Counter)
    misses: Counter = field(default_factory=Counter)
    too_close: Counter = field(default_factory=Counter)

    def __add__(self, other: "ScoreTally") -> "ScoreTally":
        return ScoreTally(self.scored + other.scored, self.misses + other.misses, self.too_close + other.too_close)


def check_date_window(clusters: Sequence[LocationCluster], snapshot: GeoDbSnapshot) -> None:
    if not clusters or (snapshot.valid_from is None and snapshot.valid_to is None):
        return
    first = min(c.t_start for c in clusters).date()
    last = max(c.t_start for c in clusters).date()
    if not (snapshot.covers(first) and snapshot.covers(last)):
        raise ConfigError(
            f"snapshot {snapshot.provider} valid {snapshot.valid_from}..{snapshot.valid_to} "
            f"does not cover cluster dates {first}..{last}"
        )


def score_errors(
    clusters: Sequence[LocationCluster],
    snapshot: GeoDbSnapshot,
    too_close_m: float = TOO_CLOSE_M,
    tally: ScoreTally | None = None,
) -> list[ErrorRecord]:
    """One ErrorRecord per cluster whose address hits a prefix in ``snapshot``.

    Error is the Vincenty distance from the GPS point to the predicted point.
    """
    check_date_window(clusters, snapshot)
    if tally is None:
        tally = ScoreTally()
    n = len(clusters)
    entry_idx = np.full(n, -1, dtype=np.int64)
    entries: list[GeoDbEntry] = []
    v4 = np.fromiter((c.ip.version == 4 for c in clusters), dtype=bool, count=n)
    v4_pos = np.flatnonzero(v4)
    if v4_pos.size:
        addrs = np.fromiter((int(clusters[i].ip) for i in v4_pos.tolist()), dtype=np.uint64, count=v4_pos.size)
        idx, values = snapshot.table.lookup_v4_indices(addrs)
        entry_idx[v4_pos] = idx
        entries = list(values)
    for i in np.flatnonzero(~v4).tolist():
        e = snapshot.table.lookup(clusters[i].ip)
        if e is not None:
            entry_idx[i] = len(entries)
            entries.append(e)
    hits = np.flatnonzero(entry_idx >= 0)
    tally.misses[snapshot.provider] += n - hits.size
    if not hits.size:
        return []
    e_lat = np.array([e.point.lat for e in entries])
    e_lon = np.array([e.point.lon for e in entries])
    hit_list = hits.tolist()
    k = entry_idx[hits]
    lat1 = np.fromiter((clusters[i].lat for i in hit_list), dtype=float, count=hits.size)
    lon1 = np.fromiter((clusters[i].lon for i in hit_list), dtype=float, count=hits.size)
    dist = vincenty_array(lat1, lon1, e_lat[k], e_lon[k])
    close = dist < too_close_m
    provider = snapshot.provider
    out = [
        ErrorRecord(clusters[i], provider, entries[j].point, d, entries[j].claimed_accuracy_km, c)
        for i, j, d, c in zip(hit_list, k.tolist(), dist.tolist(), close.tolist())
    ]
    tally.scored[provider] += len(out)
    tally.too_close[provider] += int(close.sum())
    return out


def load_nic_table(path) -> PrefixTable[str]:
    """CSV ``cidr,nic`` delegation table used for the foreign-registry cut."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"cidr", "nic"} <= set(reader.fieldnames):
            raise ConfigError("NIC table header must contain cidr,nic")
        return PrefixTable((ipaddress.ip_network(r["cidr"].strip()), r["nic"].strip().upper()) for r in reader)
