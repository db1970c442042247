import io
import ipaddress
import random
from datetime import date

import numpy as np
import pytest
from geographiclib.geodesic import Geodesic

from conftest import CHICAGO, make_cluster
from subnetgeo.core import ConfigError, subnet_key
from subnetgeo.enrichment import (
    UNKNOWN_RECORD,
    GeoDbEntry,
    GeoDbSnapshot,
    PrefixConflictError,
    Registry,
    RegistryCycleError,
    RegistryRecord,
    RuleTable,
    ScoreTally,
    build_prefix_table,
    classify_org,
    normalize_org_name,
    resolve_org,
    score_errors,
)
from subnetgeo.geodesy import GeoPoint

# -- prefix table ------------------------------------------------------------------


def test_longest_prefix_wins_and_miss():
    t = build_prefix_table([("67.176.0.0/16", "A"), ("67.176.158.0/24", "B")])
    assert t.lookup("67.176.158.9") == "B"
    assert t.lookup("67.176.1.1") == "A"
    assert t.lookup("8.8.8.8") is None


def test_conflicting_duplicates_listed():
    with pytest.raises(PrefixConflictError) as exc:
        build_prefix_table([("1.2.3.0/24", "A"), ("1.2.3.0/24", "B"), ("5.0.0.0/8", "C"), ("5.0.0.0/8", "C")])
    assert exc.value.offenders == ["1.2.3.0/24"]


def linear_scan(entries, ip):
    best = None
    for net, v in entries:
        if ip.version == net.version and ip in net and (best is None or net.prefixlen > best[0].prefixlen):
            best = (net, v)
    return None if best is None else best[1]


def test_lookup_matches_linear_scan():
    rng = random.Random(17)
    entries, seen = [], set()
    # cluster prefixes under a few /8s so queries hit nested entries
    while len(entries) < 10000:
        pl = rng.choice([8, 12, 16, 20, 22, 24, 26, 28, 32])
        addr = (rng.choice([23, 67, 98]) << 24) | rng.getrandbits(24)
        net = ipaddress.IPv4Network((addr, pl), strict=False)
        if net not in seen:
            seen.add(net)
            entries.append((net, len(entries)))
    v6 = [(ipaddress.IPv6Network(f"2600:{i:x}::/32"), f"v6-{i}") for i in range(20)]
    v6.append((ipaddress.IPv6Network("2600:3:abcd::/48"), "v6-deep"))
    table = build_prefix_table(entries + v6)
    # linear scan, vectorised across entries
    bases = np.array([int(n.network_address) for n, _ in entries], dtype=np.uint64)
    masks = np.array([int(n.netmask) for n, _ in entries], dtype=np.uint64)
    lens = np.array([n.prefixlen for n, _ in entries])
    queries = [ipaddress.IPv4Address((rng.choice([23, 67, 98]) << 24) | rng.getrandbits(24)) for _ in range(10000)]
    queries += [net.network_address + rng.randrange(net.num_addresses) for net, _ in rng.sample(entries, 2000)]
    got_batch, values = table.lookup_v4_indices(np.array([int(q) for q in queries], dtype=np.uint64))
    for q, k in zip(queries, got_batch.tolist()):
        hit = np.flatnonzero((np.uint64(int(q)) & masks) == bases)
        expected = entries[hit[np.argmax(lens[hit])]][1] if hit.size else None
        assert table.lookup(q) == expected
        assert (None if k < 0 else values[k]) == expected
    for q in ("2600:3:abcd::1", "2600:3:1::1", "2601::1"):
        ip = ipaddress.ip_address(q)
        assert table.lookup(ip) == linear_scan(v6, ip)


# -- registry ------------------------------------------------------------------------


def registry(rows) -> Registry:
    text = "cidr,net_handle,parent_handle,org_name\n" + "".join(",".join(r) + "\n" for r in rows)
    return Registry.from_csv(io.StringIO(text))


def test_resolve_reassigned_customer_to_parent():
    reg = registry([("67.176.0.0/16", "NET-CC", "", "Comcast Cable Communications, LLC"),
                    ("67.176.158.0/28", "NET-CUST", "NET-CC", "Some Dentist LLC")])
    assert resolve_org(subnet_key("67.176.158.201"), reg).net_handle == "NET-CC"


def test_exact_allocation_resolves_to_itself():
    reg = registry([("67.176.0.0/16", "NET-CC", "", "Comcast"), ("67.176.158.0/24", "NET-X", "NET-CC", "X Corp")])
    assert resolve_org(subnet_key("67.176.158.1"), reg).net_handle == "NET-X"


def test_three_level_chain():
    reg = registry([("98.0.0.0/20", "N20", "", "Top"), ("98.0.1.0/26", "N26", "N20", "Mid"),
                    ("98.0.1.0/30", "N30", "N26", "Leaf")])
    assert resolve_org(subnet_key("98.0.1.2"), reg).net_handle == "N20"


def test_cycle_names_handles():
    reg = Registry([
        RegistryRecord(ipaddress.ip_network("98.0.1.0/26"), "A", "a", "B"),
        RegistryRecord(ipaddress.ip_network("98.0.1.0/27"), "B", "b", "A"),
    ])
    with pytest.raises(RegistryCycleError) as exc:
        resolve_org(subnet_key("98.0.1.1"), reg)
    assert set(exc.value.handles) >= {"A", "B"}


def test_unmatched_is_unknown():
    assert resolve_org(subnet_key("8.8.8.8"), registry([("98.0.0.0/8", "N", "", "x")])) is UNKNOWN_RECORD


# -- classification ----------------------------------------------------------------------


def rec(org):
    return RegistryRecord(ipaddress.ip_network("1.0.0.0/24"), "H", org)


@pytest.mark.parametrize(
    "org, dba, modality",
    [
        ("AT&T Mobility LLC", "AT&T Mobile", "mobile"),
        ("Verizon Wireless", "Verizon Mobile", "mobile"),
        ("Comcast Cable Communications, LLC", "Comcast", "fixed"),
        ("Acme Mobility Partners", "Acme Mobility Partners", "mobile"),
    ],
)
def test_classify_examples(org, dba, modality):
    c = classify_org(rec(org))
    assert (c.dba_name, c.modality) == (dba, modality)


def test_unmatched_org_is_other_with_normalized_name():
    c = classify_org(rec("Joe's  Pizza,  Inc."))
    assert (c.dba_name, c.category) == ("Joe's Pizza", "other")
    assert normalize_org_name("Foo Holdings, LLC") == "Foo"


def test_first_matching_rule_wins():
    rules = RuleTable.from_csv(io.StringIO("pattern,dba,modality,category\nacme,First,fixed,other\nacme*,Second,mobile,other\n"))
    assert classify_org(rec("ACME wireless"), rules).dba_name == "First"
    with pytest.raises(ConfigError):
        RuleTable.from_csv(io.StringIO("pattern,dba,modality,category\nx,y,satellite,other\n"))


# -- error scoring -------------------------------------------------------------------------


def snapshot(entries, **kw):
    return GeoDbSnapshot("test", build_prefix_table(entries), **kw)


def test_exact_prediction_is_zero_and_too_close():
    snap = snapshot([("64.1.2.0/24", GeoDbEntry(GeoPoint(*CHICAGO), 1.0))])
    (e,) = score_errors([make_cluster()], snap)
    assert e.error_m == 0.0 and e.too_close and e.claimed_accuracy_km == 1.0


def test_miss_counted_without_record():
    tally = ScoreTally()
    out = score_errors([make_cluster(ip="99.9.9.9"), make_cluster(ip="2600::1")], snapshot([("64.0.0.0/8", GeoDbEntry(GeoPoint(0, 0)))]), tally=tally)
    assert out == [] and tally.misses["test"] == 2


def test_errors_match_independent_geodesic():
    rng = random.Random(8)
    geod = Geodesic.WGS84
    entries, clusters = [], []
    for i in range(500):
        lat, lon = 41.5 + rng.random(), -88.2 + rng.random()
        entries.append((f"64.{i // 256}.{i % 256}.0/24", GeoDbEntry(GeoPoint(lat, lon))))
        clusters.append(make_cluster(ip=f"64.{i // 256}.{i % 256}.7", lat=41.5 + rng.random(), lon=-88.2 + rng.random()))
    clusters.append(make_cluster(ip="2600:1::5"))
    entries.append(("2600:1::/32", GeoDbEntry(GeoPoint(41.9, -87.7))))
    out = score_errors(clusters, snapshot(entries))
    assert len(out) == len(clusters)
    for e in out:
        ref = geod.Inverse(e.cluster.lat, e.cluster.lon, e.predicted.lat, e.predicted.lon)["s12"]
        assert abs(e.error_m - ref) < 1e-3
        assert e.too_close == (e.error_m < 25.0)


def test_date_window_mismatch_is_config_error():
    snap = snapshot([("64.0.0.0/8", GeoDbEntry(GeoPoint(0, 0)))], valid_from=date(2021, 1, 1), valid_to=date(2021, 12, 31))
    with pytest.raises(ConfigError):
        score_errors([make_cluster()], snap)
