import io
import ipaddress
import random
from collections import Counter
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from conftest import T0, cluster_csv, make_cluster
from subnetgeo.core import (
    ClusterClass,
    ConfigError,
    FilterPolicy,
    CityRegion,
    SpecialUseError,
    SubnetKey,
    chunked,
    cluster_to_row,
    filter_cluster,
    night_flag,
    night_flags,
    parse_clusters,
    special_use_kind,
    subnet_key,
    tabulate_classes,
)

CHI = CityRegion("Chicago", 41.8781, -87.6298)


def parse(text, policy=FilterPolicy()):
    return parse_clusters(io.StringIO(text), policy)


# -- parsing and filtering ---------------------------------------------------


def test_accuracy_over_50m_rejected():
    kept, tally = parse(cluster_csv([{"accuracy_m": "60"}]))
    assert kept == [] and tally.rejected["accuracy"] == 1


def test_four_decimal_latitude_rejected():
    kept, tally = parse(cluster_csv([{"lat": "41.8781"}]))
    assert kept == [] and tally.rejected["precision"] == 1


def test_clean_row_accepted():
    kept, tally = parse(cluster_csv([{"accuracy_m": "0"}]), FilterPolicy(regions=(CHI,)))
    assert len(kept) == 1 and tally.accepted == 1 and tally.balanced
    c = kept[0]
    assert c.coord_decimals == 6 and c.cluster_class is ClusterClass.LONG_AREA_DWELL
    assert str(c.subnet) == "64.1.2.0/24"


def test_out_of_region_rejected():
    kept, tally = parse(cluster_csv([{"lat": "40.712800", "lon": "-74.006000"}]), FilterPolicy(regions=(CHI,)))
    assert kept == [] and tally.rejected["out_of_region"] == 1


@pytest.mark.parametrize(
    "row, reason",
    [
        ({"ip": "10.1.2.3"}, "special_use"),
        ({"ip": "224.0.0.5"}, "special_use"),
        ({"lat": "abc"}, "malformed"),
        ({"lat": "95.000000"}, "malformed"),
        ({"cluster_class": "WANDERING"}, "malformed"),
        ({"t_end": "2020-08-01T03:00:00Z"}, "malformed"),
        ({"bump_count": "0"}, "malformed"),
        ({"ip": "not-an-ip"}, "malformed"),
    ],
)
def test_rejection_reasons(row, reason):
    kept, tally = parse(cluster_csv([row]))
    assert kept == [] and tally.rejected[reason] == 1 and tally.balanced


def test_truncated_ip_notation():
    kept, _ = parse(cluster_csv([{"ip": "67.176.158"}, {"ip": "67.176.158.0/24"}]))
    assert [c.truncated for c in kept] == [True, True]
    assert {str(c.subnet) for c in kept} == {"67.176.158.0/24"}


def test_header_errors_are_config_errors():
    with pytest.raises(ConfigError):
        parse("")
    with pytest.raises(ConfigError, match="lat"):
        parse("device_id,t_start\n")


def test_reordered_and_extra_columns():
    text = cluster_csv([{}])
    header, row = text.splitlines()
    cols, vals = header.split(","), row.split(",")
    perm = list(reversed(range(len(cols))))
    shuffled = ",".join([cols[i] for i in perm] + ["extra"]) + "\n" + ",".join([vals[i] for i in perm] + ["x"]) + "\n"
    short = shuffled + "a,b\n\n"
    kept, tally = parse(short)
    assert len(kept) == 1 and tally.rejected["malformed"] == 1 and tally.total == 2


def test_tally_balances_and_matches_per_row_filter():
    rng = random.Random(3)
    rows = []
    for i in range(400):
        rows.append(
            {
                "device_id": f"d{i % 17}",
                "accuracy_m": rng.choice(["5", "49.9", "50", "51", "200"]),
                "lat": rng.choice(["41.878100", "41.8781", "41.90000", "42.900000", "x"]),
                "ip": rng.choice(["64.1.2.3", "10.0.0.1", "100.64.1.1", "2601:240::1", "fe80::1", "8.8.8"]),
            }
        )
    policy = FilterPolicy(regions=(CHI,))
    kept, tally = parse(cluster_csv(rows), policy)
    assert tally.total == 400 and tally.balanced
    # independent per-row verdicts
    expected = Counter()
    for c in kept:
        assert filter_cluster(c, policy) is None
    for r in rows:
        one, t = parse(cluster_csv([r]), policy)
        expected.update(t.rejected)
    assert +expected == +tally.rejected


def test_filtering_is_idempotent():
    rows = [{"accuracy_m": a, "ip": ip} for a in ("3", "70") for ip in ("64.9.9.9", "192.168.0.1")]
    policy = FilterPolicy(regions=(CHI,))
    kept, _ = parse(cluster_csv(rows), policy)
    text = "device_id,t_start,t_end,lat,lon,accuracy_m,cluster_class,ip,bump_count\n" + "".join(
        ",".join(cluster_to_row(c)) + "\n" for c in kept
    )
    again, tally = parse(text, policy)
    assert again == kept and tally.accepted == tally.total


def test_partitioned_parse_merges_to_whole():
    rows = [{"device_id": f"d{i}", "accuracy_m": str(i % 80)} for i in range(90)]
    _, whole = parse(cluster_csv(rows))
    merged = None
    for part in chunked(rows, 4):
        _, t = parse(cluster_csv(part))
        merged = t if merged is None else merged + t
    assert merged == whole


# -- night flag ----------------------------------------------------------------


def local(h, m=0, day=1):
    return datetime(2020, 8, day, h, m, tzinfo=timezone.utc)


def minute_grid_oracle(start, end):
    t = start
    while t <= end:
        if t.hour < 6:
            return True
        t += timedelta(minutes=1)
    return False


@pytest.mark.parametrize(
    "start, end, expected",
    [
        (local(23, 30), local(0, 30, day=2), True),
        (local(10), local(11), False),
        (local(5, 59), local(6, 1), True),
        (local(6), local(23, 59), False),
        (local(22), local(23, 59), False),
    ],
)
def test_night_flag_examples(start, end, expected):
    c = make_cluster(start=start, hours=(end - start).total_seconds() / 3600)
    assert night_flag(c) is expected
    assert minute_grid_oracle(start, end) is expected


def test_night_flag_against_minute_grid():
    rng = random.Random(11)
    cs = []
    for _ in range(300):
        start = local(0) + timedelta(minutes=rng.randrange(0, 3 * 1440))
        cs.append(make_cluster(start=start, hours=rng.randrange(0, 20 * 60) / 60))
    flags = night_flags(cs)
    for c, f in zip(cs, flags.tolist()):
        assert night_flag(c) == f == minute_grid_oracle(c.t_start, c.t_end)


def test_night_flag_uses_local_offset():
    # 05:00 UTC is 00:00 in UTC-5; 12:00 UTC is 07:00 local
    assert night_flag(make_cluster(start=local(5), hours=0.5), -5.0)
    assert not night_flag(make_cluster(start=local(12), hours=1), -5.0)
    assert night_flag(make_cluster(start=local(12), hours=1), 14.0)


def test_night_flag_shift_by_whole_days_is_invariant():
    rng = random.Random(5)
    for _ in range(100):
        c = make_cluster(start=T0 + timedelta(minutes=rng.randrange(2000)), hours=rng.random() * 10)
        shifted = make_cluster(start=c.t_start + timedelta(days=rng.randrange(1, 400)), hours=(c.t_end - c.t_start).total_seconds() / 3600)
        assert night_flag(c, -5) == night_flag(shifted, -5)


# -- subnet keys ----------------------------------------------------------------


def test_subnet_key_examples():
    assert str(subnet_key("67.176.158.201")) == "67.176.158.0/24"
    assert str(subnet_key("2001:db8:abcd:1234::7")) == "2001:db8:abcd::/48"
    with pytest.raises(SpecialUseError):
        subnet_key("10.1.2.3")


def test_subnet_key_matches_mask_arithmetic():
    rng = random.Random(2)
    for _ in range(2000):
        a = ipaddress.IPv4Address(rng.getrandbits(32))
        if special_use_kind(a):
            continue
        assert subnet_key(a).to_network() == ipaddress.IPv4Network(f"{a}/24", strict=False)
    for _ in range(200):
        a = ipaddress.IPv6Address((0x2600 << 112) | rng.getrandbits(112))
        assert subnet_key(a) == SubnetKey(6, int(ipaddress.IPv6Network(f"{a}/48", strict=False).network_address))


def test_special_use_agrees_with_stdlib():
    # stdlib is_global is the oracle except for multicast, which it counts as global
    rng = random.Random(9)
    samples = [ipaddress.IPv4Address(rng.getrandbits(32)) for _ in range(20000)]
    samples += [ipaddress.IPv4Address(x) for x in ("0.0.0.0", "100.64.0.1", "127.0.0.1", "169.254.9.9", "198.18.0.1")]
    for a in samples:
        expected_special = not a.is_global or a.is_multicast
        assert (special_use_kind(a) is not None) == expected_special, a


# -- class tabulation ----------------------------------------------------------


def test_single_travel_cluster():
    shares = tabulate_classes([make_cluster(cls=ClusterClass.TRAVEL, bumps=5)]).shares()
    assert shares == {ClusterClass.TRAVEL: (1.0, 1.0)}


def test_two_classes_equal_bumps():
    shares = tabulate_classes(
        [make_cluster(cls=ClusterClass.TRAVEL, bumps=4), make_cluster(cls=ClusterClass.PING, bumps=4)]
    ).shares()
    assert shares[ClusterClass.TRAVEL] == shares[ClusterClass.PING] == (0.5, 0.5)


def test_tabulation_matches_counting_oracle():
    rng = np.random.default_rng(4)
    classes = list(ClusterClass)
    cs = [make_cluster(cls=classes[rng.integers(len(classes))], bumps=int(rng.integers(1, 50))) for _ in range(1000)]
    n_clusters, n_bumps = {}, {}
    for c in cs:
        n_clusters[c.cluster_class] = n_clusters.get(c.cluster_class, 0) + 1
        n_bumps[c.cluster_class] = n_bumps.get(c.cluster_class, 0) + c.bump_count
    shares = tabulate_classes(cs).shares()
    tb, tc = sum(n_bumps.values()), len(cs)
    assert set(shares) == set(n_clusters)
    for k, (sb, sc) in shares.items():
        assert sb == n_bumps[k] / tb and sc == n_clusters[k] / tc
    halves = tabulate_classes(cs[:400]) + tabulate_classes(cs[400:])
    assert halves.shares() == shares
