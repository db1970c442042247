import ipaddress
from datetime import datetime, timedelta, timezone

import pytest

from subnetgeo.core import CLUSTER_COLUMNS, ClusterClass, LocationCluster

CHICAGO = (41.8781, -87.6298)
T0 = datetime(2020, 8, 1, 4, 0, tzinfo=timezone.utc)

# criterion number -> (title, passed, detail); filled by the acceptance tests
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def make_cluster(
    device="d1",
    ip="64.1.2.3",
    lat=CHICAGO[0],
    lon=CHICAGO[1],
    start=T0,
    hours=2.0,
    cls=ClusterClass.LONG_AREA_DWELL,
    accuracy=10.0,
    decimals=6,
    bumps=3,
    truncated=False,
) -> LocationCluster:
    return LocationCluster(
        device_id=device,
        t_start=start,
        t_end=start + timedelta(hours=hours),
        lat=lat,
        lon=lon,
        accuracy_m=accuracy,
        coord_decimals=decimals,
        cluster_class=cls,
        ip=ipaddress.ip_address(ip),
        bump_count=bumps,
        truncated=truncated,
    )


def cluster_csv(rows) -> str:
    """CSV text with the standard header; ``rows`` are dicts with any subset of fields."""
    defaults = {
        "device_id": "d1",
        "t_start": "2020-08-01T04:00:00Z",
        "t_end": "2020-08-01T06:00:00Z",
        "lat": "41.878100",
        "lon": "-87.629800",
        "accuracy_m": "10",
        "cluster_class": "LONG_AREA_DWELL",
        "ip": "64.1.2.3",
        "bump_count": "3",
    }
    lines = [",".join(CLUSTER_COLUMNS)]
    for r in rows:
        merged = {**defaults, **r}
        lines.append(",".join(str(merged[c]) for c in CLUSTER_COLUMNS))
    return "\n".join(lines) + "\n"


@pytest.fixture
def acceptance():
    """Record an acceptance verdict: ``acceptance(n, title, passed, detail)``."""

    def record(n: int, title: str, passed: bool, detail: str = "") -> None:
        ACCEPTANCE[n] = (title, bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
