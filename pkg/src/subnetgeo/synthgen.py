"""Synthetic GPS-cluster datasets with known ground truth.

Writes the same three inputs the pipeline consumes (cluster CSV, geolocation
snapshot CSVs, registry CSV) plus a JSON sidecar holding the generative
truth, from which :func:`expected_metrics` derives oracle values.
"""

from __future__ import annotations

import csv
import ipaddress
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FORTY_MILES_M, CityRegion
from .geodesy import GeoPoint, LocalProjection, Polygon, format_polygon
from .metrics.distributions import ACCURACY_BIN_EDGES_KM

CHICAGO = CityRegion("Chicago", 41.8781, -87.6298, FORTY_MILES_M)

FIRST_SUBNET = int(ipaddress.IPv4Address("64.0.0.0"))
HOSTS = 254

# independent generator streams per entity class
STREAM_SUBNETS, STREAM_DEVICES, STREAM_DB, STREAM_ECHO = 1, 2, 3, 4


class InfeasibleParameters(ValueError):
    pass


@dataclass
class IspProfile:
    dba_name: str
    org_name: str
    modality: str = "fixed"
    subnet_count: int = 50
    scale_median_m: float = 2000.0
    scale_sigma: float = 0.5
    scale_range_m: tuple[float, float] | None = None  # log-uniform instead of lognormal
    stickiness: float = 0.99
    ephemeral_share: float = 0.0
    ephemeral_scale_factor: float = 3.0
    device_weight: float = 1.0
    reassigned_share: float = 0.1  # subnets with a /28 customer record under the ISP block

    def validate(self) -> None:
        if self.modality not in ("fixed", "mobile"):
            raise InfeasibleParameters(f"{self.dba_name}: modality must be fixed or mobile")
        for name in ("stickiness", "ephemeral_share", "reassigned_share"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InfeasibleParameters(f"{self.dba_name}: {name}={v} outside [0, 1]")
        if self.subnet_count < 1:
            raise InfeasibleParameters(f"{self.dba_name}: needs at least one subnet")
        if self.scale_median_m <= 0 or self.scale_sigma < 0:
            raise InfeasibleParameters(f"{self.dba_name}: bad scale distribution")
        if self.device_weight < 0:
            raise InfeasibleParameters(f"{self.dba_name}: negative device weight")


@dataclass
class DbErrorModel:
    provider: str = "synthetic"
    mode: str = "subnet_centroid"  # perfect | subnet_centroid | offset_gaussian | default_location
    sigma_m: float = 1000.0
    default_point: tuple[float, float] | None = None  # (lat, lon); region centre when None
    default_share: float = 1.0
    echo_share: float = 0.0

    def validate(self) -> None:
        if self.mode not in ("perfect", "subnet_centroid", "offset_gaussian", "default_location"):
            raise InfeasibleParameters(f"unknown DB error mode {self.mode!r}")
        if not (0 <= self.echo_share <= 1 and 0 <= self.default_share <= 1):
            raise InfeasibleParameters("DB model shares must lie in [0, 1]")
        if self.sigma_m < 0:
            raise InfeasibleParameters("sigma_m must be non-negative")


@dataclass
class GeneratorConfig:
    profiles: Sequence[IspProfile]
    regions: Sequence[CityRegion] = (CHICAGO,)
    db_models: Sequence[DbErrorModel] = (DbErrorModel(),)
    n_devices: int = 1000
    n_nights: int = 30
    start_date: date = date(2020, 8, 1)
    utc_offset_hours: float = -5.0
    urban_weight: float = 0.6
    urban_sigma_m: float = 8000.0
    night_presence: float = 1.0
    day_clusters: float = 0.0  # mean day-time clusters per device-day, on a mobile carrier
    truncated_share: float = 0.0
    device_stream: int = 0  # re-sample devices while keeping the subnet layout


@dataclass
class GeneratedPaths:
    clusters: Path
    geodbs: dict[str, Path]
    registry: Path
    sidecar: Path
    polygons: Path | None = None
    run_config: Path | None = None


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def _ip_text(a: int) -> str:
    return f"{a >> 24}.{(a >> 16) & 255}.{(a >> 8) & 255}.{a & 255}"


def _claimed_km(meters: float) -> float:
    km = meters / 1000.0
    for edge in ACCURACY_BIN_EDGES_KM:
        if km <= edge:
            return float(edge)
    return float(ACCURACY_BIN_EDGES_KM[-1])


def _draw_center(rng, cfg: GeneratorConfig, region: CityRegion, limit: float) -> tuple[float, float]:
    """Planar point within ``limit`` of the region centre from the urban/suburban mixture."""
    limit = max(limit, 0.0)
    if rng.random() < cfg.urban_weight:
        for _ in range(100):
            x, y = rng.normal(0.0, cfg.urban_sigma_m, 2)
            if math.hypot(x, y) <= limit:
                return float(x), float(y)
    r = limit * math.sqrt(rng.random())
    t = 2 * math.pi * rng.random()
    return r * math.cos(t), r * math.sin(t)


def _build_subnets(cfg: GeneratorConfig, seed: int) -> list[dict]:
    rng = _rng(seed, STREAM_SUBNETS)
    subnets = []
    base = FIRST_SUBNET
    for pi, prof in enumerate(cfg.profiles):
        for j in range(prof.subnet_count):
            ri = int(rng.integers(len(cfg.regions)))
            region = cfg.regions[ri]
            if prof.scale_range_m is not None:
                lo, hi = prof.scale_range_m
                scale = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
            else:
                scale = float(prof.scale_median_m * math.exp(prof.scale_sigma * rng.normal()))
            ephemeral = bool(rng.random() < prof.ephemeral_share)
            if ephemeral:
                scale *= prof.ephemeral_scale_factor
            radius = scale / math.sqrt(math.pi)
            if prof.modality == "mobile":
                cx, cy, radius = 0.0, 0.0, 0.0
            else:
                radius = min(radius, 0.9 * region.radius_m)
                cx, cy = _draw_center(rng, cfg, region, 0.95 * region.radius_m - radius)
            reassigned = bool(rng.random() < prof.reassigned_share)
            subnets.append(
                dict(
                    network=base,
                    profile=pi,
                    region=ri,
                    x=cx,
                    y=cy,
                    disc_radius_m=radius,
                    scale_m=scale if prof.modality == "fixed" else None,
                    ephemeral=ephemeral,
                    reassigned=reassigned,
                )
            )
            base += 256
    return subnets


def _device_nights(cfg, rng) -> np.ndarray:
    nights = np.arange(cfg.n_nights)
    if cfg.night_presence < 1.0:
        nights = nights[rng.random(cfg.n_nights) < cfg.night_presence]
    return nights


def generate(cfg: GeneratorConfig, seed: int, out_dir: str | Path, polygons: bool = True) -> GeneratedPaths:
    """Write a synthetic dataset to ``out_dir``; identical inputs give identical bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.profiles:
        raise InfeasibleParameters("at least one ISP profile is required")
    for p in cfg.profiles:
        p.validate()
    for m in cfg.db_models:
        m.validate()
    if len({m.provider for m in cfg.db_models}) != len(cfg.db_models):
        raise InfeasibleParameters("DB provider labels must be unique")
    if not 0 <= cfg.night_presence <= 1 or not 0 <= cfg.truncated_share <= 1:
        raise InfeasibleParameters("presence and truncation shares must lie in [0, 1]")
    if cfg.n_devices < 1 or cfg.n_nights < 1:
        raise InfeasibleParameters("need at least one device and one night")

    projs = [LocalProjection(r.center) for r in cfg.regions]
    subnets = _build_subnets(cfg, seed)
    by_profile: dict[int, list[int]] = {}
    for i, s in enumerate(subnets):
        by_profile.setdefault(s["profile"], []).append(i)
    weights = np.array([p.device_weight for p in cfg.profiles], dtype=float)
    if weights.sum() <= 0:
        raise InfeasibleParameters("device weights sum to zero")
    weights /= weights.sum()
    mobile_profiles = [i for i, p in enumerate(cfg.profiles) if p.modality == "mobile"]

    # -- devices: one generator per device so adding devices leaves earlier ones intact
    occupancy: dict[int, set] = {}
    devices = []
    for d in range(cfg.n_devices):
        rng = _rng(seed, STREAM_DEVICES, cfg.device_stream, d)
        pi = int(rng.choice(len(weights), p=weights))
        prof = cfg.profiles[pi]
        si = by_profile[pi][int(rng.integers(len(by_profile[pi])))]
        sub = subnets[si]
        if prof.modality == "fixed":
            r = sub["disc_radius_m"] * math.sqrt(rng.random())
            t = 2 * math.pi * rng.random()
            hx, hy = sub["x"] + r * math.cos(t), sub["y"] + r * math.sin(t)
            ri = sub["region"]
        else:
            ri = int(rng.integers(len(cfg.regions)))
            hx, hy = _draw_center(rng, cfg, cfg.regions[ri], 0.95 * cfg.regions[ri].radius_m)
        carrier = mobile_profiles[int(rng.integers(len(mobile_profiles)))] if mobile_profiles else None
        devices.append(dict(profile=pi, subnet=si, region=ri, x=hx, y=hy, carrier=carrier, rng=rng))
        if prof.modality == "fixed" and not sub["ephemeral"]:
            occupancy.setdefault(si, set()).add(d)
    for si, members in occupancy.items():
        if len(members) > HOSTS and cfg.profiles[subnets[si]["profile"]].stickiness >= 1.0:
            raise InfeasibleParameters(
                f"subnet {_ip_text(subnets[si]['network'])}/24 holds {len(members)} devices "
                f"but only {HOSTS} addresses with stickiness 1"
            )

    # home lat/lon, vectorised per region
    for ri, proj in enumerate(projs):
        idx = [i for i, dv in enumerate(devices) if dv["region"] == ri]
        if idx:
            lat, lon = proj.inverse([devices[i]["x"] for i in idx], [devices[i]["y"] for i in idx])
            for i, a, b in zip(idx, np.atleast_1d(lat).tolist(), np.atleast_1d(lon).tolist()):
                devices[i]["lat"], devices[i]["lon"] = round(a, 6), round(b, 6)

    # -- initial addresses: unique within each sticky subnet
    free: dict[int, list[int]] = {}
    for d, dv in enumerate(devices):
        sub = subnets[dv["subnet"]]
        if cfg.profiles[dv["profile"]].modality != "fixed":
            continue
        pool = free.get(dv["subnet"])
        if pool is None:
            pool = free[dv["subnet"]] = list(range(1, HOSTS + 1))
        rng = dv["rng"]
        if pool:
            host = pool.pop(int(rng.integers(len(pool))))
        else:
            host = int(rng.integers(1, HOSTS + 1))
        dv["host0"] = host

    # -- clusters
    base_epoch = datetime(cfg.start_date.year, cfg.start_date.month, cfg.start_date.day, tzinfo=timezone.utc).timestamp()
    offset_s = cfg.utc_offset_hours * 3600.0
    cols = {k: [] for k in ("dev", "t0", "t1", "lat", "lon", "acc", "cls", "ip", "bumps", "trunc")}
    first_holder: dict[int, tuple[float, float]] = {}
    for d, dv in enumerate(devices):
        rng = dv["rng"]
        prof = cfg.profiles[dv["profile"]]
        sub = subnets[dv["subnet"]]
        nights = _device_nights(cfg, rng)
        k = len(nights)
        if k:
            # local start between 22:00 (previous day) and 02:00, lasting 3-8 h
            start_local = base_epoch + nights * 86400.0 + rng.uniform(-2 * 3600, 2 * 3600, k)
            dur = rng.uniform(3 * 3600, 8 * 3600, k)
            if prof.modality == "fixed":
                p = 0.0 if sub["ephemeral"] else prof.stickiness
                keep = rng.random(cfg.n_nights) < p
                new_host = rng.integers(1, HOSTS, cfg.n_nights)  # shifted to skip current below
                hosts = np.empty(cfg.n_nights, dtype=np.int64)
                h = dv["host0"]
                for n in range(cfg.n_nights):
                    if n > 0 and not keep[n]:
                        cand = int(new_host[n])
                        h = cand if cand < h else cand + 1
                    hosts[n] = h
                ips = sub["network"] + hosts[nights]
            else:
                pool_nets = np.array([subnets[i]["network"] for i in by_profile[dv["profile"]]], dtype=np.int64)
                ips = pool_nets[rng.integers(len(pool_nets), size=k)] + rng.integers(1, HOSTS + 1, k)
            cols["dev"].append(np.full(k, d))
            cols["t0"].append(start_local - offset_s)
            cols["t1"].append(start_local + dur - offset_s)
            cols["lat"].append(np.full(k, dv["lat"]))
            cols["lon"].append(np.full(k, dv["lon"]))
            cols["acc"].append(np.round(rng.uniform(3, 40, k), 1))
            cols["cls"].append(np.zeros(k, dtype=np.int64))
            cols["ip"].append(ips)
            cols["bumps"].append(rng.integers(5, 41, k))
            cols["trunc"].append(rng.random(k) < cfg.truncated_share)
            if prof.modality == "fixed":
                for a in np.unique(ips).tolist():
                    first_holder.setdefault(a, (dv["lat"], dv["lon"]))
        if cfg.day_clusters > 0 and dv["carrier"] is not None:
            m = int(rng.poisson(cfg.day_clusters * cfg.n_nights))
            if m:
                ri = dv["region"]
                pts = [_draw_center(rng, cfg, cfg.regions[ri], 0.95 * cfg.regions[ri].radius_m) for _ in range(m)]
                lat, lon = projs[ri].inverse([p[0] for p in pts], [p[1] for p in pts])
                days = rng.integers(0, cfg.n_nights, m)
                start_local = base_epoch + days * 86400.0 + rng.uniform(9 * 3600, 17 * 3600, m)
                travel = rng.random(m) < 0.3
                dur = np.where(travel, rng.uniform(300, 1800, m), rng.uniform(1800, 3 * 3600, m))
                pool_nets = np.array([subnets[i]["network"] for i in by_profile[dv["carrier"]]], dtype=np.int64)
                cols["dev"].append(np.full(m, d))
                cols["t0"].append(start_local - offset_s)
                cols["t1"].append(start_local + dur - offset_s)
                cols["lat"].append(np.round(np.atleast_1d(lat), 6))
                cols["lon"].append(np.round(np.atleast_1d(lon), 6))
                cols["acc"].append(np.round(rng.uniform(3, 40, m), 1))
                cols["cls"].append(np.where(travel, 1, 2))
                cols["ip"].append(pool_nets[rng.integers(len(pool_nets), size=m)] + rng.integers(1, HOSTS + 1, m))
                cols["bumps"].append(rng.integers(1, 15, m))
                cols["trunc"].append(rng.random(m) < cfg.truncated_share)
        del dv["rng"]

    arr = {k: (np.concatenate(v) if v else np.array([])) for k, v in cols.items()}
    order = np.lexsort((arr["t0"], arr["dev"])) if len(arr["dev"]) else np.array([], dtype=np.int64)
    arr = {k: v[order] for k, v in arr.items()}

    # -- database snapshots
    snapshots: dict[str, dict[str, tuple[float, float, float]]] = {}
    for mi, model in enumerate(cfg.db_models):
        rng = _rng(seed, STREAM_DB, mi)
        entries: dict[str, tuple[float, float, float]] = {}
        for s in subnets:
            prof = cfg.profiles[s["profile"]]
            region = cfg.regions[s["region"]]
            proj = projs[s["region"]]
            x, y = s["x"], s["y"]
            claimed = _claimed_km(s["scale_m"]) if s["scale_m"] else 200.0
            if model.mode == "offset_gaussian":
                dx, dy = rng.normal(0.0, model.sigma_m, 2)
                x, y = x + dx, y + dy
                claimed = _claimed_km(model.sigma_m * 1.1774)
            lat, lon = proj.inverse(x, y)
            pt = (round(float(lat), 6), round(float(lon), 6))
            if model.mode == "default_location" and rng.random() < model.default_share:
                pt = model.default_point or (round(region.center_lat, 6), round(region.center_lon, 6))
                claimed = 1000.0
            entries[f"{_ip_text(s['network'])}/24"] = (pt[0], pt[1], claimed)
        if model.mode == "perfect":
            for a, (lat, lon) in sorted(first_holder.items()):
                entries[f"{_ip_text(a)}/32"] = (lat, lon, 1.0)
        snapshots[model.provider] = entries

    # -- planted echo reports: GPS replaced by the first provider's prediction
    echo_model = cfg.db_models[0] if cfg.db_models else None
    echo_count = 0
    if echo_model is not None and echo_model.echo_share > 0 and len(arr["dev"]):
        rng = _rng(seed, STREAM_ECHO)
        planted = rng.random(len(arr["dev"])) < echo_model.echo_share
        entries = snapshots[echo_model.provider]
        for i in np.nonzero(planted)[0].tolist():
            a = int(arr["ip"][i])
            hit = entries.get(f"{_ip_text(a)}/32") or entries.get(f"{_ip_text(a & 0xFFFFFF00)}/24")
            if hit is None:
                continue
            region = cfg.regions[devices[int(arr["dev"][i])]["region"]]
            if not region.contains(hit[0], hit[1]):
                continue
            arr["lat"][i], arr["lon"][i] = hit[0], hit[1]
            echo_count += 1

    # -- write files
    paths = GeneratedPaths(out / "clusters.csv", {}, out / "registry.csv", out / "sidecar.json")
    _write_clusters(paths.clusters, arr, devices)
    for provider, entries in snapshots.items():
        p = out / f"geodb_{provider}.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["network", "latitude", "longitude", "accuracy_km"])
            for net in sorted(entries, key=lambda n: (int(ipaddress.ip_network(n).network_address), n)):
                lat, lon, acc = entries[net]
                w.writerow([net, f"{lat:.6f}", f"{lon:.6f}", f"{acc:g}"])
        paths.geodbs[provider] = p
    _write_registry(paths.registry, cfg, subnets)
    if polygons:
        paths.polygons = out / "polygons.txt"
        write_grid_layer(paths.polygons, cfg.regions[0], seed)

    class_names = np.array(["LONG_AREA_DWELL", "TRAVEL", "AREA_DWELL"])
    n_rows = len(arr["dev"])
    sidecar = {
        "seed": seed,
        "n_devices": cfg.n_devices,
        "n_nights": cfg.n_nights,
        "n_clusters": n_rows,
        "start_date": cfg.start_date.isoformat(),
        "utc_offset_hours": cfg.utc_offset_hours,
        "regions": [asdict(r) for r in cfg.regions],
        "profiles": [asdict(p) for p in cfg.profiles],
        "db_models": [asdict(m) for m in cfg.db_models],
        "echo": {"provider": echo_model.provider if echo_model else None, "planted": echo_count,
                 "share": echo_count / n_rows if n_rows else 0.0},
        "class_counts": {c: int((class_names[arr["cls"].astype(int)] == c).sum()) if n_rows else 0 for c in class_names},
        "subnets": [
            {
                "subnet": f"{_ip_text(s['network'])}/24",
                "isp": cfg.profiles[s["profile"]].dba_name,
                "modality": cfg.profiles[s["profile"]].modality,
                "region": cfg.regions[s["region"]].name,
                "center_x_m": round(s["x"], 3),
                "center_y_m": round(s["y"], 3),
                "scale_m": None if s["scale_m"] is None else round(s["scale_m"], 3),
                "disc_radius_m": round(s["disc_radius_m"], 3),
                "ephemeral": s["ephemeral"],
            }
            for s in subnets
        ],
        "devices": [
            {"device": f"dev{d:07d}", "isp": cfg.profiles[dv["profile"]].dba_name,
             "subnet": f"{_ip_text(subnets[dv['subnet']]['network'])}/24",
             "lat": dv["lat"], "lon": dv["lon"]}
            for d, dv in enumerate(devices)
        ],
    }
    paths.sidecar.write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths.run_config = out / "run.yaml"
    write_run_config(paths, cfg)
    return paths


def _write_clusters(path: Path, arr: dict, devices: list) -> None:
    n = len(arr["dev"])
    t0 = np.datetime_as_string(np.round(arr["t0"]).astype(np.int64).astype("datetime64[s]"), unit="s") if n else []
    t1 = np.datetime_as_string(np.round(arr["t1"]).astype(np.int64).astype("datetime64[s]"), unit="s") if n else []
    class_names = ("LONG_AREA_DWELL", "TRAVEL", "AREA_DWELL")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("device_id,t_start,t_end,lat,lon,accuracy_m,cluster_class,ip,bump_count\n")
        dev, lat, lon, acc = arr["dev"].tolist(), arr["lat"].tolist(), arr["lon"].tolist(), arr["acc"].tolist()
        cls, ips, bumps, trunc = arr["cls"].tolist(), arr["ip"].tolist(), arr["bumps"].tolist(), arr["trunc"].tolist()
        lines = []
        for i in range(n):
            a = int(ips[i])
            ip = f"{a >> 24}.{(a >> 16) & 255}.{(a >> 8) & 255}" if trunc[i] else _ip_text(a)
            lines.append(
                f"dev{int(dev[i]):07d},{t0[i]}Z,{t1[i]}Z,{lat[i]:.6f},{lon[i]:.6f},{acc[i]:g},"
                f"{class_names[int(cls[i])]},{ip},{int(bumps[i])}\n"
            )
            if len(lines) >= 100_000:
                fh.writelines(lines)
                lines.clear()
        fh.writelines(lines)


def _write_registry(path: Path, cfg: GeneratorConfig, subnets: list[dict]) -> None:
    rows = []
    for pi, prof in enumerate(cfg.profiles):
        nets = [s for s in subnets if s["profile"] == pi]
        lo = ipaddress.IPv4Address(nets[0]["network"])
        hi = ipaddress.IPv4Address(nets[-1]["network"] + 255)
        tag = "".join(ch for ch in prof.dba_name.upper() if ch.isalnum())
        blocks = list(ipaddress.summarize_address_range(lo, hi))
        handles = []
        for bi, block in enumerate(blocks):
            h = f"NET-{tag}-{bi}"
            handles.append((block, h))
            rows.append([str(block), h, "", prof.org_name])
        for s in nets:
            if not s["reassigned"]:
                continue
            net = ipaddress.IPv4Network((s["network"], 28))
            parent = next(h for b, h in handles if net.subnet_of(b))
            rows.append([str(net), f"NET-CUST-{s['network']:x}", parent, f"Customer {s['network'] % 9973} LLC"])
    rows.sort(key=lambda r: (int(ipaddress.ip_network(r[0]).network_address), ipaddress.ip_network(r[0]).prefixlen))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cidr", "net_handle", "parent_handle", "org_name"])
        w.writerows(rows)


def grid_layer(region: CityRegion, seed: int, n_side: int = 8) -> list[Polygon]:
    """Square tracts over the region in its local plane, with a smooth income gradient.

    ``log_income`` rises west to east plus tract noise; ``density`` falls
    with distance from the centre.
    """
    rng = _rng(seed, 99)
    half = region.radius_m
    step = 2 * half / n_side
    polys = []
    for i in range(n_side):
        for j in range(n_side):
            x0, y0 = -half + i * step, -half + j * step
            cx, cy = x0 + step / 2, y0 + step / 2
            income = 10.5 + 1.0 * cx / half + 0.15 * rng.normal()
            density = 8000.0 * math.exp(-math.hypot(cx, cy) / 20000.0)
            ring = np.array([(x0, y0), (x0 + step, y0), (x0 + step, y0 + step), (x0, y0 + step), (x0, y0)])
            polys.append(
                Polygon(
                    f"T{i:02d}{j:02d}",
                    {"log_income": f"{income:.6f}", "density": f"{density:.3f}"},
                    [ring],
                )
            )
    return polys


def write_grid_layer(path: Path, region: CityRegion, seed: int, n_side: int = 8) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# planar tracts about ({region.center_lat}, {region.center_lon})\n")
        for poly in grid_layer(region, seed, n_side):
            fh.write(format_polygon(poly) + "\n")


def write_run_config(paths: GeneratedPaths, cfg: GeneratorConfig) -> None:
    import yaml

    end = date.fromordinal(cfg.start_date.toordinal() + cfg.n_nights)
    doc = {
        "clusters": paths.clusters.name,
        "registry": paths.registry.name,
        "snapshots": [
            {"provider": prov, "path": p.name, "valid_from": cfg.start_date.isoformat(), "valid_to": end.isoformat()}
            for prov, p in paths.geodbs.items()
        ],
        "utc_offset_hours": cfg.utc_offset_hours,
        "regions": [asdict(r) for r in cfg.regions],
    }
    if paths.polygons is not None:
        doc["polygons"] = {"path": paths.polygons.name, "geographic": False, "attribute": "log_income"}
    paths.run_config.write_text(yaml.safe_dump(doc, sort_keys=True), encoding="utf-8")


# -- oracle ------------------------------------------------------------------------


def rayleigh_quantile(sigma: float, q: float) -> float:
    return sigma * math.sqrt(-2.0 * math.log(1.0 - q))


def expected_metrics(sidecar: dict | str | Path, quantiles=(0.10, 0.25, 0.50, 0.75, 0.90)) -> dict:
    """Closed-form expectations implied by the generative truth."""
    if not isinstance(sidecar, dict):
        sidecar = json.loads(Path(sidecar).read_text(encoding="utf-8"))
    n_nights = sidecar["n_nights"]
    out: dict = {"churn": {}, "error_quantiles_m": {}, "scale_median_m": {}, "movement_m": 0.0}
    eph = {s["subnet"]: s["ephemeral"] for s in sidecar["subnets"]}
    for prof in sidecar["profiles"]:
        if prof["modality"] != "fixed":
            continue
        devs = [d for d in sidecar["devices"] if d["isp"] == prof["dba_name"]]
        if not devs:
            continue
        w_eph = sum(eph[d["subnet"]] for d in devs) / len(devs)
        p = prof["stickiness"]
        out["churn"][prof["dba_name"]] = [1.0] + [(1 - w_eph) * p**d for d in range(1, n_nights)]
    for m in sidecar["db_models"]:
        if m["mode"] == "offset_gaussian":
            out["error_quantiles_m"][m["provider"]] = {q: rayleigh_quantile(m["sigma_m"], q) for q in quantiles}
        elif m["mode"] == "perfect":
            out["error_quantiles_m"][m["provider"]] = {q: 0.0 for q in quantiles}
    # a uniform disc of radius R: the nearest fraction f fills radius sqrt(f) R
    radii = [s["disc_radius_m"] for s in sidecar["subnets"] if s["scale_m"] is not None]
    if radii:
        med = float(np.median(radii))
        for f in (0.5, 0.75, 0.9, 1.0):
            out["scale_median_m"][f] = math.sqrt(math.pi * f) * med
    out["too_close_share"] = {sidecar["echo"]["provider"]: sidecar["echo"]["share"]} if sidecar["echo"]["provider"] else {}
    return out


def load_generator_config(doc: dict) -> GeneratorConfig:
    """Build a GeneratorConfig from a parsed YAML mapping."""
    doc = dict(doc)
    profiles = [IspProfile(**{k: (tuple(v) if k == "scale_range_m" and v else v) for k, v in p.items()})
                for p in doc.pop("profiles")]
    regions = tuple(CityRegion(**r) for r in doc.pop("regions", [])) or (CHICAGO,)
    models = tuple(DbErrorModel(**{k: (tuple(v) if k == "default_point" and v else v) for k, v in m.items()})
                   for m in doc.pop("db_models", [{}]))
    if "start_date" in doc and isinstance(doc["start_date"], str):
        doc["start_date"] = date.fromisoformat(doc["start_date"])
    doc.pop("seed", None)
    return GeneratorConfig(profiles=profiles, regions=regions, db_models=models, **doc)
