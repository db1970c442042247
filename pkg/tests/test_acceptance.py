"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL verdict with its measured value before
asserting; the verdicts are printed as a block at the end of the run.
"""

import json
import math
import random
import time
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pytest
import yaml
from geographiclib.geodesic import Geodesic

from subnetgeo.config import load_run_config
from subnetgeo.core import CityRegion, LocationCluster, parse_clusters
from subnetgeo.enrichment import ErrorRecord, load_geodb, score_errors
from subnetgeo.geodesy import GeoPoint, LocalProjection, PolygonLayer, hull_scale, vincenty_distance
from subnetgeo.metrics import (
    ScaleConfig,
    attenuation_analysis,
    churn_curve,
    ecdf_and_quantiles,
    impute_attribute,
    scale_error_correlation,
    subnet_aggregate,
    subnet_movement,
    visit_histogram,
)
from subnetgeo.pipeline import run
from subnetgeo.synthgen import (
    CHICAGO,
    DbErrorModel,
    GeneratorConfig,
    IspProfile,
    generate,
    grid_layer,
    load_generator_config,
    rayleigh_quantile,
)
from test_geodesy import brute_force_area, oracle_selection, random_point_set
from test_metrics import err, sort_interpolate

STUDY_REGIONS = (
    CHICAGO,
    CityRegion("New York", 40.7128, -74.0060),
    CityRegion("Philadelphia", 39.9526, -75.1652),
)
COMCAST = ("Comcast", "Comcast Cable Communications, LLC")


def load_world(paths):
    cfg = load_run_config(paths.run_config)
    with open(paths.clusters, newline="") as fh:
        clusters, tally = parse_clusters(fh, cfg.policy)
    return cfg, clusters, tally


def test_01_geodesic_correctness(acceptance):
    geod = Geodesic.WGS84
    rng = random.Random(2024)
    worst_mm, worst_sym, worst_tri = 0.0, 0.0, 0.0
    t0 = time.perf_counter()
    for region in STUDY_REGIONS:
        pts = []
        for _ in range(3000):
            g = geod.Direct(region.center_lat, region.center_lon, rng.uniform(0, 360), region.radius_m * math.sqrt(rng.random()))
            pts.append(GeoPoint(g["lat2"], g["lon2"]))
        for i in range(1000):
            a, b, c = pts[3 * i : 3 * i + 3]
            ab = vincenty_distance(a, b)
            ref = geod.Inverse(a.lat, a.lon, b.lat, b.lon)["s12"]
            worst_mm = max(worst_mm, abs(ab - ref) * 1000)
            worst_sym = max(worst_sym, abs(ab - vincenty_distance(b, a)) / max(ab, 1.0))
            ac, bc = vincenty_distance(a, c), vincenty_distance(b, c)
            worst_tri = max(worst_tri, (ac - (ab + bc)) / max(ac, 1.0))
    elapsed = time.perf_counter() - t0
    ok = worst_mm < 1.0 and worst_sym <= 1e-6 and worst_tri <= 1e-6 and elapsed < 5.0
    acceptance(1, "geodesic correctness", ok,
               f"max |vincenty - oracle| {worst_mm:.2e} mm; symmetry {worst_sym:.1e}; triangle {worst_tri:.1e}; {elapsed:.2f} s")
    assert ok


def test_02_hull_scale_correctness(acceptance):
    rng = random.Random(99)
    mismatches = 0
    for _ in range(1000):
        pts = random_point_set(rng)
        f = rng.choice([0.1, 0.25, 0.5, 0.75, 0.9, 1.0])
        mismatches += hull_scale(pts, f).area != brute_force_area(oracle_selection(pts, f))
    nprng = np.random.default_rng(100)
    fs = np.linspace(0.02, 1.0, 50)
    monotone_failures = 0
    for _ in range(100):
        pts = nprng.normal(0, 1000, (int(nprng.integers(3, 300)), 2))
        s = [hull_scale(pts, f).scale for f in fs]
        monotone_failures += any(b < a for a, b in zip(s, s[1:]))
    ok = mismatches == 0 and monotone_failures == 0
    acceptance(2, "hull-scale correctness", ok,
               f"{mismatches}/1000 area mismatches vs brute force; {monotone_failures}/100 non-monotone sets")
    assert ok


def test_03_quantile_oracle(acceptance):
    rng = np.random.default_rng(3)
    vals = rng.lognormal(8.0, 1.2, 10000)
    qs = (0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99)
    rep = ecdf_and_quantiles([err(float(v)) for v in vals], quantiles=qs)
    stats = rep.cohorts[("p",)]
    differing = [q for q in qs if stats.quantiles[q] != sort_interpolate(vals.tolist(), q)]
    final = float(stats.ecdf.points()[1][-1])
    ok = not differing and final == 1.0
    acceptance(3, "quantile/ECDF oracle", ok, f"bit-exact at {len(qs) - len(differing)}/{len(qs)} quantiles; final ECDF share {final}")
    assert ok


@pytest.fixture(scope="module")
def churn_world(tmp_path_factory):
    cfg = GeneratorConfig(
        profiles=[IspProfile(*COMCAST, subnet_count=200, stickiness=0.99, reassigned_share=0.0)],
        db_models=[DbErrorModel("g", "perfect")],
        n_devices=10000,
        n_nights=60,
    )
    return generate(cfg, 41, tmp_path_factory.mktemp("churn"), polygons=False)


def test_04_churn_recovery(acceptance, churn_world):
    t0 = time.perf_counter()
    cfg, clusters, _ = load_world(churn_world)
    curve = churn_curve([(c, "Comcast") for c in clusters], d_max=30, utc_offset_hours=cfg.utc_offset_hours)["Comcast"]
    elapsed = time.perf_counter() - t0
    dev = max(abs(curve.share[d] - 0.99**d) for d in range(31))
    ok = dev <= 0.02 and elapsed < 60
    acceptance(4, "churn recovery", ok,
               f"max |share(d) - 0.99^d| over d<=30 = {dev:.4f}; share(30) {curve.share[30]:.4f}; {elapsed:.1f} s")
    assert ok


def test_05_error_model_recovery(acceptance, tmp_path):
    # many tiny subnets so that each report's error is one draw of the DB offset
    cfg = GeneratorConfig(
        profiles=[IspProfile(*COMCAST, subnet_count=5000, scale_median_m=1.0, stickiness=0.99)],
        db_models=[DbErrorModel("g", "offset_gaussian", sigma_m=1000.0)],
        n_devices=10000,
        n_nights=10,
    )
    paths = generate(cfg, 5, tmp_path, polygons=False)
    _, clusters, _ = load_world(paths)
    errors = score_errors(clusters, load_geodb(paths.geodbs["g"], "g"))
    med = float(np.median([e.error_m for e in errors]))
    target = rayleigh_quantile(1000.0, 0.5)
    rel = med / target - 1
    ok = len(errors) >= 100_000 and abs(rel) <= 0.03
    acceptance(5, "error-model recovery", ok, f"median {med:.1f} m vs Rayleigh {target:.1f} m ({rel:+.2%}) over {len(errors)} reports")
    assert ok


def _scale_world(tmp_path, model, scale_range, subnets, devices, seed):
    cfg = GeneratorConfig(
        profiles=[IspProfile(*COMCAST, subnet_count=subnets, scale_range_m=scale_range, stickiness=0.99)],
        db_models=[model],
        n_devices=devices,
        n_nights=1,
    )
    paths = generate(cfg, seed, tmp_path, polygons=False)
    _, clusters, _ = load_world(paths)
    errors = score_errors(clusters, load_geodb(paths.geodbs[model.provider], model.provider))
    aggs = subnet_aggregate(clusters, ScaleConfig(fractions=(0.75,)), LocalProjection(CHICAGO.center), errors)
    return scale_error_correlation(aggs, 0.75)


def test_06_scale_error_relationship(acceptance, tmp_path):
    linked = _scale_world(tmp_path / "a", DbErrorModel("g", "subnet_centroid"), (1000.0, 50000.0), 200, 6000, 6)
    # DB offsets of tens of km dwarf the 1-3 km subnet sizes, so error carries no scale signal
    indep = _scale_world(tmp_path / "b", DbErrorModel("g", "offset_gaussian", sigma_m=30000.0), (1000.0, 3000.0), 600, 15000, 7)
    ok = linked.r >= 0.6 and indep.n >= 500 and abs(indep.r) < 0.1
    acceptance(6, "scale-error relationship", ok,
               f"centroid DB r = {linked.r:.3f} (n={linked.n}); independent r = {indep.r:+.3f} (n={indep.n})")
    assert ok


def test_07_movement_null(acceptance, tmp_path):
    proj = LocalProjection(CHICAGO.center)

    def period(stream):
        cfg = GeneratorConfig(
            profiles=[IspProfile(*COMCAST, subnet_count=50, scale_median_m=2000.0, stickiness=0.99)],
            db_models=[DbErrorModel("g", "perfect")],
            n_devices=10000,
            n_nights=1,
            device_stream=stream,
        )
        _, clusters, _ = load_world(generate(cfg, 70, tmp_path / f"s{stream}", polygons=False))
        return clusters

    p1, p2 = period(0), period(1)
    scfg = ScaleConfig(fractions=())
    null = subnet_movement(subnet_aggregate(p1, scfg, proj), subnet_aggregate(p2, scfg, proj))
    x, y = proj.forward([c.lat for c in p1], [c.lon for c in p1])
    lat, lon = proj.inverse(x + 500.0, y)
    moved = [
        LocationCluster(c.device_id, c.t_start, c.t_end, float(a), float(b), c.accuracy_m, c.coord_decimals,
                        c.cluster_class, c.ip, c.bump_count, c.truncated)
        for c, a, b in zip(p1, lat.tolist(), lon.tolist())
    ]
    shift = subnet_movement(subnet_aggregate(p1, scfg, proj), subnet_aggregate(moved, scfg, proj))
    worst = max(abs(d - 500.0) for d in shift.displacements.values())
    ok = null.median() < 200.0 and worst <= 1.0 and len(shift.displacements) == 50
    acceptance(7, "movement null", ok,
               f"resampled median displacement {null.median():.1f} m; planted 500 m recovered within {worst:.2e} m")
    assert ok


def test_08_ephemeral_pool_signature(acceptance, tmp_path):
    cfg = GeneratorConfig(
        profiles=[IspProfile(*COMCAST, subnet_count=40, stickiness=0.99, ephemeral_share=0.5)],
        db_models=[DbErrorModel("g", "perfect")],
        n_devices=2000,
        n_nights=30,
    )
    paths = generate(cfg, 8, tmp_path, polygons=False)
    _, clusters, _ = load_world(paths)
    side = json.loads(paths.sidecar.read_text())
    eph = {s["subnet"] for s in side["subnets"] if s["ephemeral"]}
    eph_share = visit_histogram(clusters, lambda k: str(k) in eph).weighted().get(1, 0.0)
    sticky_share = visit_histogram(clusters, lambda k: str(k) not in eph).weighted().get(1, 0.0)
    ok = eph and eph_share > 0.4 and sticky_share < 0.1
    acceptance(8, "ephemeral-pool signature", ok,
               f"bin-1 visit-weighted share: ephemeral {eph_share:.3f}, sticky {sticky_share:.3f} ({len(eph)} ephemeral subnets)")
    assert ok


def test_09_attenuation(acceptance, tmp_path):
    cfg = GeneratorConfig(
        profiles=[IspProfile(*COMCAST, subnet_count=20, stickiness=1.0)],
        db_models=[DbErrorModel("g", "perfect")],
        n_devices=2000,
        n_nights=5,
    )
    paths = generate(cfg, 9, tmp_path, polygons=False)
    _, clusters, _ = load_world(paths)
    proj = LocalProjection(CHICAGO.center)
    layer = PolygonLayer(grid_layer(CHICAGO, 9))
    exact = score_errors(clusters, load_geodb(paths.geodbs["g"], "g"))
    t, m, _ = impute_attribute(exact, layer, proj, "log_income")
    zero = attenuation_analysis(t, m)
    # relocate each prediction to a uniform random point of the layer's square
    rng = np.random.default_rng(10)
    half = CHICAGO.radius_m * 0.999
    plat, plon = proj.inverse(rng.uniform(-half, half, len(exact)), rng.uniform(-half, half, len(exact)))
    moved = [ErrorRecord(e.cluster, "g", GeoPoint(a, b), 0.0, None, False) for e, a, b in zip(exact, plat.tolist(), plon.tolist())]
    t2, m2, _ = impute_attribute(moved, layer, proj, "log_income")
    rand = attenuation_analysis(t2, m2)
    ok = len(exact) >= 10000 and abs(zero.slope - 1) <= 0.01 and abs(rand.slope) <= 0.05
    acceptance(9, "attenuation", ok, f"zero-error slope {zero.slope:.4f} (n={zero.n}); random relocation slope {rand.slope:+.4f} (n={rand.n})")
    assert ok


def test_10_echo_artifact(acceptance, tmp_path):
    cfg = GeneratorConfig(
        profiles=[IspProfile(*COMCAST, subnet_count=100, stickiness=0.99)],
        db_models=[DbErrorModel("g", "offset_gaussian", sigma_m=1000.0, echo_share=0.05)],
        n_devices=2000,
        n_nights=10,
    )
    paths = generate(cfg, 10, tmp_path, polygons=False)
    _, clusters, _ = load_world(paths)
    errors = score_errors(clusters, load_geodb(paths.geodbs["g"], "g"))
    share = sum(e.too_close for e in errors) / len(errors)
    ok = abs(share - 0.05) <= 0.01
    acceptance(10, "echo-artifact detection", ok, f"too_close share {share:.4f} over {len(errors)} reports (planted 0.05)")
    assert ok


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_11_determinism_and_accounting(acceptance, tmp_path):
    gen = yaml.safe_load((Path(__file__).resolve().parents[1] / "configs" / "generate_small.yaml").read_text())
    paths = generate(load_generator_config(gen), 11, tmp_path / "data")
    # rows that must be rejected, so the accounting check is not vacuous
    with open(paths.clusters, "a") as fh:
        fh.write("bad,row\n")
        fh.write("dx,2020-08-01T05:00:00Z,2020-08-01T06:00:00Z,41.878100,-87.629800,80,PING,64.0.0.9,2\n")
        fh.write("dx,2020-08-01T05:00:00Z,2020-08-01T06:00:00Z,41.878100,-87.629800,5,PING,10.0.0.9,2\n")
        fh.write("dx,2020-08-01T05:00:00Z,2020-08-01T06:00:00Z,40.712800,-74.006000,5,PING,64.0.0.9,2\n")
    doc = yaml.safe_load(paths.run_config.read_text())
    start = date(2020, 8, 1)
    doc["movement"] = {"period1": [str(start), str(start + timedelta(days=4))],
                       "period2": [str(start + timedelta(days=5)), str(start + timedelta(days=9))]}
    paths.run_config.write_text(yaml.safe_dump(doc))
    cfg = load_run_config(paths.run_config)
    trees, balanced = {}, []
    for n in (1, 4, 8):
        res = run(cfg, tmp_path / f"t{n}", threads=n)
        rows = res.summary["rows"]
        balanced.append(rows["accepted"] + sum(rows["rejected"].values()) == rows["total"])
        trees[n] = _tree(tmp_path / f"t{n}")
    identical = trees[1] == trees[4] == trees[8]
    ok = identical and all(balanced) and sum(rows["rejected"].values()) == 4
    acceptance(11, "determinism and accounting", ok,
               f"{len(trees[1])} files byte-identical at 1/4/8 threads: {identical}; balanced: {all(balanced)}; "
               f"{rows['accepted']} accepted + {sum(rows['rejected'].values())} rejected = {rows['total']}")
    assert ok


@pytest.fixture(scope="module")
def million_world(tmp_path_factory):
    cfg = GeneratorConfig(
        profiles=[IspProfile(*COMCAST, subnet_count=100_000, stickiness=0.99)],
        db_models=[DbErrorModel("geodb_a", "offset_gaussian", sigma_m=1000.0)],
        n_devices=20_000,
        n_nights=50,
    )
    return generate(cfg, 12, tmp_path_factory.mktemp("million"))


def test_12_throughput(acceptance, million_world, tmp_path):
    cfg = load_run_config(million_world.run_config)
    with open(million_world.geodbs["geodb_a"]) as fh:
        prefixes = sum(1 for _ in fh) - 1
    t0 = time.perf_counter()
    res = run(cfg, tmp_path / "rep", threads=4)
    elapsed = time.perf_counter() - t0
    rows = res.summary["rows"]["total"]
    ok = rows >= 1_000_000 and prefixes >= 100_000 and elapsed < 60.0
    acceptance(12, "throughput", ok, f"{rows} clusters vs {prefixes} prefixes fully reported in {elapsed:.1f} s")
    assert ok
