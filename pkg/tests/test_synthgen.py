import filecmp
import json
import math
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy import stats

from subnetgeo.config import load_run_config
from subnetgeo.core import parse_clusters
from subnetgeo.geodesy import LocalProjection
from subnetgeo.metrics import ScaleConfig, subnet_aggregate
from subnetgeo.synthgen import (
    CHICAGO,
    DbErrorModel,
    GeneratorConfig,
    InfeasibleParameters,
    IspProfile,
    expected_metrics,
    generate,
    load_generator_config,
    rayleigh_quantile,
)

SMALL_YAML = Path(__file__).resolve().parents[1] / "configs" / "generate_small.yaml"


def small_config() -> GeneratorConfig:
    return load_generator_config(yaml.safe_load(SMALL_YAML.read_text()))


def test_same_seed_gives_identical_bytes(tmp_path):
    a = generate(small_config(), 7, tmp_path / "a")
    generate(small_config(), 7, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == [] and len(match) == len(names) >= 6
    generate(small_config(), 8, tmp_path / "c")
    assert a.clusters.read_bytes() != (tmp_path / "c" / "clusters.csv").read_bytes()


def test_generated_rows_pass_all_cuts(tmp_path):
    paths = generate(small_config(), 3, tmp_path)
    cfg = load_run_config(paths.run_config)
    with open(paths.clusters, newline="") as fh:
        kept, tally = parse_clusters(fh, cfg.policy)
    assert tally.total > 1000 and tally.accepted == tally.total


def test_rayleigh_oracle_matches_scipy():
    for q in (0.1, 0.5, 0.9):
        assert rayleigh_quantile(1000.0, q) == pytest.approx(stats.rayleigh.ppf(q, scale=1000.0), rel=1e-12)
    assert rayleigh_quantile(1000.0, 0.5) == pytest.approx(1177.41, abs=0.01)


def test_expected_metrics_from_sidecar(tmp_path):
    cfg = GeneratorConfig(
        profiles=[IspProfile("Sticky", "Sticky Cable LLC", subnet_count=5, stickiness=0.99)],
        db_models=[DbErrorModel("g", "offset_gaussian", sigma_m=1000.0)],
        n_devices=50,
        n_nights=31,
    )
    paths = generate(cfg, 1, tmp_path)
    exp = expected_metrics(paths.sidecar)
    assert exp["churn"]["Sticky"][30] == pytest.approx(0.99**30) == pytest.approx(0.7397, abs=1e-4)
    assert exp["error_quantiles_m"]["g"][0.5] == pytest.approx(1177.41, abs=0.01)
    side = json.loads(paths.sidecar.read_text())
    radii = [s["disc_radius_m"] for s in side["subnets"]]
    assert exp["scale_median_m"][1.0] == pytest.approx(math.sqrt(math.pi) * float(np.median(radii)))


@pytest.mark.parametrize(
    "cfg",
    [
        GeneratorConfig(profiles=[IspProfile("X", "X", subnet_count=1, stickiness=1.0)], n_devices=300, n_nights=1),
        GeneratorConfig(profiles=[IspProfile("X", "X", modality="satellite")]),
        GeneratorConfig(profiles=[IspProfile("X", "X", stickiness=1.5)]),
        GeneratorConfig(profiles=[]),
        GeneratorConfig(profiles=[IspProfile("X", "X")], db_models=[DbErrorModel("a"), DbErrorModel("a")]),
    ],
)
def test_infeasible_parameters(tmp_path, cfg):
    with pytest.raises(InfeasibleParameters):
        generate(cfg, 0, tmp_path)


def test_hull_scales_reproduce_generative_median(tmp_path):
    cfg = GeneratorConfig(
        profiles=[IspProfile("Big", "Big Cable LLC", subnet_count=9, scale_median_m=4000.0, stickiness=0.5)],
        db_models=[DbErrorModel("g", "perfect")],
        n_devices=9000,
        n_nights=1,
    )
    paths = generate(cfg, 4, tmp_path, polygons=False)
    run = load_run_config(paths.run_config)
    with open(paths.clusters, newline="") as fh:
        clusters, _ = parse_clusters(fh, run.policy)
    aggs = subnet_aggregate(clusters, ScaleConfig(fractions=(0.9,)), LocalProjection(CHICAGO.center))
    measured = np.median([a.scale(0.9) for a in aggs.values() if a.scale(0.9) is not None])
    assert min(a.devices for a in aggs.values()) > 700
    assert measured == pytest.approx(expected_metrics(paths.sidecar)["scale_median_m"][0.9], rel=0.15)
