"""End-to-end run: parse -> filter -> enrich -> score -> metrics -> report."""

from __future__ import annotations

import gc
import logging
import time
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .core import (
    ConfigError,
    LocationCluster,
    RejectionTally,
    chunked,
    night_flags,
    parse_rows,
    read_cluster_rows,
    tabulate_classes,
)
from .enrichment import (
    ErrorRecord,
    OrgResolver,
    Registry,
    RuleTable,
    ScoreTally,
    UNKNOWN_RECORD,
    load_geodb,
    load_nic_table,
    score_errors,
)
from .geodesy import GeoPoint, LocalProjection, load_polygon_layer
from .metrics import (
    CohortColumns,
    ScaleConfig,
    attenuation_analysis,
    attribute_correlation,
    churn_curve,
    cohort_compare,
    ecdf_and_quantiles,
    impute_attribute,
    mean_error_by_subnet,
    merge_visits,
    modality_share,
    quantile_sorted,
    scale_error_correlation,
    subnet_aggregate,
    subnet_movement,
    with_mean_errors,
)
from . import report

log = logging.getLogger(__name__)

SCALE_SPLIT_M = 20_000.0  # large/small subnet boundary for the visit histogram
SCALE_SPLIT_F = 0.75


@dataclass
class Enriched:
    cluster: LocationCluster
    dba: str
    modality: str
    category: str
    city: str
    night: bool


@dataclass
class RunResult:
    out_dir: Path
    summary: dict
    files: list[str] = field(default_factory=list)


def _parse(cfg: RunConfig, threads: int) -> tuple[list[LocationCluster], RejectionTally]:
    nic = load_nic_table(cfg.nic_table).lookup if cfg.nic_table else None
    with open(cfg.clusters, newline="", encoding="utf-8") as fh:
        rows = list(read_cluster_rows(fh))
    parts = chunked(rows, threads)
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(lambda p: parse_rows(p, cfg.policy, nic), parts))
    else:
        results = [parse_rows(p, cfg.policy, nic) for p in parts]
    clusters: list[LocationCluster] = []
    tally = RejectionTally()
    for kept, t in results:
        clusters.extend(kept)
        tally = tally + t
    return clusters, tally


def _enrich(cfg: RunConfig, clusters, resolver: OrgResolver, tally: Counter) -> list[Enriched]:
    n = len(clusters)
    regions = cfg.regions
    if regions:
        lat = np.fromiter((c.lat for c in clusters), dtype=float, count=n)
        lon = np.fromiter((c.lon for c in clusters), dtype=float, count=n)
        city = np.full(n, "NA", dtype=object)
        for r in reversed(regions):  # first listed region wins
            city[r.contains_many(lat, lon)] = r.name
        cities = city.tolist()
    else:
        cities = ["all"] * n
    nights = night_flags(clusters, cfg.utc_offset_hours).tolist()
    out = []
    for c, cname, night in zip(clusters, cities, nights):
        if c.subnet is None:
            dba, modality, category = "special_use", "NA", "other"
            tally["special_use"] += 1
        else:
            rec, oc = resolver(c.subnet)
            dba, modality, category = oc.dba_name, oc.modality, oc.category
            if rec is UNKNOWN_RECORD:
                tally["registry_unknown"] += 1
        out.append(Enriched(c, dba, modality, category, cname, night))
    return out


def _score(cfg: RunConfig, enriched: list[Enriched], stally: ScoreTally) -> list[ErrorRecord]:
    records: list[ErrorRecord] = []
    for spec in cfg.snapshots:
        snap = load_geodb(spec.path, spec.provider, spec.valid_from, spec.valid_to)
        subset = [e for e in enriched if snap.covers(e.cluster.t_start.date())]
        if not subset:
            raise ConfigError(
                f"snapshot {spec.provider} ({spec.path.name}) window {spec.valid_from}..{spec.valid_to} "
                "matches no cluster dates"
            )
        stally.misses[f"{spec.provider}:outside_window"] += len(enriched) - len(subset)
        recs = score_errors([e.cluster for e in subset], snap, cfg.too_close_m, stally)
        by_id = {id(e.cluster): e for e in subset}
        for r in recs:
            e = by_id[id(r.cluster)]
            r.tags.update(dba=e.dba, modality=e.modality, category=e.category, city=e.city, night=e.night)
        records.extend(recs)
    return records


def _fixed_isp(e) -> bool:
    return e.modality == "fixed" and e.category == "consumer_isp"


def _aggregate_by_region(cfg: RunConfig, items: list[Enriched], scfg: ScaleConfig):
    """Subnet aggregates per region, each in its own projection."""
    out = {}
    for region in cfg.regions or ():
        members = [e.cluster for e in items if e.city == region.name]
        if members:
            proj = LocalProjection(region.center)
            out[region.name] = (proj, subnet_aggregate(members, scfg, proj))
    if not cfg.regions and items:
        lat = float(np.median([e.cluster.lat for e in items]))
        lon = float(np.median([e.cluster.lon for e in items]))
        proj = LocalProjection(GeoPoint(lat, lon))
        out["all"] = (proj, subnet_aggregate([e.cluster for e in items], scfg, proj))
    return out


def run(cfg: RunConfig, out_dir: str | Path, threads: int = 1, metrics: tuple[str, ...] | None = None) -> RunResult:
    """Execute the pipeline and write the report tree to ``out_dir``.

    On failure, whatever was written is left in place next to an
    ``INCOMPLETE`` marker and a summary with status "failed".
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "INCOMPLETE"
    marker.write_text("run did not finish\n", encoding="utf-8")
    writer = report.ReportWriter(out)
    summary: dict = {"status": "running", "versions": {"subnetgeo": __version__, "numpy": np.__version__}}
    # millions of long-lived records make cyclic GC passes dominate; nothing here builds cycles
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        _run(cfg, writer, summary, threads, metrics or cfg.metrics)
    except Exception as exc:
        summary["status"] = "failed"
        summary["error"] = f"{type(exc).__name__}: {exc}"
        writer.json("summary.json", summary)
        raise
    finally:
        if gc_was_enabled:
            gc.enable()
    summary["status"] = "ok"
    writer.json("summary.json", summary)
    marker.unlink()
    return RunResult(out, summary, sorted(writer.written))


def _run(cfg: RunConfig, w: "report.ReportWriter", summary: dict, threads: int, metrics) -> None:
    summary["metrics"] = list(metrics)
    sw = _Stopwatch()
    clusters, tally = _parse(cfg, threads)
    sw.lap("parse")
    summary["rows"] = tally.as_dict()
    if not tally.balanced:
        raise AssertionError("row accounting does not balance")
    log.info("parsed %d rows, accepted %d", tally.total, tally.accepted)

    rules = RuleTable.load(cfg.rules) if cfg.rules else RuleTable()
    resolver = OrgResolver(Registry.load(cfg.registry), rules)
    etally: Counter = Counter()
    enriched = _enrich(cfg, clusters, resolver, etally)
    sw.lap("enrich")
    summary["enrichment"] = dict(sorted(etally.items()))

    stally = ScoreTally()
    errors = _score(cfg, enriched, stally)
    summary["scoring"] = {
        "scored": dict(sorted(stally.scored.items())),
        "misses": dict(sorted(stally.misses.items())),
        "too_close": dict(sorted(stally.too_close.items())),
        "too_close_m": cfg.too_close_m,
    }
    providers = sorted({s.provider for s in cfg.snapshots})

    sw.lap("score")
    if "classes" in metrics:
        w.class_table(tabulate_classes(clusters))
        w.nic_table(tally)

    sw.lap("classes")
    if "quantiles" in metrics:
        omitted = Counter()
        cols = CohortColumns(errors)
        for name, dims in report.QUANTILE_GROUPINGS.items():
            rep = ecdf_and_quantiles(cols, dims)
            omitted.update(rep.omitted)
            w.quantile_table(f"quantiles_{name}.csv", rep)
            if name == "city_provider_dba":
                w.ecdf_files(rep)
        w.too_close_table(errors)
        summary["quantiles"] = {"omitted": dict(omitted)}

    sw.lap("quantiles")
    if "compare" in metrics:
        rows = []
        for (prov, dba), recs in sorted(_group(errors, lambda r: (r.provider, r.tags["dba"])).items()):
            rep = ecdf_and_quantiles(recs, ("travel",))
            a, b = rep.cohorts.get(("travel",)), rep.cohorts.get(("non_travel",))
            if a and b:
                d = cohort_compare(a.ecdf, b.ecdf)
                rows.append((prov, dba, a.n, b.n, d.median_ratio, d.ks))
        w.compare_table(rows)

    sw.lap("compare")
    fixed = [e for e in enriched if _fixed_isp(e)]
    need_aggs = {"scale", "visits", "attenuation"} & set(metrics)
    regional = _aggregate_by_region(cfg, fixed, cfg.scale) if need_aggs else {}

    sw.lap("aggregate")
    if "scale" in metrics:
        fixed_errors = [r for r in errors if r.tags["modality"] == "fixed" and r.tags["category"] == "consumer_isp"]
        corr = {}
        per_provider_means = {}
        for prov in providers:
            means = mean_error_by_subnet((r for r in fixed_errors if r.provider == prov), cfg.scale.error_cap_m)
            per_provider_means[prov] = means
            for f in cfg.scale.fractions:
                allaggs = {}
                for _, (_, aggs) in sorted(regional.items()):
                    allaggs.update(with_mean_errors(aggs, means))
                c = scale_error_correlation(allaggs, f)
                corr[f"{prov}@f={f:g}"] = {"r": c.r, "p_value": c.p_value, "n": c.n}
        w.scale_table(regional, cfg.scale, per_provider_means)
        summary["scale_error_correlation"] = corr
        summary["subnets"] = {
            name: {
                "total": len(aggs),
                "passing": sum(a.passes(cfg.scale.min_devices, cfg.scale.min_addresses) for a in aggs.values()),
            }
            for name, (_, aggs) in sorted(regional.items())
        }

    sw.lap("scale")
    if "visits" in metrics:
        groups = {"all": [], "scale_le_20km": [], "scale_gt_20km": []}
        for _, (_, aggs) in sorted(regional.items()):
            for a in aggs.values():
                if not a.passes(cfg.scale.min_devices, cfg.scale.min_addresses):
                    continue
                groups["all"].append(a)
                s = a.scale(SCALE_SPLIT_F) if SCALE_SPLIT_F in a.scales else None
                if s is not None:
                    groups["scale_gt_20km" if s > SCALE_SPLIT_M else "scale_le_20km"].append(a)
        w.visit_table({k: merge_visits(v) for k, v in groups.items()})

    sw.lap("visits")
    if "churn" in metrics:
        night_fixed = [(e.cluster, e.dba) for e in fixed if e.night]
        curves = churn_curve(night_fixed, cfg.churn_d_max, cfg.utc_offset_hours, threads=threads)
        w.churn_table(curves)

    sw.lap("churn")
    if "movement" in metrics and cfg.movement_periods:
        (a0, a1), (b0, b1) = cfg.movement_periods
        rows, persist = [], []
        for region in cfg.regions:
            proj = LocalProjection(region.center)
            p1 = [e.cluster for e in fixed if e.city == region.name and a0 <= e.cluster.t_start.date() <= a1]
            p2 = [e.cluster for e in fixed if e.city == region.name and b0 <= e.cluster.t_start.date() <= b1]
            mv = subnet_movement(
                subnet_aggregate(p1, _no_scales(cfg.scale), proj),
                subnet_aggregate(p2, _no_scales(cfg.scale), proj),
                cfg.scale.min_devices,
                cfg.scale.min_addresses,
            )
            rows.extend((region.name, k, d) for k, d in mv.displacements.items())
            persist.extend((region.name, p) for p in mv.persistence)
        w.movement_tables(rows, persist)
        disp = sorted(d for _, _, d in rows)
        summary["movement"] = {"n": len(disp), "median_m": quantile_sorted(disp, 0.5) if disp else None}

    sw.lap("movement")
    if cfg.polygons and ({"modality", "attenuation"} & set(metrics)):
        _polygon_metrics(cfg, w, summary, metrics, enriched, errors, providers)
        sw.lap("polygons")


class _Stopwatch:
    """Stage timings for debug logs; never written to the report."""

    def __init__(self):
        self.t = time.perf_counter()

    def lap(self, stage: str) -> None:
        now = time.perf_counter()
        log.debug("stage %s: %.2fs", stage, now - self.t)
        self.t = now


def _no_scales(scfg: ScaleConfig) -> ScaleConfig:
    return ScaleConfig(fractions=(), min_devices=scfg.min_devices, min_addresses=scfg.min_addresses,
                       error_cap_m=scfg.error_cap_m)


def _group(items, key):
    out = defaultdict(list)
    for it in items:
        out[key(it)].append(it)
    return out


def _polygon_metrics(cfg, w, summary, metrics, enriched, errors, providers) -> None:
    spec = cfg.polygons
    layer = load_polygon_layer(spec.path, geographic=spec.geographic)
    region = next((r for r in cfg.regions if r.name == spec.region), cfg.regions[0] if cfg.regions else None)
    if region is None:
        raise ConfigError("polygon metrics need at least one region for the projection origin")
    proj = LocalProjection(region.center)
    layer = layer.projected(proj)
    in_region = [e for e in enriched if e.city == region.name]

    if "modality" in metrics:
        # night flags were computed during enrichment
        shares = modality_share([(e.cluster, e.modality) for e in in_region if e.night], layer, proj, night_only=False)
        w.modality_table(shares)

    # tract median error vs numeric attributes
    corr = {}
    region_errors = [r for r in errors if r.tags["city"] == region.name]
    for prov in providers:
        recs = [r for r in region_errors if r.provider == prov]
        if not recs:
            continue
        gx, gy = proj.forward([r.cluster.lat for r in recs], [r.cluster.lon for r in recs])
        where = layer.locate(gx, gy)
        per_poly = defaultdict(list)
        for r, k in zip(recs, where.tolist()):
            if k >= 0:
                per_poly[k].append(r.error_m)
        med = [quantile_sorted(sorted(per_poly[k]), 0.5) if per_poly.get(k) else None for k in range(len(layer))]
        attrs = sorted({a for p in layer for a in p.attributes})
        for a in attrs:
            vals = []
            for p in layer:
                try:
                    vals.append(float(p.attributes[a]))
                except (KeyError, ValueError):
                    vals.append(None)
            c = attribute_correlation(med, vals)
            corr[f"{prov}:median_error~{a}"] = {"r": c.r, "p_value": c.p_value, "n": c.n}
    summary["attribute_correlation"] = corr

    if "attenuation" in metrics and spec.attribute:
        results = {}
        for prov in providers:
            recs = [r for r in region_errors if r.provider == prov and r.tags["modality"] == "fixed"
                    and r.tags["category"] == "consumer_isp"]
            if not recs:
                continue
            t, m, tally = impute_attribute(recs, layer, proj, spec.attribute)
            results[prov] = (attenuation_analysis(t, m), dict(sorted(tally.items())))
        w.attenuation_table(results, spec.attribute)
        summary["attenuation"] = {
            prov: {"slope": res.slope, "intercept": res.intercept, "n": res.n, "excluded": res.excluded, "tally": tl}
            for prov, (res, tl) in results.items()
        }
