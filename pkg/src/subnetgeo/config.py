"""Run configuration: a YAML document resolved against its own directory."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import yaml

from .core import FORTY_MILES_M, CityRegion, ConfigError, FilterPolicy
from .metrics.subnets import DEFAULT_FRACTIONS, ScaleConfig

ALL_METRICS = (
    "quantiles",
    "compare",
    "classes",
    "scale",
    "visits",
    "churn",
    "movement",
    "modality",
    "attenuation",
)


@dataclass
class SnapshotSpec:
    provider: str
    path: Path
    valid_from: date | None = None
    valid_to: date | None = None


@dataclass
class PolygonSpec:
    path: Path
    geographic: bool = False
    attribute: str | None = None  # attenuation target
    region: str | None = None  # projection origin; first region when None


@dataclass
class RunConfig:
    clusters: Path
    registry: Path
    snapshots: list[SnapshotSpec]
    rules: Path | None = None
    nic_table: Path | None = None
    polygons: PolygonSpec | None = None
    policy: FilterPolicy = field(default_factory=FilterPolicy)
    utc_offset_hours: float = 0.0
    scale: ScaleConfig = field(default_factory=ScaleConfig)
    too_close_m: float = 25.0
    churn_d_max: int = 60
    movement_periods: tuple[tuple[date, date], tuple[date, date]] | None = None
    metrics: tuple[str, ...] = ALL_METRICS
    out_dir: Path | None = None
    seed: int = 0

    @property
    def regions(self) -> tuple[CityRegion, ...]:
        return self.policy.regions


def _date(v) -> date | None:
    if v is None or isinstance(v, date):
        return v
    try:
        return date.fromisoformat(str(v))
    except ValueError:
        raise ConfigError(f"bad date {v!r}") from None


def _existing(base: Path, value, what: str) -> Path:
    if value is None:
        raise ConfigError(f"missing required key {what!r}")
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if not p.exists():
        raise ConfigError(f"{what} file not found: {p}")
    return p


def parse_metrics(text: str | list | tuple | None) -> tuple[str, ...]:
    if text is None:
        return ALL_METRICS
    items = [s.strip() for s in text.split(",")] if isinstance(text, str) else [str(s).strip() for s in text]
    items = [s for s in items if s]
    unknown = sorted(set(items) - set(ALL_METRICS))
    if unknown:
        raise ConfigError(f"unknown metrics: {', '.join(unknown)} (known: {', '.join(ALL_METRICS)})")
    return tuple(m for m in ALL_METRICS if m in items)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return run_config_from_dict(doc, path.parent)


def run_config_from_dict(doc: dict, base: Path) -> RunConfig:
    base = Path(base)
    snaps = []
    for s in doc.get("snapshots") or []:
        if "provider" not in s:
            raise ConfigError("each snapshot needs a provider label")
        snaps.append(
            SnapshotSpec(
                str(s["provider"]),
                _existing(base, s.get("path"), f"snapshot {s['provider']}"),
                _date(s.get("valid_from")),
                _date(s.get("valid_to")),
            )
        )
    _check_windows(snaps)

    regions = tuple(
        CityRegion(
            str(r["name"]),
            float(r["center_lat"]),
            float(r["center_lon"]),
            float(r.get("radius_m", FORTY_MILES_M)),
        )
        for r in doc.get("regions") or []
    )
    f = doc.get("filter") or {}
    policy = FilterPolicy(
        max_accuracy_m=float(f.get("max_accuracy_m", 50.0)),
        min_coord_decimals=int(f.get("min_coord_decimals", 5)),
        exclude_special_use=bool(f.get("exclude_special_use", True)),
        exclude_foreign_registry=bool(f.get("exclude_foreign_registry", True)),
        regions=regions,
    )
    sc = doc.get("scale") or {}
    scale = ScaleConfig(
        fractions=tuple(float(x) for x in sc.get("fractions", DEFAULT_FRACTIONS)),
        min_devices=int(sc.get("min_devices", 10)),
        min_addresses=int(sc.get("min_addresses", 10)),
        error_cap_m=float(sc.get("error_cap_m", 100_000.0)),
        unique_points=bool(sc.get("unique_points", False)),
    )
    if any(not 0 < x <= 1 for x in scale.fractions):
        raise ConfigError("scale fractions must lie in (0, 1]")

    poly = None
    if doc.get("polygons"):
        p = doc["polygons"]
        if isinstance(p, str):
            p = {"path": p}
        poly = PolygonSpec(
            _existing(base, p.get("path"), "polygons"),
            bool(p.get("geographic", False)),
            p.get("attribute"),
            p.get("region"),
        )

    periods = None
    if doc.get("movement"):
        m = doc["movement"]
        try:
            p1 = (_date(m["period1"][0]), _date(m["period1"][1]))
            p2 = (_date(m["period2"][0]), _date(m["period2"][1]))
        except (KeyError, IndexError, TypeError):
            raise ConfigError("movement needs period1: [start, end] and period2: [start, end]") from None
        periods = (p1, p2)

    return RunConfig(
        clusters=_existing(base, doc.get("clusters"), "clusters"),
        registry=_existing(base, doc.get("registry"), "registry"),
        snapshots=snaps,
        rules=_existing(base, doc["rules"], "rules") if doc.get("rules") else None,
        nic_table=_existing(base, doc["nic_table"], "nic_table") if doc.get("nic_table") else None,
        polygons=poly,
        policy=policy,
        utc_offset_hours=float(doc.get("utc_offset_hours", 0.0)),
        scale=scale,
        too_close_m=float(doc.get("too_close_m", 25.0)),
        churn_d_max=int((doc.get("churn") or {}).get("d_max", 60)),
        movement_periods=periods,
        metrics=parse_metrics(doc.get("metrics")),
        out_dir=Path(doc["out"]) if doc.get("out") else None,
        seed=int(doc.get("seed", 0)),
    )


def _check_windows(snaps: list[SnapshotSpec]) -> None:
    """Snapshots sharing a provider label must not have overlapping windows."""
    by_provider: dict[str, list[SnapshotSpec]] = {}
    for s in snaps:
        if s.valid_from and s.valid_to and s.valid_from > s.valid_to:
            raise ConfigError(f"snapshot {s.provider}: valid_from after valid_to")
        by_provider.setdefault(s.provider, []).append(s)
    for prov, group in by_provider.items():
        if len(group) == 1:
            continue
        if any(s.valid_from is None or s.valid_to is None for s in group):
            raise ConfigError(f"provider {prov} has several snapshots; each needs a date window")
        group.sort(key=lambda s: s.valid_from)
        for a, b in zip(group, group[1:]):
            if b.valid_from <= a.valid_to:
                raise ConfigError(f"provider {prov}: snapshot windows overlap ({a.path.name}, {b.path.name})")
