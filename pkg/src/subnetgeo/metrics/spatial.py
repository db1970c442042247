"""Polygon-level estimators: access-modality shares, attribute correlation, attenuation."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..core import LocationCluster, night_flags
from ..geodesy import LocalProjection, PolygonLayer
from .distributions import quantile_sorted
from .stats import Correlation, pearson


@dataclass
class ModalityShare:
    polygon_id: str
    mobile: int
    fixed: int

    @property
    def share(self) -> float | None:
        tot = self.mobile + self.fixed
        return self.mobile / tot if tot else None


def modality_share(
    records: Iterable[tuple[LocationCluster, str]],
    layer: PolygonLayer,
    projection: LocalProjection,
    night_only: bool = True,
    utc_offset_hours: float = 0.0,
) -> dict[str, ModalityShare]:
    """Mobile share of (night-time) clusters per polygon.

    Polygons with no classified clusters are reported with share None.
    """
    recs = [(c, m) for c, m in records if m in ("mobile", "fixed")]
    if night_only and recs:
        flags = night_flags([c for c, _ in recs], utc_offset_hours)
        recs = [r for r, ok in zip(recs, flags.tolist()) if ok]
    out = {pid: ModalityShare(pid, 0, 0) for pid in layer.ids}
    if not recs:
        return out
    lat = np.array([c.lat for c, _ in recs])
    lon = np.array([c.lon for c, _ in recs])
    x, y = projection.forward(lat, lon)
    where = layer.locate(x, y)
    ids = layer.ids
    for (_, m), k in zip(recs, where.tolist()):
        if k < 0:
            continue
        ms = out[ids[k]]
        if m == "mobile":
            ms.mobile += 1
        else:
            ms.fixed += 1
    return out


def attribute_correlation(a: Sequence[float | None], b: Sequence[float | None], weights=None) -> Correlation:
    """Pearson r across polygons, skipping polygons lacking either attribute."""
    keep = [
        i
        for i in range(len(a))
        if a[i] is not None and b[i] is not None and not (math.isnan(a[i]) or math.isnan(b[i]))
    ]
    if len(keep) < 3:
        return Correlation(math.nan, math.nan, len(keep))
    w = None if weights is None else [weights[i] for i in keep]
    return pearson([a[i] for i in keep], [b[i] for i in keep], w)


@dataclass
class DecileSummary:
    decile: int
    true_lo: float
    true_hi: float
    n: int
    imputed_quantiles: dict[float, float]


@dataclass
class AttenuationResult:
    slope: float
    intercept: float
    n: int
    excluded: int
    deciles: list[DecileSummary] = field(default_factory=list)


def attenuation_analysis(
    y_true: Sequence[float | None],
    y_imp: Sequence[float | None],
    quantiles: Sequence[float] = (0.10, 0.25, 0.50, 0.75, 0.90),
) -> AttenuationResult:
    """OLS slope of imputed on true attribute, plus imputed quantiles per decile of the truth.

    Records with either value missing (point outside the layer) are
    excluded and counted.
    """
    pairs = [
        (t, m)
        for t, m in zip(y_true, y_imp)
        if t is not None and m is not None and not (math.isnan(t) or math.isnan(m))
    ]
    excluded = len(y_true) - len(pairs)
    if len(pairs) < 2:
        return AttenuationResult(math.nan, math.nan, len(pairs), excluded)
    t = np.array([p[0] for p in pairs])
    m = np.array([p[1] for p in pairs])
    dt = t - t.mean()
    sxx = float(dt @ dt)
    slope = float(dt @ (m - m.mean()) / sxx) if sxx > 0 else math.nan
    intercept = float(m.mean() - slope * t.mean()) if sxx > 0 else math.nan
    order = np.lexsort((m, t))
    ts, ms = t[order], m[order]
    deciles = []
    n = len(ts)
    for d in range(10):
        lo, hi = (d * n) // 10, ((d + 1) * n) // 10
        if hi <= lo:
            continue
        chunk = np.sort(ms[lo:hi])
        deciles.append(
            DecileSummary(
                d, float(ts[lo]), float(ts[hi - 1]), hi - lo, {q: quantile_sorted(chunk, q) for q in quantiles}
            )
        )
    return AttenuationResult(slope, intercept, n, excluded, deciles)


def impute_attribute(
    errors: Sequence,
    layer: PolygonLayer,
    projection: LocalProjection,
    attribute: str,
) -> tuple[list[float | None], list[float | None], Counter]:
    """Attribute at each record's GPS polygon and at its database-predicted polygon."""
    vals = {pid: float(v) for pid, v in layer.attribute(attribute).items()}
    ids = layer.ids
    tally: Counter = Counter()
    if not errors:
        return [], [], tally
    gx, gy = projection.forward([e.cluster.lat for e in errors], [e.cluster.lon for e in errors])
    plat = np.array([e.predicted.lat for e in errors])
    plon = np.array([e.predicted.lon for e in errors])
    # predictions far outside the region cannot land in a tract
    near = np.ones(len(errors), dtype=bool)
    try:
        px, py = projection.forward(plat, plon)
    except ValueError:
        px = np.zeros(len(errors))
        py = np.zeros(len(errors))
        for i in range(len(errors)):
            try:
                a, b = projection.forward(plat[i], plon[i])
                px[i], py[i] = float(a), float(b)
            except ValueError:
                near[i] = False
    gk = layer.locate(gx, gy)
    pk = layer.locate(px, py)
    y_true: list[float | None] = []
    y_imp: list[float | None] = []
    for i in range(len(errors)):
        t = vals.get(ids[gk[i]]) if gk[i] >= 0 else None
        m = vals.get(ids[pk[i]]) if (pk[i] >= 0 and near[i]) else None
        if t is None:
            tally["gps_outside_layer"] += 1
        if m is None:
            tally["prediction_outside_layer"] += 1
        y_true.append(t)
        y_imp.append(m)
    return y_true, y_imp, tally
