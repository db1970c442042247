"""Geometric primitives: ellipsoidal distance, local equal-area projection,
medioid, convex-hull scale and point-in-polygon assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

# WGS-84
WGS84_A = 6378137.0
WGS84_F = 1 / 298.257223563
WGS84_B = (1 - WGS84_F) * WGS84_A
WGS84_E2 = WGS84_F * (2 - WGS84_F)
WGS84_E = math.sqrt(WGS84_E2)

VINCENTY_MAX_ITER = 200
VINCENTY_TOL = 1e-12

MAX_PROJECTION_RANGE_M = 500_000.0


class AntipodalError(ArithmeticError):
    """Vincenty's inverse iteration failed to converge (near-antipodal pair)."""


class ProjectionRangeError(ValueError):
    pass


class PolygonError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (-90.0 <= self.lat <= 90.0) or not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"coordinates out of range: ({self.lat}, {self.lon})")


@dataclass(frozen=True, slots=True)
class PlanePoint:
    x: float
    y: float


def vincenty_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Inverse geodesic distance in meters on the WGS-84 ellipsoid.

    Raises AntipodalError when the lambda iteration does not converge
    within VINCENTY_MAX_ITER steps.
    """
    if a.lat == b.lat and a.lon == b.lon:
        return 0.0
    f = WGS84_F
    L = math.radians(b.lon - a.lon)
    U1 = math.atan((1 - f) * math.tan(math.radians(a.lat)))
    U2 = math.atan((1 - f) * math.tan(math.radians(b.lat)))
    sinU1, cosU1 = math.sin(U1), math.cos(U1)
    sinU2, cosU2 = math.sin(U2), math.cos(U2)

    lam = L
    for _ in range(VINCENTY_MAX_ITER):
        sin_lam, cos_lam = math.sin(lam), math.cos(lam)
        sin_sigma = math.hypot(cosU2 * sin_lam, cosU1 * sinU2 - sinU1 * cosU2 * cos_lam)
        if sin_sigma == 0.0:
            return 0.0  # coincident points
        cos_sigma = sinU1 * sinU2 + cosU1 * cosU2 * cos_lam
        sigma = math.atan2(sin_sigma, cos_sigma)
        sin_alpha = cosU1 * cosU2 * sin_lam / sin_sigma
        cos2_alpha = 1 - sin_alpha * sin_alpha
        # equatorial line: cos2_alpha = 0
        cos_2sm = cos_sigma - 2 * sinU1 * sinU2 / cos2_alpha if cos2_alpha != 0.0 else 0.0
        C = f / 16 * cos2_alpha * (4 + f * (4 - 3 * cos2_alpha))
        lam_prev = lam
        lam = L + (1 - C) * f * sin_alpha * (
            sigma + C * sin_sigma * (cos_2sm + C * cos_sigma * (-1 + 2 * cos_2sm * cos_2sm))
        )
        if abs(lam) > math.pi:
            raise AntipodalError(f"lambda left [-pi, pi] for {a} -> {b}")
        if abs(lam - lam_prev) <= VINCENTY_TOL:
            break
    else:
        raise AntipodalError(f"no convergence after {VINCENTY_MAX_ITER} iterations for {a} -> {b}")

    u2 = cos2_alpha * (WGS84_A**2 - WGS84_B**2) / WGS84_B**2
    A = 1 + u2 / 16384 * (4096 + u2 * (-768 + u2 * (320 - 175 * u2)))
    B = u2 / 1024 * (256 + u2 * (-128 + u2 * (74 - 47 * u2)))
    delta_sigma = B * sin_sigma * (
        cos_2sm
        + B / 4 * (
            cos_sigma * (-1 + 2 * cos_2sm * cos_2sm)
            - B / 6 * cos_2sm * (-3 + 4 * sin_sigma * sin_sigma) * (-3 + 4 * cos_2sm * cos_2sm)
        )
    )
    return WGS84_B * A * (sigma - delta_sigma)


def vincenty_array(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Vectorised vincenty_distance over equal-length coordinate arrays.

    Pairs that fail to converge raise AntipodalError, as in the scalar form.
    """
    lat1, lon1, lat2, lon2 = (np.asarray(v, dtype=float) for v in (lat1, lon1, lat2, lon2))
    f = WGS84_F
    L = np.radians(lon2 - lon1)
    U1 = np.arctan((1 - f) * np.tan(np.radians(lat1)))
    U2 = np.arctan((1 - f) * np.tan(np.radians(lat2)))
    sinU1, cosU1, sinU2, cosU2 = np.sin(U1), np.cos(U1), np.sin(U2), np.cos(U2)
    out = np.zeros(L.shape)
    active = ~((lat1 == lat2) & (lon1 == lon2))
    lam = L.copy()
    sin_sigma = np.zeros(L.shape)
    cos_sigma = np.ones(L.shape)
    sigma = np.zeros(L.shape)
    cos2_alpha = np.ones(L.shape)
    cos_2sm = np.zeros(L.shape)
    pending = active.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        for _ in range(VINCENTY_MAX_ITER):
            if not pending.any():
                break
            idx = np.nonzero(pending)[0]
            lm = lam[idx]
            s1, c1, s2, c2 = sinU1[idx], cosU1[idx], sinU2[idx], cosU2[idx]
            sl, cl = np.sin(lm), np.cos(lm)
            ss = np.hypot(c2 * sl, c1 * s2 - s1 * c2 * cl)
            cs = s1 * s2 + c1 * c2 * cl
            sg = np.arctan2(ss, cs)
            sa = np.where(ss == 0, 0.0, c1 * c2 * sl / ss)
            ca2 = 1 - sa * sa
            c2m = np.where(ca2 != 0, cs - 2 * s1 * s2 / ca2, 0.0)
            C = f / 16 * ca2 * (4 + f * (4 - 3 * ca2))
            new = L[idx] + (1 - C) * f * sa * (sg + C * ss * (c2m + C * cs * (-1 + 2 * c2m * c2m)))
            if np.any(np.abs(new) > math.pi):
                raise AntipodalError("lambda left [-pi, pi] in vectorised Vincenty")
            done = (np.abs(new - lm) <= VINCENTY_TOL) | (ss == 0)
            lam[idx] = new
            sin_sigma[idx], cos_sigma[idx], sigma[idx] = ss, cs, sg
            cos2_alpha[idx], cos_2sm[idx] = ca2, c2m
            pending[idx[done]] = False
        else:
            if pending.any():
                raise AntipodalError(f"{int(pending.sum())} pairs did not converge")
    u2 = cos2_alpha * (WGS84_A**2 - WGS84_B**2) / WGS84_B**2
    A = 1 + u2 / 16384 * (4096 + u2 * (-768 + u2 * (320 - 175 * u2)))
    B = u2 / 1024 * (256 + u2 * (-128 + u2 * (74 - 47 * u2)))
    ds = B * sin_sigma * (
        cos_2sm
        + B / 4 * (
            cos_sigma * (-1 + 2 * cos_2sm**2)
            - B / 6 * cos_2sm * (-3 + 4 * sin_sigma**2) * (-3 + 4 * cos_2sm**2)
        )
    )
    out[active] = (WGS84_B * A * (sigma - ds))[active]
    return out


def haversine_m(lat1, lon1, lat2, lon2, radius: float = 6371008.8):
    """Great-circle distance on a sphere. Cheap pre-filter only; within ~0.5% of the ellipsoid."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * radius * np.arcsin(np.sqrt(np.minimum(h, 1.0)))


# -- Lambert azimuthal equal-area, ellipsoidal oblique aspect --------------


def _q(sin_phi):
    e = WGS84_E
    return (1 - WGS84_E2) * (
        sin_phi / (1 - WGS84_E2 * sin_phi**2)
        - 1 / (2 * e) * np.log((1 - e * sin_phi) / (1 + e * sin_phi))
    )


_QP = float(_q(1.0))
_RQ = WGS84_A * math.sqrt(_QP / 2)


@dataclass(frozen=True)
class LocalProjection:
    """Azimuthal equal-area projection centred on ``origin``.

    Areas are preserved exactly; distances are distorted by well under 0.1%
    within a city-sized neighbourhood of the origin.
    """

    origin: GeoPoint
    max_range_m: float = MAX_PROJECTION_RANGE_M
    _beta1: float = field(init=False, repr=False)
    _D: float = field(init=False, repr=False)

    def __post_init__(self) -> None:
        phi1 = math.radians(self.origin.lat)
        beta1 = math.asin(float(_q(math.sin(phi1))) / _QP)
        m1 = math.cos(phi1) / math.sqrt(1 - WGS84_E2 * math.sin(phi1) ** 2)
        object.__setattr__(self, "_beta1", beta1)
        object.__setattr__(self, "_D", WGS84_A * m1 / (_RQ * math.cos(beta1)))

    def forward(self, lat, lon) -> tuple[np.ndarray, np.ndarray]:
        """Project arrays of degrees to planar meters."""
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        beta = np.arcsin(_q(np.sin(np.radians(lat))) / _QP)
        dlam = np.radians(lon - self.origin.lon)
        sb1, cb1 = math.sin(self._beta1), math.cos(self._beta1)
        denom = 1 + sb1 * np.sin(beta) + cb1 * np.cos(beta) * np.cos(dlam)
        B = _RQ * np.sqrt(2 / denom)
        x = B * self._D * np.cos(beta) * np.sin(dlam)
        y = (B / self._D) * (cb1 * np.sin(beta) - sb1 * np.cos(beta) * np.cos(dlam))
        far = np.hypot(x, y) > self.max_range_m
        if np.any(far):
            raise ProjectionRangeError(
                f"{int(np.count_nonzero(far))} point(s) beyond {self.max_range_m:.0f} m of {self.origin}"
            )
        return x, y

    def inverse(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        D = self._D
        sb1, cb1 = math.sin(self._beta1), math.cos(self._beta1)
        rho = np.hypot(x / D, D * y)
        if np.any(rho > self.max_range_m * 1.01):
            raise ProjectionRangeError("planar point beyond projection range")
        ce = 2 * np.arcsin(np.minimum(rho / (2 * _RQ), 1.0))
        with np.errstate(invalid="ignore", divide="ignore"):
            sin_beta = np.where(
                rho > 0, np.cos(ce) * sb1 + D * y * np.sin(ce) * cb1 / np.where(rho > 0, rho, 1), sb1
            )
            lam = np.where(
                rho > 0,
                np.arctan2(x * np.sin(ce), D * rho * cb1 * np.cos(ce) - D * D * y * sb1 * np.sin(ce)),
                0.0,
            )
        q = _QP * sin_beta
        phi = np.arcsin(sin_beta)
        e, e2 = WGS84_E, WGS84_E2
        for _ in range(12):
            s = np.sin(phi)
            phi = phi + (1 - e2 * s * s) ** 2 / (2 * np.cos(phi)) * (
                q / (1 - e2) - s / (1 - e2 * s * s) + 1 / (2 * e) * np.log((1 - e * s) / (1 + e * s))
            )
        return np.degrees(phi), self.origin.lon + np.degrees(lam)


def project(p: GeoPoint, origin: GeoPoint) -> PlanePoint:
    x, y = LocalProjection(origin).forward(p.lat, p.lon)
    return PlanePoint(float(x), float(y))


def unproject(q: PlanePoint, origin: GeoPoint) -> GeoPoint:
    lat, lon = LocalProjection(origin).inverse(q.x, q.y)
    return GeoPoint(float(lat), float(lon))


# -- medioid and hull scale ------------------------------------------------


def _as_xy(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=float)
    else:
        arr = np.array([(p.x, p.y) if isinstance(p, PlanePoint) else tuple(p) for p in points], dtype=float)
    return arr.reshape(-1, 2)


def medioid(points) -> PlanePoint:
    """Component-wise median; even counts average the two central values."""
    xy = _as_xy(points)
    if len(xy) == 0:
        raise ValueError("medioid of an empty point set")
    return PlanePoint(float(np.median(xy[:, 0])), float(np.median(xy[:, 1])))


def select_nearest(points, f: float, center: PlanePoint | None = None) -> np.ndarray:
    """The ceil(f*n) points nearest ``center`` (default: the medioid).

    Ties order by (distance, x, y, input position).
    """
    if not 0.0 < f <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {f}")
    xy = _as_xy(points)
    n = len(xy)
    if n == 0:
        raise ValueError("empty point set")
    c = center if center is not None else medioid(xy)
    d2 = (xy[:, 0] - c.x) ** 2 + (xy[:, 1] - c.y) ** 2
    # lexsort: last key is primary
    order = np.lexsort((np.arange(n), xy[:, 1], xy[:, 0], d2))
    k = math.ceil(round(f * n, 9))
    return xy[order[:k]]


def _cross(o, a, b) -> float:
    c = (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    scale = abs((a[0] - o[0]) * (b[1] - o[1])) + abs((a[1] - o[1]) * (b[0] - o[0]))
    if abs(c) > 1e-9 * scale:
        return c
    # near-collinear: settle the sign exactly
    fo = (Fraction(o[0]), Fraction(o[1]))
    exact = (Fraction(a[0]) - fo[0]) * (Fraction(b[1]) - fo[1]) - (Fraction(a[1]) - fo[1]) * (
        Fraction(b[0]) - fo[0]
    )
    return float(exact) if exact else 0.0


def convex_hull(points) -> list[tuple[float, float]]:
    """Monotone-chain hull, counter-clockwise, collinear points dropped."""
    pts = sorted(set(map(tuple, _as_xy(points).tolist())))
    if len(pts) <= 2:
        return pts
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def polygon_area(ring: Sequence[tuple[float, float]]) -> float:
    """Shoelace area, evaluated exactly and rounded once."""
    n = len(ring)
    if n < 3:
        return 0.0
    fr = [(Fraction(x), Fraction(y)) for x, y in ring]
    twice = sum(fr[i][0] * fr[(i + 1) % n][1] - fr[(i + 1) % n][0] * fr[i][1] for i in range(n))
    return float(abs(twice) / 2)


@dataclass(frozen=True, slots=True)
class HullScale:
    scale: float
    area: float
    n_selected: int
    degenerate: bool

    def __float__(self) -> float:
        return self.scale


def hull_scale(points, f: float = 1.0, unique: bool = False) -> HullScale:
    """Square root of the convex-hull area of the fraction f of points nearest the medioid.

    With ``unique`` the point set is de-duplicated before selection;
    otherwise repeated locations keep their weight.
    """
    xy = _as_xy(points)
    if unique and len(xy):
        _, first = np.unique(xy, axis=0, return_index=True)
        xy = xy[np.sort(first)]
    chosen = select_nearest(xy, f)
    hull = convex_hull(chosen)
    area = polygon_area(hull) if len(hull) >= 3 else 0.0
    if area == 0.0:
        return HullScale(0.0, 0.0, len(chosen), True)
    return HullScale(math.sqrt(area), area, len(chosen), False)


# -- polygon layers --------------------------------------------------------


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = _cross(a, b, c)
        return (v > 0) - (v < 0)

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2, o3, o4 = orient(p1, p2, p3), orient(p1, p2, p4), orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    return (
        (o1 == 0 and on_seg(p1, p2, p3))
        or (o2 == 0 and on_seg(p1, p2, p4))
        or (o3 == 0 and on_seg(p3, p4, p1))
        or (o4 == 0 and on_seg(p3, p4, p2))
    )


def validate_ring(ring: np.ndarray, polygon_id: str = "?") -> None:
    if len(ring) < 4:
        raise PolygonError(f"polygon {polygon_id}: ring needs at least 3 distinct vertices")
    if not np.array_equal(ring[0], ring[-1]):
        raise PolygonError(f"polygon {polygon_id}: ring is not closed")
    if not np.all(np.isfinite(ring)):
        raise PolygonError(f"polygon {polygon_id}: non-finite coordinate")
    m = len(ring) - 1
    pts = [tuple(p) for p in ring.tolist()]
    segs = [(pts[i], pts[i + 1]) for i in range(m)]
    for i in range(m):
        for j in range(i + 1, m):
            if j == i + 1 or (i == 0 and j == m - 1):
                continue  # adjacent edges share a vertex
            if _segments_cross(*segs[i], *segs[j]):
                raise PolygonError(f"polygon {polygon_id}: ring self-intersects (edges {i}, {j})")


@dataclass
class Polygon:
    polygon_id: str
    attributes: dict[str, str]
    rings: list[np.ndarray]

    def bbox(self) -> tuple[float, float, float, float]:
        allp = np.vstack(self.rings)
        return allp[:, 0].min(), allp[:, 1].min(), allp[:, 0].max(), allp[:, 1].max()


class PolygonLayer:
    """Polygons with attributes; coordinates either planar meters or (lon, lat) degrees."""

    def __init__(self, polygons: Iterable[Polygon], geographic: bool = False, validate: bool = True):
        self.polygons = list(polygons)
        self.geographic = geographic
        ids = [p.polygon_id for p in self.polygons]
        if len(set(ids)) != len(ids):
            raise PolygonError("duplicate polygon ids")
        if validate:
            for p in self.polygons:
                for ring in p.rings:
                    validate_ring(ring, p.polygon_id)
        # boundary ties go to the id that sorts first
        self.polygons.sort(key=lambda p: p.polygon_id)
        self._bboxes = np.array([p.bbox() for p in self.polygons]).reshape(-1, 4)

    def __len__(self) -> int:
        return len(self.polygons)

    def __iter__(self):
        return iter(self.polygons)

    @property
    def ids(self) -> list[str]:
        return [p.polygon_id for p in self.polygons]

    def attribute(self, name: str) -> dict[str, str]:
        return {p.polygon_id: p.attributes[name] for p in self.polygons if name in p.attributes}

    def projected(self, proj: LocalProjection) -> "PolygonLayer":
        if not self.geographic:
            return self
        polys = []
        for p in self.polygons:
            rings = []
            for r in p.rings:
                x, y = proj.forward(r[:, 1], r[:, 0])
                rings.append(np.column_stack([x, y]))
            polys.append(Polygon(p.polygon_id, dict(p.attributes), rings))
        return PolygonLayer(polys, geographic=False, validate=False)

    def locate(self, xs, ys) -> np.ndarray:
        """Index into ``self.polygons`` for each point, -1 when outside all polygons."""
        xs = np.asarray(xs, dtype=float).ravel()
        ys = np.asarray(ys, dtype=float).ravel()
        result = np.full(len(xs), -1, dtype=np.int64)
        for k, poly in enumerate(self.polygons):
            x0, y0, x1, y1 = self._bboxes[k]
            cand = np.nonzero((result < 0) & (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1))[0]
            if len(cand) == 0:
                continue
            px, py = xs[cand], ys[cand]
            inside = np.zeros(len(cand), dtype=bool)
            boundary = np.zeros(len(cand), dtype=bool)
            for ring in poly.rings:
                ax, ay = ring[:-1, 0], ring[:-1, 1]
                bx, by = ring[1:, 0], ring[1:, 1]
                for j in range(len(ax)):
                    x_a, y_a, x_b, y_b = ax[j], ay[j], bx[j], by[j]
                    crosses = (y_a > py) != (y_b > py)
                    with np.errstate(divide="ignore", invalid="ignore"):
                        xint = x_a + (py - y_a) * (x_b - x_a) / (y_b - y_a)
                    inside ^= crosses & (px < xint)
                    cr = (x_b - x_a) * (py - y_a) - (y_b - y_a) * (px - x_a)
                    boundary |= (
                        (cr == 0)
                        & (px >= min(x_a, x_b))
                        & (px <= max(x_a, x_b))
                        & (py >= min(y_a, y_b))
                        & (py <= max(y_a, y_b))
                    )
            hit = inside | boundary
            result[cand[hit]] = k
        return result


def point_in_polygon(p: PlanePoint, layer: PolygonLayer) -> str | None:
    k = int(layer.locate([p.x], [p.y])[0])
    return None if k < 0 else layer.polygons[k].polygon_id


def parse_polygon_line(line: str, lineno: int = 0) -> Polygon:
    """``id<TAB>k=v;k=v<TAB>x y, x y, ... | x y, ...`` (rings split by ``|``)."""
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 3:
        raise PolygonError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
    pid, attr_text, geom_text = parts
    attrs: dict[str, str] = {}
    for kv in filter(None, (s.strip() for s in attr_text.split(";"))):
        if "=" not in kv:
            raise PolygonError(f"line {lineno}: bad attribute {kv!r}")
        k, v = kv.split("=", 1)
        attrs[k.strip()] = v.strip()
    rings = []
    for ring_text in geom_text.split("|"):
        try:
            coords = [tuple(float(c) for c in pair.split()) for pair in ring_text.split(",") if pair.strip()]
        except ValueError as exc:
            raise PolygonError(f"line {lineno}: {exc}") from None
        if any(len(c) != 2 for c in coords):
            raise PolygonError(f"line {lineno}: coordinates must be 'x y' pairs")
        rings.append(np.array(coords, dtype=float))
    return Polygon(pid.strip(), attrs, rings)


def load_polygon_layer(path: str | Path, geographic: bool = False) -> PolygonLayer:
    polys = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            polys.append(parse_polygon_line(line, lineno))
    return PolygonLayer(polys, geographic=geographic)


def format_polygon(poly: Polygon) -> str:
    attrs = ";".join(f"{k}={v}" for k, v in sorted(poly.attributes.items()))
    rings = " | ".join(", ".join(f"{float(x)!r} {float(y)!r}" for x, y in ring) for ring in poly.rings)
    return f"{poly.polygon_id}\t{attrs}\t{rings}"


def polygon_from_mapping(pid: str, attrs: Mapping[str, object], ring: Sequence[tuple[float, float]]) -> Polygon:
    arr = np.array(list(ring) + ([ring[0]] if tuple(ring[0]) != tuple(ring[-1]) else []), dtype=float)
    return Polygon(pid, {k: str(v) for k, v in attrs.items()}, [arr])
