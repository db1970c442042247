"""Minimal SVG charts rendered straight from report CSVs (no plotting library, byte-stable)."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

W, H = 640, 420
ML, MR, MT, MB = 60, 150, 20, 45
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f", "#17becf")


def _read(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _n(v: float) -> str:
    return format(v, ".2f")


class _Chart:
    def __init__(self, title: str, xlabel: str, ylabel: str, x_range, y_range, logx: bool = False):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.logx = logx
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        self.parts: list[str] = []
        self.legend: list[tuple[str, str]] = []

    def _tx(self, x: float) -> float:
        if self.logx:
            x, a, b = math.log10(x), math.log10(self.x0), math.log10(self.x1)
        else:
            a, b = self.x0, self.x1
        return ML + (x - a) / ((b - a) or 1) * (W - ML - MR)

    def _ty(self, y: float) -> float:
        return H - MB - (y - self.y0) / ((self.y1 - self.y0) or 1) * (H - MT - MB)

    def polyline(self, xs, ys, label: str, step: bool = False) -> None:
        color = PALETTE[len(self.legend) % len(PALETTE)]
        pts = []
        prev = None
        for x, y in zip(xs, ys):
            if step and prev is not None:
                pts.append(f"{_n(self._tx(x))},{_n(self._ty(prev))}")
            pts.append(f"{_n(self._tx(x))},{_n(self._ty(y))}")
            prev = y
        self.parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        self.legend.append((label, color))

    def bars(self, edges, heights, label: str) -> None:
        color = PALETTE[len(self.legend) % len(PALETTE)]
        for (a, b), h in zip(zip(edges, edges[1:]), heights):
            x, y = self._tx(a), self._ty(h)
            self.parts.append(
                f'<rect x="{_n(x)}" y="{_n(y)}" width="{_n(self._tx(b) - x)}" height="{_n(self._ty(0) - y)}" '
                f'fill="{color}" fill-opacity="0.7"/>'
            )
        self.legend.append((label, color))

    def render(self) -> str:
        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
            'font-family="sans-serif" font-size="11">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{ML}" y="14" font-size="13">{_esc(self.title)}</text>',
            f'<line x1="{ML}" y1="{H - MB}" x2="{W - MR}" y2="{H - MB}" stroke="black"/>',
            f'<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{H - MB}" stroke="black"/>',
            f'<text x="{(ML + W - MR) / 2:.1f}" y="{H - 8}" text-anchor="middle">{_esc(self.xlabel)}</text>',
            f'<text x="14" y="{(MT + H - MB) / 2:.1f}" transform="rotate(-90 14 {(MT + H - MB) / 2:.1f})" '
            f'text-anchor="middle">{_esc(self.ylabel)}</text>',
        ]
        for i in range(5):
            fx = i / 4
            xv = 10 ** (math.log10(self.x0) + fx * (math.log10(self.x1) - math.log10(self.x0))) if self.logx else self.x0 + fx * (self.x1 - self.x0)
            yv = self.y0 + fx * (self.y1 - self.y0)
            out.append(f'<text x="{_n(self._tx(xv))}" y="{H - MB + 14}" text-anchor="middle">{format(xv, ".3g")}</text>')
            out.append(f'<text x="{ML - 4}" y="{_n(self._ty(yv) + 4)}" text-anchor="end">{format(yv, ".3g")}</text>')
        out.extend(self.parts)
        for i, (label, color) in enumerate(self.legend[:20]):
            y = MT + 12 + 14 * i
            out.append(f'<line x1="{W - MR + 8}" y1="{y - 4}" x2="{W - MR + 24}" y2="{y - 4}" stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{W - MR + 28}" y="{y}">{_esc(label[:22])}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _ecdf_svg(report: Path) -> str | None:
    index = _read(report / "ecdf" / "index.csv")
    series = []
    for row in index:
        pts = _read(report / row["file"])
        if pts:
            series.append((row["cohort"], [float(p["error_m"]) for p in pts], [float(p["share"]) for p in pts]))
    if not series:
        return None
    pos = [x for _, xs, _ in series for x in xs if x > 0]
    lo = max(min(pos), 1.0) if pos else 1.0
    hi = max(max(pos) if pos else 10.0, lo * 10)
    ch = _Chart("Geolocation error CDF", "error (m)", "share of reports", (lo, hi), (0.0, 1.0), logx=True)
    for label, xs, ys in series:
        xs = [min(max(x, lo), hi) for x in xs]
        ch.polyline(xs, ys, label, step=True)
    return ch.render()


def _churn_svg(report: Path) -> str | None:
    rows = [r for r in _read(report / "churn.csv") if r["share"]]
    if not rows:
        return None
    by_isp = defaultdict(list)
    for r in rows:
        by_isp[r["isp"]].append((int(r["d"]), float(r["share"])))
    dmax = max(int(r["d"]) for r in rows)
    ch = _Chart("Returning share after d nights", "d (nights)", "same address", (0, max(dmax, 1)), (0.0, 1.0))
    for isp in sorted(by_isp):
        pts = sorted(by_isp[isp])
        ch.polyline([p[0] for p in pts], [p[1] for p in pts], isp)
    return ch.render()


def _movement_svg(report: Path) -> str | None:
    rows = _read(report / "movement.csv")
    if not rows:
        return None
    vals = sorted(float(r["displacement_m"]) for r in rows)
    hi = max(vals[-1], 1.0)
    nb = 20
    edges = [hi * i / nb for i in range(nb + 1)]
    counts = [0] * nb
    for v in vals:
        counts[min(int(v / hi * nb), nb - 1)] += 1
    ch = _Chart("Medioid displacement between periods", "distance (m)", "subnets", (0, hi), (0, max(counts)))
    ch.bars(edges, counts, f"n={len(vals)}")
    return ch.render()


FAMILIES = {"ecdf.svg": _ecdf_svg, "churn.svg": _churn_svg, "movement.svg": _movement_svg}


def plot(report_dir: str | Path, out_dir: str | Path | None = None) -> tuple[list[Path], list[str]]:
    """Render one SVG per metric family found in ``report_dir``.

    Returns (written files, notices for families skipped as empty).
    """
    report = Path(report_dir)
    out = Path(out_dir) if out_dir else report / "plots"
    written, notices = [], []
    for name, fn in FAMILIES.items():
        svg = fn(report)
        if svg is None:
            notices.append(f"{name}: no data, skipped")
            continue
        out.mkdir(parents=True, exist_ok=True)
        p = out / name
        p.write_text(svg, encoding="utf-8")
        written.append(p)
    return written, notices
