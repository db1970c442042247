"""Report tree writers. Floats are printed with six significant digits."""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path

from .core import RejectionTally
from .metrics import QuantileReport

QUANTILE_GROUPINGS = {
    "city_provider_dba": ("city", "provider", "dba"),
    "provider_modality": ("provider", "modality"),
    "provider_category": ("provider", "category"),
    "provider_accuracy_bin": ("provider", "accuracy_bin"),
    "provider_travel": ("provider", "travel"),
    "provider_night": ("provider", "night"),
}


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return format(x, ".6g")
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, bool) or x is None or isinstance(x, (int, str)):
        return x
    if isinstance(x, float):
        if math.isnan(x) or math.isinf(x):
            return None
        return float(format(x, ".6g"))
    if hasattr(x, "item"):
        return _jsonable(x.item())
    return str(x)


def slug(parts) -> str:
    text = "__".join(str(p) for p in parts)
    return re.sub(r"[^A-Za-z0-9_.=-]+", "-", text).strip("-") or "cohort"


class ReportWriter:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.written: set[str] = set()

    def _path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.add(name)
        return p

    def csv(self, name: str, header, rows) -> None:
        with open(self._path(name), "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            for row in rows:
                wr.writerow([fmt(v) for v in row])

    def json(self, name: str, doc: dict) -> None:
        text = json.dumps(_jsonable(doc), indent=2, sort_keys=True)
        self._path(name).write_text(text + "\n", encoding="utf-8")

    # -- tables ----------------------------------------------------------

    def quantile_table(self, name: str, rep: QuantileReport) -> None:
        """Quantiles in km, one row per cohort."""
        rows = []
        for key, st in rep.cohorts.items():
            qs = [st.quantiles[q] / 1000.0 for q in sorted(st.quantiles)]
            rows.append(["/".join(key), *qs, st.n])
        qnames = [f"q{round(q * 100):02d}" for q in sorted(next(iter(rep.cohorts.values())).quantiles)] if rep.cohorts else ["q10", "q25", "q50", "q75", "q90"]
        self.csv(name, ["cohort", *qnames, "n"], rows)

    def ecdf_files(self, rep: QuantileReport) -> None:
        index = []
        for key, st in rep.cohorts.items():
            fname = f"ecdf/{slug(key)}.csv"
            xs, shares = st.ecdf.points()
            self.csv(fname, ["error_m", "share"], zip(xs.tolist(), shares.tolist()))
            index.append(["/".join(key), fname, st.n])
        self.csv("ecdf/index.csv", ["cohort", "file", "n"], index)

    def too_close_table(self, errors) -> None:
        counts: dict[tuple, list[int]] = {}
        for r in errors:
            c = counts.setdefault((r.provider, r.tags.get("dba", "NA")), [0, 0])
            c[0] += 1
            c[1] += r.too_close
        self.csv(
            "too_close.csv",
            ["provider", "dba", "n", "too_close", "share"],
            ([p, d, n, k, k / n] for (p, d), (n, k) in sorted(counts.items())),
        )

    def compare_table(self, rows) -> None:
        self.csv("compare_travel.csv", ["provider", "dba", "n_travel", "n_non_travel", "median_ratio", "ks"], rows)

    def class_table(self, table) -> None:
        shares = table.shares()
        self.csv(
            "classes.csv",
            ["cluster_class", "bumps", "clusters", "n_bumps", "n_clusters"],
            (
                [cls.value, b, c, table.bumps[cls], table.clusters[cls]]
                for cls, (b, c) in shares.items()
            ),
        )

    def nic_table(self, tally: RejectionTally) -> None:
        total = tally.total
        rows = []
        for k, n in sorted(tally.detail.items()):
            reason, _, what = k.partition(":")
            rows.append([reason, what, n, n / total if total else 0.0])
        self.csv("rejections.csv", ["reason", "detail", "n", "share"], rows)

    def scale_table(self, regional, scfg, per_provider_means) -> None:
        fr = list(scfg.fractions)
        provs = sorted(per_provider_means)
        header = ["region", "subnet", "devices", "addresses", "passes", "medioid_x", "medioid_y"]
        header += [f"scale_f{f:g}" for f in fr] + [f"degenerate_f{f:g}" for f in fr]
        header += [f"mean_error_m_{p}" for p in provs]
        rows = []
        for name, (_, aggs) in sorted(regional.items()):
            for k, a in aggs.items():
                row = [name, str(k), a.devices, a.addresses, a.passes(scfg.min_devices, scfg.min_addresses),
                       a.medioid.x, a.medioid.y]
                row += [a.scales[f].scale if f in a.scales else None for f in fr]
                row += [a.scales[f].degenerate if f in a.scales else None for f in fr]
                row += [per_provider_means[p].get(k, (None, 0))[0] for p in provs]
                rows.append(row)
        self.csv("subnet_scale.csv", header, rows)

    def visit_table(self, hists) -> None:
        rows = []
        for group, h in hists.items():
            wts, unw = h.weighted(), h.unweighted()
            for v in sorted(h.pair_counts):
                rows.append([group, v, h.pair_counts[v], wts[v], unw[v]])
        self.csv("visits.csv", ["group", "visits", "pairs", "weighted_share", "unweighted_share"], rows)

    def churn_table(self, curves) -> None:
        rows = []
        for isp, c in curves.items():
            share = c.share
            for d in range(len(c.pairs)):
                rows.append([isp, d, None if c.pairs[d] == 0 else float(share[d]), int(c.pairs[d])])
        self.csv("churn.csv", ["isp", "d", "share", "n_pairs"], rows)

    def movement_tables(self, rows, persist) -> None:
        self.csv("movement.csv", ["region", "subnet", "displacement_m"], ([r, str(k), d] for r, k, d in rows))
        self.csv(
            "persistence.csv",
            ["region", "threshold", "n_first", "n_second", "forward", "backward"],
            ([r, p.threshold, p.n_first, p.n_second, p.forward, p.backward] for r, p in persist),
        )

    def modality_table(self, shares) -> None:
        self.csv(
            "modality_share.csv",
            ["polygon_id", "mobile", "fixed", "mobile_share"],
            ([pid, s.mobile, s.fixed, s.share] for pid, s in shares.items()),
        )

    def attenuation_table(self, results, attribute: str) -> None:
        rows = []
        for prov, (res, _) in results.items():
            for d in res.deciles:
                qs = [d.imputed_quantiles[q] for q in sorted(d.imputed_quantiles)]
                rows.append([prov, d.decile, d.true_lo, d.true_hi, d.n, *qs, res.slope])
        self.csv(
            "attenuation.csv",
            ["provider", "decile", f"{attribute}_lo", f"{attribute}_hi", "n", "imp_q10", "imp_q25", "imp_q50",
             "imp_q75", "imp_q90", "ols_slope"],
            rows,
        )
