from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as _st


@dataclass(frozen=True)
class Correlation:
    r: float
    p_value: float
    n: int

    @property
    def defined(self) -> bool:
        return not math.isnan(self.r)


def pearson(x, y, weights=None) -> Correlation:
    """Two-pass (optionally weighted) Pearson r with a t-test p-value on n-2 dof.

    Zero variance in either variable yields r = nan.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n != len(y):
        raise ValueError("x and y differ in length")
    if n < 3:
        raise ValueError("need at least 3 observations")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    sw = w.sum()
    mx = (w * x).sum() / sw
    my = (w * y).sum() / sw
    dx, dy = x - mx, y - my
    sxx = (w * dx * dx).sum()
    syy = (w * dy * dy).sum()
    if sxx == 0 or syy == 0:
        return Correlation(math.nan, math.nan, n)
    r = float((w * dx * dy).sum() / math.sqrt(sxx * syy))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * math.sqrt((n - 2) / (1 - r * r))
        p = float(2 * _st.t.sf(abs(t), n - 2))
    return Correlation(r, p, n)
