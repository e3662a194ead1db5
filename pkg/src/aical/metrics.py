"""Calibration / discrimination metrics and the paired significance test.

All confidences are probabilities of the positive (safe) class and labels
are {0, 1}.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm, rankdata, spearmanr

EPS = 1e-6
EVAL_HORIZONS = (5, 10, 15, 20, 25, 30, 35, 40, 45, 50)


def _check(conf, labels):
    p = np.asarray(conf, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if p.size == 0:
        raise ValueError("empty input")
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} confidences vs {y.size} labels")
    return p, y


def bin_edges(n_bins: int = 15) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_bins + 1)


def bin_index(p: np.ndarray, n_bins: int = 15) -> np.ndarray:
    """Equal-width bin per prediction; bins are [lo, hi) except the last, which includes 1."""
    idx = np.searchsorted(bin_edges(n_bins), p, side="right") - 1
    return np.clip(idx, 0, n_bins - 1)


def _binned_gap(p, y, idx, n_bins):
    n = p.size
    counts = np.bincount(idx, minlength=n_bins)
    sum_p = np.bincount(idx, weights=p, minlength=n_bins)
    sum_y = np.bincount(idx, weights=y, minlength=n_bins)
    nz = counts > 0
    return float(np.sum(np.abs(sum_y[nz] - sum_p[nz]) / n))


def ece(conf, labels, n_bins: int = 15) -> float:
    p, y = _check(conf, labels)
    return _binned_gap(p, y, bin_index(p, n_bins), n_bins)


def ace(conf, labels, n_bins: int = 15) -> float:
    """Equal-mass bins over predictions sorted by confidence.

    Bin sizes differ by at most one, larger bins first. A run of tied
    confidences is never split: it joins the bin of its first member.
    """
    p, y = _check(conf, labels)
    order = np.argsort(p, kind="stable")
    pos_bin = np.repeat(np.arange(n_bins), [c.size for c in np.array_split(order, n_bins)])
    ps = p[order]
    first = np.r_[0, np.flatnonzero(np.diff(ps) != 0) + 1]
    group = np.repeat(first, np.diff(np.r_[first, ps.size]))
    idx = np.empty(p.size, dtype=np.int64)
    idx[order] = pos_bin[group]
    return _binned_gap(p, y, idx, n_bins)


def sce(conf, labels, n_bins: int = 15) -> float:
    """Per-class ECE averaged over the two classes."""
    p, y = _check(conf, labels)
    return 0.5 * (ece(p, y, n_bins) + ece(1.0 - p, 1.0 - y, n_bins))


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores count one half."""
    s, y = _check(scores, labels)
    pos = y == 1
    n1 = int(pos.sum())
    n0 = s.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUROC undefined with a single class")
    r = rankdata(s)
    return float((r[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def nll(conf, labels, eps: float = EPS) -> float:
    p, y = _check(conf, labels)
    p = np.clip(p, eps, 1 - eps)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def brier(conf, labels) -> float:
    p, y = _check(conf, labels)
    return float(np.mean((p - y) ** 2))


def horizon_averaged_ece(values: Mapping[int, float] | Sequence[float],
                         horizons: Sequence[int] = EVAL_HORIZONS) -> float:
    """Trapezoidal mean of a per-horizon metric over the horizon axis."""
    if isinstance(values, Mapping):
        ks = sorted(k for k in values if k in set(horizons))
        x = np.array(ks, dtype=float)
        yv = np.array([values[k] for k in ks], dtype=float)
    else:
        x = np.asarray(horizons, dtype=float)
        yv = np.asarray(values, dtype=float)
    if x.size != yv.size or x.size == 0:
        raise ValueError("need one value per horizon")
    if x.size == 1:
        return float(yv[0])
    return float(np.trapezoid(yv, x) / (x[-1] - x[0]))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    p_value: float  # two-sided
    n: int  # nonzero differences
    method: str


def _signed_ranks(a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0]
    return d, rankdata(np.abs(d))


def wilcoxon_exact(a, b) -> WilcoxonResult:
    d, r = _signed_ranks(a, b)
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "exact")
    if n > 20:
        raise ValueError("exact enumeration limited to n <= 20")
    w_plus = float(r[d > 0].sum())
    # W+ over all 2^n sign assignments
    totals = np.zeros(1)
    for rk in r:
        totals = np.concatenate([totals, totals + rk])
    lo = np.mean(totals <= w_plus + 1e-9)
    hi = np.mean(totals >= w_plus - 1e-9)
    p = min(1.0, 2.0 * min(lo, hi))
    return WilcoxonResult(min(w_plus, r.sum() - w_plus), float(p), n, "exact")


def wilcoxon_normal(a, b) -> WilcoxonResult:
    """Normal approximation with tie-corrected variance and continuity correction."""
    d, r = _signed_ranks(a, b)
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "normal")
    w_plus = float(r[d > 0].sum())
    w = min(w_plus, n * (n + 1) / 2.0 - w_plus)
    mean = n * (n + 1) / 4.0
    _, tcounts = np.unique(r, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tcounts**3 - tcounts) / 48.0
    if var <= 0:
        return WilcoxonResult(w, 1.0, n, "normal")
    z = (w - mean + 0.5) / np.sqrt(var)
    p = min(1.0, 2.0 * norm.cdf(min(z, 0.0)))
    return WilcoxonResult(w, float(p), n, "normal")


def wilcoxon_signed_rank(a, b, method: str = "auto") -> WilcoxonResult:
    """Two-sided paired test; zero differences are dropped.

    ``auto`` enumerates exactly for n <= 12 nonzero differences and uses the
    normal approximation above.
    """
    if len(a) != len(b):
        raise ValueError("paired samples must have equal length")
    if method == "exact":
        return wilcoxon_exact(a, b)
    if method == "normal":
        return wilcoxon_normal(a, b)
    if method != "auto":
        raise ValueError(f"unknown method {method!r}")
    n = int(np.count_nonzero(np.asarray(a, float) - np.asarray(b, float)))
    return wilcoxon_exact(a, b) if n <= 12 else wilcoxon_normal(a, b)


# ---------------------------------------------------------------------------
# reliability bins


@dataclass(frozen=True)
class ReliabilityBins:
    edges: np.ndarray
    count: np.ndarray
    mean_conf: np.ndarray  # NaN for empty bins
    accuracy: np.ndarray  # NaN for empty bins

    @property
    def n(self) -> int:
        return int(self.count.sum())

    @property
    def ece(self) -> float:
        nz = self.count > 0
        return float(np.sum(self.count[nz] * np.abs(self.accuracy[nz] - self.mean_conf[nz])) / self.n)

    def rows(self):
        for b in range(len(self.count)):
            yield (float(self.edges[b]), float(self.edges[b + 1]), int(self.count[b]),
                   float(self.mean_conf[b]), float(self.accuracy[b]))


def reliability_bins(conf, labels, n_bins: int = 15) -> ReliabilityBins:
    p, y = _check(conf, labels)
    idx = bin_index(p, n_bins)
    count = np.bincount(idx, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mc = np.bincount(idx, weights=p, minlength=n_bins) / count
        acc = np.bincount(idx, weights=y, minlength=n_bins) / count
    return ReliabilityBins(bin_edges(n_bins), count, mc, acc)


def all_metrics(conf, labels, n_bins: int = 15) -> dict:
    p, y = _check(conf, labels)
    single = y.min() == y.max()
    return {
        "ece": ece(p, y, n_bins),
        "ace": ace(p, y, n_bins),
        "sce": sce(p, y, n_bins),
        "auroc": None if single else auroc(p, y),
        "nll": nll(p, y),
        "brier": brier(p, y),
        "n": int(p.size),
    }


def spearman_levels(levels, values) -> float:
    """Spearman correlation between severity levels and a per-level statistic."""
    v = np.asarray(values, dtype=float)
    if np.ptp(v) == 0:
        return float("nan")  # undefined for a flat response
    return float(spearmanr(levels, v).statistic)

