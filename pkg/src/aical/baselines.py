"""Post-hoc baseline calibrators, all fit per horizon on (n, H) blocks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree
from scipy.special import expit, log_expit

from .calib import T_BOUNDS, fit_temperature, fit_temperature_logits, safe_logit
from .metrics import bin_index

BASELINES = ("ts", "platt", "isotonic", "histbin", "dac")


@dataclass
class TSParams:
    T: dict[int, float]
    kind: str = "ts"


@dataclass
class PlattParams:
    a: dict[int, float]
    b: dict[int, float]
    kind: str = "platt"


@dataclass
class IsotonicParams:
    # per horizon: ascending block-start thresholds and the block values
    x: dict[int, list[float]]
    y: dict[int, list[float]]
    y_min: float = 0.01
    y_max: float = 0.99
    kind: str = "isotonic"


@dataclass
class HistBinParams:
    values: dict[int, list[float]]
    n_bins: int = 15
    kind: str = "histbin"


@dataclass
class DACParams:
    T: dict[int, float]
    reference: np.ndarray
    knn_k: int = 10
    dist_mu: float = 0.0
    dist_sigma: float = 0.0
    modulation: float = 2.0
    kind: str = "dac"
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.reference = np.asarray(self.reference, dtype=float)
        if self.reference.ndim != 2 or len(self.reference) == 0:
            raise ValueError("DAC needs a nonempty 2-d reference embedding set")

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.reference)
        return self._tree


BaselineParams = TSParams | PlattParams | IsotonicParams | HistBinParams | DACParams


# ---------------------------------------------------------------------------
# Platt


def _platt_nll(ab, z, y):
    s = ab[0] * z + ab[1]
    f = -np.mean(y * log_expit(s) + (1 - y) * log_expit(-s))
    r = expit(s) - y
    return f, np.array([np.mean(r * z), np.mean(r)])


def fit_platt(p, y) -> tuple[float, float]:
    z = safe_logit(p)
    y = np.asarray(y, dtype=float)
    res = minimize(_platt_nll, np.array([1.0, 0.0]), args=(z, y), jac=True, method="L-BFGS-B",
                   options={"gtol": 1e-8, "maxiter": 500})
    return float(res.x[0]), float(res.x[1])


# ---------------------------------------------------------------------------
# isotonic regression (pool adjacent violators)


def pava(y, w=None) -> np.ndarray:
    """Nondecreasing least-squares fit to y (already ordered by x)."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    vals, wts, sizes = [], [], []
    for yi, wi in zip(y, w):
        vals.append(yi)
        wts.append(wi)
        sizes.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            v2, w2, s2 = vals.pop(), wts.pop(), sizes.pop()
            v1, w1, s1 = vals.pop(), wts.pop(), sizes.pop()
            wt = w1 + w2
            vals.append((v1 * w1 + v2 * w2) / wt)
            wts.append(wt)
            sizes.append(s1 + s2)
    return np.repeat(vals, sizes)


def fit_isotonic(p, y, y_min: float = 0.01, y_max: float = 0.99) -> tuple[list[float], list[float]]:
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    xs, inv = np.unique(p, return_inverse=True)
    if xs.size < 2:
        raise ValueError("isotonic calibration needs at least two distinct confidences")
    # tied x values are merged into one weighted point first
    w = np.bincount(inv).astype(float)
    ym = np.bincount(inv, weights=y) / w
    fit = np.clip(pava(ym, w), y_min, y_max)
    # keep block starts only
    starts = np.r_[True, np.diff(fit) != 0]
    return xs[starts].tolist(), fit[starts].tolist()


def apply_isotonic(xs, ys, p) -> np.ndarray:
    i = np.searchsorted(np.asarray(xs), np.asarray(p, dtype=float), side="right") - 1
    return np.asarray(ys)[np.clip(i, 0, len(ys) - 1)]


# ---------------------------------------------------------------------------
# histogram binning


def fit_histbin(p, y, n_bins: int = 15) -> list[float]:
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    idx = bin_index(p, n_bins)
    cnt = np.bincount(idx, minlength=n_bins)
    pos = np.bincount(idx, weights=y, minlength=n_bins)
    glob = float(y.mean())
    return [float(pos[b] / cnt[b]) if cnt[b] else glob for b in range(n_bins)]


# ---------------------------------------------------------------------------
# density-aware temperature (kNN distance in embedding space)


def knn_mean_distance(tree: cKDTree, queries: np.ndarray, k: int, exclude_self: bool = False) -> np.ndarray:
    kk = k + 1 if exclude_self else k
    kk = min(kk, tree.n)
    d, _ = tree.query(queries, k=kk)
    d = np.atleast_2d(d).reshape(len(queries), -1)
    if exclude_self:
        d = d[:, 1:]
    return d.mean(axis=1)


def dac_normalized_distance(params: DACParams, emb: np.ndarray) -> np.ndarray:
    d = knn_mean_distance(params.tree, np.atleast_2d(emb), params.knn_k)
    return np.clip(d / (params.dist_mu + 2.0 * params.dist_sigma), 0.0, 1.0)


def _fit_dac(p, y, emb, horizons, knn_k=10, modulation=2.0) -> DACParams:
    emb = np.asarray(emb, dtype=float)
    tree = cKDTree(emb)
    d_ref = knn_mean_distance(tree, emb, knn_k, exclude_self=True)
    mu, sigma = float(d_ref.mean()), float(d_ref.std())
    dn = np.clip(d_ref / (mu + 2.0 * sigma), 0.0, 1.0)
    scale = np.exp(modulation * dn)
    T = {}
    for j, k in enumerate(horizons):
        # temperature fitted with the density modulation in place
        T[int(k)] = fit_temperature_logits(safe_logit(p[:, j]) / scale, y[:, j], T_BOUNDS)
    return DACParams(T=T, reference=emb, knn_k=knn_k, dist_mu=mu, dist_sigma=sigma,
                     modulation=modulation, _tree=tree)


# ---------------------------------------------------------------------------


def fit_baseline(kind: str, p, labels, horizons: Sequence[int], embedding=None, **kw) -> BaselineParams:
    p = np.asarray(p, dtype=float)
    y = np.asarray(labels, dtype=float)
    hs = [int(k) for k in horizons]
    if kind == "ts":
        return TSParams({k: fit_temperature(p[:, j], y[:, j]) for j, k in enumerate(hs)})
    if kind == "platt":
        ab = [fit_platt(p[:, j], y[:, j]) for j in range(len(hs))]
        return PlattParams({k: a for k, (a, _) in zip(hs, ab)}, {k: b for k, (_, b) in zip(hs, ab)})
    if kind == "isotonic":
        fits = [fit_isotonic(p[:, j], y[:, j]) for j in range(len(hs))]
        return IsotonicParams({k: f[0] for k, f in zip(hs, fits)}, {k: f[1] for k, f in zip(hs, fits)})
    if kind == "histbin":
        n_bins = kw.get("n_bins", 15)
        return HistBinParams({k: fit_histbin(p[:, j], y[:, j], n_bins) for j, k in enumerate(hs)}, n_bins)
    if kind == "dac":
        if embedding is None:
            raise ValueError("DAC baseline needs per-frame embeddings")
        return _fit_dac(p, y, embedding, hs, kw.get("knn_k", 10), kw.get("modulation", 2.0))
    raise ValueError(f"unknown baseline {kind!r}")


def apply_baseline(params: BaselineParams, p, horizons: Sequence[int], embedding=None) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    hs = [int(k) for k in horizons]
    if isinstance(params, TSParams):
        T = np.array([params.T[k] for k in hs])
        return expit(safe_logit(p) / T[None, :])
    if isinstance(params, PlattParams):
        a = np.array([params.a[k] for k in hs])
        b = np.array([params.b[k] for k in hs])
        return expit(a[None, :] * safe_logit(p) + b[None, :])
    if isinstance(params, IsotonicParams):
        return np.stack([apply_isotonic(params.x[k], params.y[k], p[:, j]) for j, k in enumerate(hs)], axis=1)
    if isinstance(params, HistBinParams):
        idx = bin_index(p.ravel(), params.n_bins).reshape(p.shape)
        vals = np.array([params.values[k] for k in hs])  # (H, B)
        return vals[np.arange(len(hs))[None, :], idx]
    if isinstance(params, DACParams):
        if embedding is None:
            raise ValueError("DAC baseline needs per-frame embeddings")
        dn = dac_normalized_distance(params, embedding)
        T = np.array([params.T[k] for k in hs])
        return expit(safe_logit(p) / (T[None, :] * np.exp(params.modulation * dn)[:, None]))
    raise TypeError(f"unknown baseline params {type(params).__name__}")


def baseline_to_json(params: BaselineParams) -> dict:
    def keyed(d):
        return {str(k): v for k, v in d.items()}

    if isinstance(params, TSParams):
        return {"kind": "ts", "T": keyed(params.T)}
    if isinstance(params, PlattParams):
        return {"kind": "platt", "a": keyed(params.a), "b": keyed(params.b)}
    if isinstance(params, IsotonicParams):
        return {"kind": "isotonic", "x": keyed(params.x), "y": keyed(params.y),
                "y_min": params.y_min, "y_max": params.y_max}
    if isinstance(params, HistBinParams):
        return {"kind": "histbin", "values": keyed(params.values), "n_bins": params.n_bins}
    if isinstance(params, DACParams):
        return {"kind": "dac", "T": keyed(params.T), "reference": params.reference.tolist(),
                "knn_k": params.knn_k, "dist_mu": params.dist_mu, "dist_sigma": params.dist_sigma,
                "modulation": params.modulation}
    raise TypeError(type(params).__name__)


def baseline_from_json(d: dict) -> BaselineParams:
    def unkey(m):
        return {int(k): v for k, v in m.items()}

    kind = d["kind"]
    if kind == "ts":
        return TSParams(unkey(d["T"]))
    if kind == "platt":
        return PlattParams(unkey(d["a"]), unkey(d["b"]))
    if kind == "isotonic":
        return IsotonicParams(unkey(d["x"]), unkey(d["y"]), d["y_min"], d["y_max"])
    if kind == "histbin":
        return HistBinParams(unkey(d["values"]), d["n_bins"])
    if kind == "dac":
        return DACParams(unkey(d["T"]), np.asarray(d["reference"]), d["knn_k"], d["dist_mu"],
                         d["dist_sigma"], d["modulation"])
    raise ValueError(f"unknown baseline kind {kind!r}")
