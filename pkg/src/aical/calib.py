"""Anomaly-conditioned temperature scaling.

    T_eff = T_k * exp(w_rho * rho + w_delta * delta)
    p_cal = sigmoid(logit(p_bar) / T_eff)

``p_bar`` is the test-time-augmentation average of the predictor's per-view
confidences. Fitting runs in two stages: per-horizon T_k on in-distribution
calibration data (bounded scalar NLL minimisation), then the two shared
weights on the ID + augmented pool with T_k frozen (L-BFGS-B, w >= 0).
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.special import expit, log_expit

log = logging.getLogger(__name__)

EPS = 1e-6
T_BOUNDS = (0.1, 20.0)
W_BOUNDS = (0.0, 10.0)


def clamp_prob(p, eps: float = EPS):
    return np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)


def safe_logit(p, eps: float = EPS):
    p = clamp_prob(p, eps)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# test-time augmentation


@dataclass(frozen=True)
class TtaConfig:
    M: int = 9
    contrast: tuple[float, float] = (0.7, 1.3)
    saturation: tuple[float, float] = (0.7, 1.3)
    noise_sigma: tuple[float, float] = (0.0, 0.05)
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("TTA needs at least one view")

    def sample(self, rng: np.random.Generator, n: int) -> dict[str, np.ndarray]:
        """Jitter parameters of shape (n, M); view 0 is the identity."""
        shape = (n, self.M)
        c = rng.uniform(*self.contrast, size=shape)
        s = rng.uniform(*self.saturation, size=shape)
        sig = rng.uniform(*self.noise_sigma, size=shape)
        c[:, 0] = 1.0
        s[:, 0] = 1.0
        sig[:, 0] = 0.0
        return {"contrast": c, "saturation": s, "noise_sigma": sig}


def tta_average(view_confidences) -> float | np.ndarray:
    """Mean over the last axis of per-view confidences."""
    v = np.asarray(view_confidences, dtype=float)
    if v.size == 0 or v.shape[-1] == 0:
        raise ValueError("need at least one view")
    if np.any((v < 0) | (v > 1)) or np.isnan(v).any():
        raise ValueError("view confidences must lie in [0, 1]")
    out = v.mean(axis=-1)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# parameters and forward map


@dataclass
class CalibratorParams:
    T: dict[int, float]
    w_rho: float = 0.0
    w_delta: float = 0.0
    mode: str = "temperature"  # or "shrinkage"
    fit_info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.T = {int(k): float(v) for k, v in self.T.items()}
        lo, hi = T_BOUNDS
        for k, v in self.T.items():
            if not lo - 1e-12 <= v <= hi + 1e-12:
                raise ValueError(f"T_{k}={v} outside {T_BOUNDS}")
        if self.w_rho < 0 or self.w_delta < 0:
            raise ValueError("anomaly weights must be nonnegative")
        if self.mode not in ("temperature", "shrinkage"):
            raise ValueError(f"unknown calibrator mode {self.mode!r}")

    @property
    def horizons(self) -> tuple[int, ...]:
        return tuple(sorted(self.T))

    def temps(self, horizons: Sequence[int]) -> np.ndarray:
        try:
            return np.array([self.T[int(k)] for k in horizons])
        except KeyError as e:
            raise KeyError(f"no base temperature for horizon {e.args[0]}") from None

    def to_json(self) -> dict:
        return {"T": {str(k): v for k, v in sorted(self.T.items())}, "w_rho": self.w_rho,
                "w_delta": self.w_delta, "mode": self.mode, "fit_info": self.fit_info}

    @classmethod
    def from_json(cls, d: dict) -> "CalibratorParams":
        return cls(T={int(k): v for k, v in d["T"].items()}, w_rho=float(d["w_rho"]),
                   w_delta=float(d["w_delta"]), mode=d.get("mode", "temperature"),
                   fit_info=d.get("fit_info", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def effective_temperature(params: CalibratorParams, rho, delta, k: int):
    if int(k) not in params.T:
        raise KeyError(f"no base temperature for horizon {k}")
    return params.T[int(k)] * np.exp(params.w_rho * np.asarray(rho) + params.w_delta * np.asarray(delta))


def calibrate(p_bar, T_eff, eps: float = EPS):
    """sigmoid(logit(p_bar) / T_eff) with p_bar clamped to [eps, 1 - eps]."""
    out = expit(safe_logit(p_bar, eps) / np.asarray(T_eff, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def shrink(p, scale):
    """0.5 + (p - 0.5) / scale, the probability-space counterpart of temperature."""
    return 0.5 + (np.asarray(p, dtype=float) - 0.5) / scale


def apply_calibrator(params: CalibratorParams, p, rho, delta, horizons: Sequence[int]) -> np.ndarray:
    """Calibrate an (n, H) confidence block given per-frame scores (n,)."""
    p = np.asarray(p, dtype=float)
    s = params.w_rho * np.asarray(rho, dtype=float) + params.w_delta * np.asarray(delta, dtype=float)
    if params.mode == "shrinkage":
        return shrink(p, np.exp(s)[:, None])
    T = params.temps(horizons)
    return expit(safe_logit(p) / (T[None, :] * np.exp(s)[:, None]))


# ---------------------------------------------------------------------------
# stage one: per-horizon base temperatures


def _ts_nll(T, z, y):
    zt = z / T
    return -np.mean(y * log_expit(zt) + (1 - y) * log_expit(-zt))


def fit_temperature(p, y, bounds=T_BOUNDS, xatol: float = 1e-6) -> float:
    """NLL-optimal temperature for one horizon, searched over ``bounds``."""
    return fit_temperature_logits(safe_logit(np.asarray(p, dtype=float).ravel()), y, bounds, xatol)


def fit_temperature_logits(z, y, bounds=T_BOUNDS, xatol: float = 1e-6) -> float:
    z = np.asarray(z, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0 or y.min() == y.max():
        warnings.warn("single-class horizon; using T = 1", stacklevel=3)
        return 1.0
    if np.all(z == 0):
        return 1.0
    res = minimize_scalar(_ts_nll, bounds=bounds, args=(z, y), method="bounded",
                          options={"xatol": xatol, "maxiter": 500})
    T = float(res.x)
    # the bounded search never evaluates exactly at T=1
    return T if _ts_nll(T, z, y) <= _ts_nll(1.0, z, y) else 1.0


def fit_base_temperatures(p, labels, horizons: Sequence[int], bounds=T_BOUNDS) -> dict[int, float]:
    """One temperature per horizon; p and labels are (n, H)."""
    p = np.asarray(p, dtype=float)
    labels = np.asarray(labels)
    return {int(k): fit_temperature(p[:, j], labels[:, j], bounds) for j, k in enumerate(horizons)}


# ---------------------------------------------------------------------------
# stage two: shared anomaly weights


@dataclass
class WeightFit:
    w_rho: float
    w_delta: float
    nll: float
    nll_start: float
    converged: bool
    n_iter: int
    message: str


def _weights_objective(w, z, y, rho, delta, T, mode):
    s = w[0] * rho + w[1] * delta  # (n,)
    es = np.exp(-s)[:, None]
    if mode == "temperature":
        zz = z * es / T[None, :]  # calibrated logits
        f = -np.mean(y * log_expit(zz) + (1 - y) * log_expit(-zz))
        # dNLL/dzz = sigmoid(zz) - y ; dzz/ds = -zz
        g_s = np.mean((expit(zz) - y) * (-zz), axis=1)
    else:
        p = z  # probabilities in shrinkage mode
        q = np.clip(0.5 + (p - 0.5) * es, EPS, 1 - EPS)
        f = -np.mean(y * np.log(q) + (1 - y) * np.log1p(-q))
        dq = -(p - 0.5) * es
        g_s = np.mean((q - y) / (q * (1 - q)) * dq, axis=1)
    n = z.shape[0]
    g = np.array([np.sum(g_s * rho), np.sum(g_s * delta)]) / n
    return f, g


def balance_pool(n_id: int, n_aug: int, seed: int = 0, ratio: float = 2.0) -> np.ndarray:
    """Indices of augmented rows to keep: all, or a seeded uniform subsample of ratio * n_id."""
    if n_aug <= ratio * n_id:
        return np.arange(n_aug)
    keep = int(ratio * n_id)
    return np.sort(np.random.default_rng(seed).choice(n_aug, size=keep, replace=False))


def fit_anomaly_weights(p, labels, rho, delta, T, mode: str = "temperature", bounds=W_BOUNDS,
                        gtol: float = 1e-6, maxiter: int = 500,
                        use_rho: bool = True, use_delta: bool = True) -> WeightFit:
    """Fit (w_rho, w_delta) >= 0 by joint NLL over all horizons with T fixed.

    p, labels: (n, H); rho, delta: (n,); T: (H,) base temperatures (ignored in
    shrinkage mode). Disabled scores have their weight pinned at zero.
    """
    p = np.asarray(p, dtype=float)
    y = np.asarray(labels, dtype=float)
    rho = np.asarray(rho, dtype=float) if use_rho else np.zeros(p.shape[0])
    delta = np.asarray(delta, dtype=float) if use_delta else np.zeros(p.shape[0])
    T = np.asarray(T, dtype=float)
    z = safe_logit(p) if mode == "temperature" else clamp_prob(p)
    b = [bounds if use_rho else (0.0, 0.0), bounds if use_delta else (0.0, 0.0)]
    x0 = np.zeros(2)
    f0, _ = _weights_objective(x0, z, y, rho, delta, T, mode)
    res = minimize(_weights_objective, x0, args=(z, y, rho, delta, T, mode), jac=True,
                   method="L-BFGS-B", bounds=b,
                   options={"gtol": gtol, "maxiter": maxiter, "ftol": 1e-15})
    w = np.clip(res.x, 0.0, None)
    f = float(res.fun)
    if f > f0:  # never return something worse than the starting point
        w, f = x0, float(f0)
    if not res.success:
        log.warning("anomaly-weight fit did not converge: %s", res.message)
    return WeightFit(float(w[0]), float(w[1]), f, float(f0), bool(res.success), int(res.nit), str(res.message))


def fit_calibrator(p_id, y_id, p_aug, y_aug, rho_id, delta_id, rho_aug, delta_aug,
                   horizons: Sequence[int], seed: int = 0, mode: str = "temperature",
                   use_rho: bool = True, use_delta: bool = True, t_bounds=T_BOUNDS,
                   w_bounds=W_BOUNDS, gtol: float = 1e-6, maxiter: int = 500,
                   balance_ratio: float = 2.0) -> CalibratorParams:
    """Both fitting stages. ``p_*`` are (n, H) blocks, scores (n,)."""
    if mode == "temperature":
        T = fit_base_temperatures(p_id, y_id, horizons, t_bounds)
    else:
        T = {int(k): 1.0 for k in horizons}
    keep = balance_pool(len(p_id), len(p_aug), seed, balance_ratio)
    P = np.concatenate([p_id, np.asarray(p_aug)[keep]])
    Y = np.concatenate([y_id, np.asarray(y_aug)[keep]])
    R = np.concatenate([rho_id, np.asarray(rho_aug)[keep]])
    D = np.concatenate([delta_id, np.asarray(delta_aug)[keep]])
    wf = fit_anomaly_weights(P, Y, R, D, np.array([T[k] for k in horizons]), mode=mode, bounds=w_bounds,
                             gtol=gtol, maxiter=maxiter, use_rho=use_rho, use_delta=use_delta)
    info = {"n_id": int(len(p_id)), "n_aug": int(len(p_aug)), "n_aug_used": int(len(keep)),
            "nll": wf.nll, "nll_start": wf.nll_start, "converged": wf.converged, "n_iter": wf.n_iter}
    return CalibratorParams(T=T, w_rho=wf.w_rho, w_delta=wf.w_delta, mode=mode, fit_info=info)
