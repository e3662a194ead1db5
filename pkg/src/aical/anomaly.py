"""Perception and dynamics anomaly scores.

rho: windowed mean reconstruction error, z-scored against in-distribution
calibration statistics and clipped to [0, 1].

delta: Mahalanobis distance of a 12-d causal feature vector (latent-std
summary, steering patterns, steering/latent temporal statistics) from the
in-distribution feature cloud, normalised the same way.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import cholesky, solve_triangular

from .datamodel import DataError, SequenceLog

FEATURE_NAMES = (
    "mc_mean", "mc_max", "mc_volatility",
    "max_freeze_run", "cond_freeze_run", "cond_freeze_frac",
    "reversal_rate", "jerk", "mean_steering",
    "xcorr_peak", "hf_ratio", "reaction_delay",
)
N_FEATURES = len(FEATURE_NAMES)


class InsufficientContextError(DataError):
    pass


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureParams:
    m_w: int = 100
    freeze_threshold: float = 0.02
    active_threshold: float = 0.15
    max_lag: int = 20
    hf_cutoff: float = 0.25  # fraction of Nyquist


@dataclass(frozen=True)
class DynamicsFeatures:
    f: tuple[float, ...]

    def __post_init__(self):
        if len(self.f) != N_FEATURES:
            raise ValueError(f"expected {N_FEATURES} features, got {len(self.f)}")

    def __getattr__(self, name):
        try:
            return self.f[FEATURE_NAMES.index(name)]
        except ValueError:
            raise AttributeError(name) from None

    def as_array(self) -> np.ndarray:
        return np.asarray(self.f, dtype=float)


@dataclass(frozen=True)
class AnomalyScores:
    rho: float
    delta: float
    features: DynamicsFeatures
    maha_distance: float


@dataclass(frozen=True)
class NormalizationStats:
    mu_rho: float
    sigma_rho: float
    mu_in: np.ndarray
    sigma_in: np.ndarray
    mu_delta: float
    sigma_delta: float
    scaler_mean: np.ndarray
    scaler_scale: np.ndarray
    alpha: float = 2.0
    lam: float = 1e-6
    m_w: int = 100
    features: FeatureParams = FeatureParams()

    def __post_init__(self):
        if not (self.sigma_rho > 0 and self.sigma_delta > 0):
            raise StatsError("sigma_rho and sigma_delta must be positive")
        # cached lower Cholesky factor of the regularised covariance
        object.__setattr__(self, "_chol", _regularized_cholesky(self.sigma_in, self.lam)[0])

    @property
    def chol(self) -> np.ndarray:
        return self._chol

    def to_json(self) -> dict:
        return {
            "mu_rho": self.mu_rho, "sigma_rho": self.sigma_rho,
            "mu_in": self.mu_in.tolist(), "sigma_in": self.sigma_in.tolist(),
            "mu_delta": self.mu_delta, "sigma_delta": self.sigma_delta,
            "scaler_mean": self.scaler_mean.tolist(), "scaler_scale": self.scaler_scale.tolist(),
            "alpha": self.alpha, "lambda": self.lam, "m_w": self.m_w,
            "features": asdict(self.features),
        }

    @classmethod
    def from_json(cls, d: dict) -> "NormalizationStats":
        return cls(
            mu_rho=float(d["mu_rho"]), sigma_rho=float(d["sigma_rho"]),
            mu_in=np.asarray(d["mu_in"], dtype=float), sigma_in=np.asarray(d["sigma_in"], dtype=float),
            mu_delta=float(d["mu_delta"]), sigma_delta=float(d["sigma_delta"]),
            scaler_mean=np.asarray(d["scaler_mean"], dtype=float),
            scaler_scale=np.asarray(d["scaler_scale"], dtype=float),
            alpha=float(d["alpha"]), lam=float(d["lambda"]), m_w=int(d["m_w"]),
            features=FeatureParams(**d.get("features", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# perception score


def perception_score_raw(window, m_w: int = 100) -> float:
    w = np.asarray(window, dtype=float)
    if w.shape[0] < m_w:
        raise InsufficientContextError(f"need {m_w} frames of context, got {w.shape[0]}")
    return float(w[-m_w:].mean())


def normalize_score(raw, mu: float, sigma: float, alpha: float = 2.0):
    """clip((raw - mu) / (alpha * sigma), 0, 1); +inf maps to 1."""
    if not sigma > 0:
        raise StatsError(f"sigma must be positive, got {sigma}")
    raw = np.asarray(raw, dtype=float)
    if np.isnan(raw).any():
        raise ValueError("NaN anomaly score")
    out = np.clip((raw - mu) / (alpha * sigma), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# dynamics features


def _longest_run(mask: np.ndarray) -> np.ndarray:
    """Longest run of True along axis 1 of a 2-d boolean array."""
    n, m = mask.shape
    run = np.zeros(n, dtype=np.int64)
    best = np.zeros(n, dtype=np.int64)
    for j in range(m):
        run = np.where(mask[:, j], run + 1, 0)
        np.maximum(best, run, out=best)
    return best


def _resample_nearest(traces: np.ndarray, m: int) -> np.ndarray:
    k = traces.shape[1]
    idx = np.minimum((np.arange(m) * k) // m, k - 1)
    return traces[:, idx]


def _features_from_windows(U: np.ndarray, traces: np.ndarray, p: FeatureParams) -> np.ndarray:
    """Feature matrix (n, 12) from steering windows U (n, m) and traces (n, K)."""
    n, m = U.shape
    if traces.shape[1] < 1:
        raise DataError("latent_std_trace is empty; dynamics features need traces (CSV logs carry none)")
    F = np.empty((n, N_FEATURES))
    F[:, 0] = traces.mean(axis=1)
    F[:, 1] = traces.max(axis=1)
    # constant traces get an exact zero rather than rounding residue
    F[:, 2] = np.where(np.ptp(traces, axis=1) > 0, traces.std(axis=1), 0.0)

    # a run of r frozen differences spans r + 1 held frames
    dU = np.diff(U, axis=1)
    frozen = np.abs(dU) < p.freeze_threshold
    run = _longest_run(frozen)
    F[:, 3] = np.where(run > 0, run + 1, 0)
    active = np.abs(U[:, 1:]) > p.active_threshold
    cond = frozen & active
    crun = _longest_run(cond)
    F[:, 4] = np.where(crun > 0, crun + 1, 0)
    n_active = active.sum(axis=1)
    F[:, 5] = np.divide(cond.sum(axis=1), n_active, out=np.zeros(n), where=n_active > 0)

    # zeros carry the previous nonzero sign
    S = np.sign(U)
    pos = np.where(S != 0, np.arange(m), 0)
    np.maximum.accumulate(pos, axis=1, out=pos)
    Sf = np.take_along_axis(S, pos, axis=1)
    F[:, 6] = (Sf[:, 1:] * Sf[:, :-1] < 0).sum(axis=1) / (m - 1)
    F[:, 7] = np.abs(U[:, 2:] - 2 * U[:, 1:-1] + U[:, :-2]).mean(axis=1) if m > 2 else 0.0
    F[:, 8] = U.mean(axis=1)

    # steering vs latent-std cross-correlation, steering lagging the latent signal
    a = U - U.mean(axis=1, keepdims=True)
    b = _resample_nearest(traces, m)
    b = b - b.mean(axis=1, keepdims=True)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 1e-12) & (nb > 1e-12)
    a = np.divide(a, na[:, None], out=np.zeros_like(a), where=ok[:, None])
    b = np.divide(b, nb[:, None], out=np.zeros_like(b), where=ok[:, None])
    L = min(p.max_lag, m - 1)
    xc = np.stack([(a[:, lag:] * b[:, : m - lag]).sum(axis=1) for lag in range(L + 1)], axis=1)
    lag = np.argmax(xc, axis=1)
    F[:, 9] = np.where(ok, xc[np.arange(n), lag], 0.0)
    F[:, 11] = np.where(ok, lag, 0)

    power = np.abs(np.fft.rfft(U, axis=1)) ** 2
    frac_nyq = 2.0 * np.arange(power.shape[1]) / m
    total = power[:, 1:].sum(axis=1)
    high = power[:, frac_nyq > p.hf_cutoff].sum(axis=1)
    F[:, 10] = np.divide(high, total, out=np.zeros(n), where=total > 1e-24)
    return F


def dynamics_features(steering_window, latent_std_trace, params: FeatureParams = FeatureParams(),
                      horizon: int | None = None) -> DynamicsFeatures:
    """Features of one context window.

    ``horizon`` truncates the latent-std trace to its first ``horizon`` steps
    (the horizon-dependent latent-std summaries); default uses the whole trace.
    """
    u = np.asarray(steering_window, dtype=float)
    if u.shape[0] != params.m_w:
        raise InsufficientContextError(f"steering window must have {params.m_w} frames, got {u.shape[0]}")
    tr = np.asarray(latent_std_trace, dtype=float)
    if horizon is not None:
        tr = tr[:horizon]
    return DynamicsFeatures(tuple(_features_from_windows(u[None], tr[None], params)[0].tolist()))


def sequence_features(seq: SequenceLog, params: FeatureParams = FeatureParams(),
                      horizon: int | None = None) -> np.ndarray:
    """Feature rows for frames m_w-1 .. n-1 of a sequence (causal windows)."""
    m = params.m_w
    if len(seq) < m:
        return np.empty((0, N_FEATURES))
    U = sliding_window_view(seq.steering, m)
    tr = seq.latent_std[m - 1:]
    if horizon is not None:
        tr = tr[:, :horizon]
    return _features_from_windows(U, tr, params)


def sequence_rho_raw(seq: SequenceLog, m_w: int = 100) -> np.ndarray:
    if len(seq) < m_w:
        return np.empty(0)
    return sliding_window_view(seq.recon_error, m_w).mean(axis=1)


# ---------------------------------------------------------------------------
# normalisation statistics and Mahalanobis distance


def _regularized_cholesky(cov: np.ndarray, lam: float, lam_max: float = 1e-2):
    d = cov.shape[0]
    while True:
        try:
            return cholesky(cov + lam * np.eye(d), lower=True), lam
        except np.linalg.LinAlgError:
            if lam * 10 > lam_max * (1 + 1e-9):
                raise StatsError(f"covariance not positive definite even with lambda={lam:g}") from None
            lam *= 10


def _standardizer(F: np.ndarray):
    mean = F.mean(axis=0)
    scale = F.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)  # constant dimensions pass through unscaled
    return mean, scale


def _maha(Z: np.ndarray, mu: np.ndarray, chol: np.ndarray) -> np.ndarray:
    y = solve_triangular(chol, (Z - mu).T, lower=True, check_finite=False)
    return np.sqrt((y * y).sum(axis=0))


def fit_stats_from_arrays(rho_raw: np.ndarray, feats: np.ndarray, alpha: float = 2.0, lam: float = 1e-6,
                          features: FeatureParams = FeatureParams()) -> NormalizationStats:
    rho_raw = np.asarray(rho_raw, dtype=float)
    feats = np.asarray(feats, dtype=float)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise StatsError("need at least two feature rows to fit normalisation statistics")
    if feats.shape[0] <= feats.shape[1]:
        warnings.warn(f"only {feats.shape[0]} feature rows for {feats.shape[1]} dimensions", stacklevel=2)
    if not np.isfinite(feats).all():
        raise StatsError("non-finite dynamics features in calibration split")
    mean, scale = _standardizer(feats)
    Z = (feats - mean) / scale
    # centred by construction; exact zeros keep distance(mean) == 0
    mu_in = np.zeros(feats.shape[1])
    sigma_in = np.atleast_2d(np.cov(Z, rowvar=False))
    chol, lam = _regularized_cholesky(sigma_in, lam)
    dist = _maha(Z, mu_in, chol)
    sig_rho = float(rho_raw.std(ddof=1)) if rho_raw.size > 1 else 0.0
    sig_delta = float(dist.std(ddof=1))
    tiny = 1e-12
    if sig_rho <= tiny or sig_delta <= tiny:
        warnings.warn("degenerate in-distribution score spread; flooring sigma at 1e-12", stacklevel=2)
    return NormalizationStats(
        mu_rho=float(rho_raw.mean()), sigma_rho=max(sig_rho, tiny),
        mu_in=mu_in, sigma_in=sigma_in,
        mu_delta=float(dist.mean()), sigma_delta=max(sig_delta, tiny),
        scaler_mean=mean, scaler_scale=scale,
        alpha=alpha, lam=lam, m_w=features.m_w, features=features,
    )


def fit_normalization(cal_sequences: Sequence[SequenceLog], params: FeatureParams = FeatureParams(),
                      alpha: float = 2.0, lam: float = 1e-6) -> NormalizationStats:
    """Freeze rho/delta statistics on the in-distribution calibration split."""
    rho = [sequence_rho_raw(s, params.m_w) for s in cal_sequences]
    feats = [sequence_features(s, params) for s in cal_sequences]
    rho = np.concatenate(rho) if rho else np.empty(0)
    feats = np.concatenate(feats) if feats else np.empty((0, N_FEATURES))
    if feats.shape[0] < N_FEATURES + 1:
        raise StatsError(f"calibration split yields {feats.shape[0]} feature vectors; need >= {N_FEATURES + 1}")
    return fit_stats_from_arrays(rho, feats, alpha, lam, params)


def mahalanobis(f, stats: NormalizationStats):
    """Distance of raw feature vector(s) from the in-distribution mean, via Cholesky solve."""
    f = np.asarray(f, dtype=float)
    if not np.isfinite(f).all():
        raise ValueError("non-finite feature vector")
    Z = (np.atleast_2d(f) - stats.scaler_mean) / stats.scaler_scale
    d = _maha(Z, stats.mu_in, stats.chol)
    return float(d[0]) if f.ndim == 1 else d


# ---------------------------------------------------------------------------
# scoring


def score_frame(recon_window, steering_window, latent_std_trace, stats: NormalizationStats) -> AnomalyScores:
    """Scores for the last frame of a causal context window."""
    m = stats.m_w
    raw = perception_score_raw(recon_window, m)
    u = np.asarray(steering_window, dtype=float)
    if u.shape[0] < m:
        raise InsufficientContextError(f"need {m} frames of context, got {u.shape[0]}")
    feats = dynamics_features(u[-m:], latent_std_trace, stats.features)
    d = mahalanobis(feats.as_array(), stats)
    return AnomalyScores(
        rho=normalize_score(raw, stats.mu_rho, stats.sigma_rho, stats.alpha),
        delta=normalize_score(d, stats.mu_delta, stats.sigma_delta, stats.alpha),
        features=feats,
        maha_distance=d,
    )


@dataclass
class SequenceScores:
    index: np.ndarray  # row indices into the sequence that received scores
    rho: np.ndarray
    delta: np.ndarray
    maha: np.ndarray
    features: np.ndarray
    n_skipped: int


def score_sequence(seq: SequenceLog, stats: NormalizationStats) -> SequenceScores:
    m = stats.m_w
    feats = sequence_features(seq, stats.features)
    raw = sequence_rho_raw(seq, m)
    n_scored = feats.shape[0]
    d = mahalanobis(feats, stats) if n_scored else np.empty(0)
    return SequenceScores(
        index=np.arange(m - 1, m - 1 + n_scored),
        rho=np.atleast_1d(normalize_score(raw, stats.mu_rho, stats.sigma_rho, stats.alpha)) if n_scored else np.empty(0),
        delta=np.atleast_1d(normalize_score(d, stats.mu_delta, stats.sigma_delta, stats.alpha)) if n_scored else np.empty(0),
        maha=d,
        features=feats,
        n_skipped=len(seq) - n_scored,
    )


def attach_scores(seq: SequenceLog, stats: NormalizationStats) -> tuple[SequenceLog, int]:
    """Scored copy of ``seq`` restricted to frames with full context."""
    sc = score_sequence(seq, stats)
    out = seq.subset(sc.index)
    out.rho = sc.rho
    out.delta = sc.delta
    out.meta["maha"] = sc.maha
    return out, sc.n_skipped
