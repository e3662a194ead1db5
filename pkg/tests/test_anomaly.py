import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aical.anomaly import (
    FEATURE_NAMES,
    FeatureParams,
    InsufficientContextError,
    NormalizationStats,
    StatsError,
    attach_scores,
    dynamics_features,
    fit_normalization,
    fit_stats_from_arrays,
    mahalanobis,
    normalize_score,
    perception_score_raw,
    score_frame,
    score_sequence,
    sequence_features,
)
from aical.sim import AnomalySpec, InjectorParams, SimConfig, simulate


def spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + 0.1 * np.eye(d)


# ---------------------------------------------------------------------------
# perception score


@pytest.mark.parametrize("window, expected", [
    (np.zeros(100), 0.0),
    (np.full(100, 0.37), 0.37),
    (np.r_[np.full(50, 0.1), np.full(50, 0.3)], 0.2),
])
def test_perception_raw(window, expected):
    assert perception_score_raw(window) == pytest.approx(expected, abs=1e-15)


def test_perception_short_window():
    with pytest.raises(InsufficientContextError):
        perception_score_raw(np.zeros(99))


@pytest.mark.parametrize("raw, expected", [(1.0, 0.0), (1.0 + 2 * 0.5, 1.0), (1.5, 0.5), (0.2, 0.0),
                                           (np.inf, 1.0), (-np.inf, 0.0)])
def test_normalize_score(raw, expected):
    assert normalize_score(raw, mu=1.0, sigma=0.5) == pytest.approx(expected)


@pytest.mark.parametrize("sigma", [0.0, -1.0])
def test_normalize_rejects_sigma(sigma):
    with pytest.raises(StatsError):
        normalize_score(1.0, 0.0, sigma)


@given(st.floats(allow_nan=False), st.floats(-1e6, 1e6), st.floats(1e-9, 1e6))
def test_normalize_clipped(raw, mu, sigma):
    v = normalize_score(raw, mu, sigma)
    assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------------------
# dynamics features


def feats(u, trace=(0.1,) * 50, **kw):
    return dynamics_features(np.asarray(u, float), trace, FeatureParams(**kw))


def test_constant_steering():
    f = feats(np.full(100, 0.5), np.full(50, 0.2))
    assert f.max_freeze_run == 100
    assert f.cond_freeze_run == 100
    assert f.cond_freeze_frac == 1.0
    assert f.reversal_rate == 0.0
    assert f.jerk == 0.0
    assert f.mean_steering == pytest.approx(0.5)
    assert f.mc_volatility == 0.0
    assert f.xcorr_peak == 0.0 and f.reaction_delay == 0


def test_alternating_steering():
    u = 0.5 * (-1.0) ** np.arange(100)
    f = feats(u)
    assert f.reversal_rate == 1.0
    assert f.max_freeze_run == 0
    assert f.jerk == pytest.approx(2.0)
    assert f.hf_ratio == pytest.approx(1.0)


def test_zero_steering_is_defined():
    f = feats(np.zeros(100), np.zeros(50))
    assert np.isfinite(f.as_array()).all()
    assert f.xcorr_peak == 0.0 and f.reaction_delay == 0 and f.hf_ratio == 0.0


def test_zeros_do_not_break_sign():
    u = np.zeros(100)
    u[10], u[50] = 0.3, 0.4
    assert feats(u).reversal_rate == 0.0
    u[50] = -0.4
    assert feats(u).reversal_rate == pytest.approx(1 / 99)


def test_mc_summaries():
    tr = np.array([0.1, 0.2, 0.6])
    f = feats(np.zeros(100), tr)
    assert (f.mc_mean, f.mc_max) == pytest.approx((0.3, 0.6))
    assert f.mc_volatility == pytest.approx(np.std(tr))
    f2 = dynamics_features(np.zeros(100), tr, horizon=2)
    assert f2.mc_max == pytest.approx(0.2)


def test_reaction_delay_recovers_shift():
    rng = np.random.default_rng(0)
    base = np.convolve(rng.normal(size=200), np.ones(5) / 5, mode="same")
    trace = base[:100] - base[:100].min()
    u = np.r_[np.zeros(7), base[:93]] * 0.5  # steering lags the latent signal by 7 frames
    f = feats(u, trace)
    assert f.reaction_delay == 7
    assert f.xcorr_peak > 0.9


def test_cond_freeze_only_counts_active_steering():
    u = np.r_[np.full(40, 0.05), np.full(20, 0.5), np.linspace(0.45, -0.5, 40)]
    f = feats(u)
    assert f.max_freeze_run == 40
    assert f.cond_freeze_run == 20


def test_feature_vector_layout():
    assert len(FEATURE_NAMES) == 12
    with pytest.raises(InsufficientContextError):
        feats(np.zeros(50))


def test_injected_freeze_is_detected():
    inj = InjectorParams(latency_freeze=6)
    cfg = SimConfig(frames_per_sequence=400, injector=inj)
    seq, truth = simulate(cfg, AnomalySpec("latency", 5, onset=120), seed=4)
    runs = [r for r in truth.freeze_runs if r[1] == 30]
    assert runs
    start, length = runs[0]
    end = start + length  # first live frame after the freeze
    f = dynamics_features(seq.steering[end - 100:end], seq.latent_std[end - 1])
    assert f.max_freeze_run >= 30


# ---------------------------------------------------------------------------
# normalisation statistics and Mahalanobis


def test_identical_features_regularised():
    F = np.tile(np.arange(12.0), (30, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        st_ = fit_stats_from_arrays(np.linspace(0, 1, 30), F)
    np.testing.assert_array_equal(st_.sigma_in, 0.0)
    np.testing.assert_allclose(st_.chol @ st_.chol.T, 1e-6 * np.eye(12))
    assert np.all(mahalanobis(F, st_) == 0.0)


def test_two_dim_covariance_oracle(rng):
    F = rng.multivariate_normal([0, 0], [[1, 0], [0, 4]], size=500)
    st_ = fit_stats_from_arrays(rng.normal(size=500), F, features=FeatureParams())
    cov_raw = st_.scaler_scale[:, None] * st_.sigma_in * st_.scaler_scale[None, :]
    np.testing.assert_allclose(cov_raw, np.cov(F, rowvar=False), atol=1e-9)
    np.testing.assert_allclose(np.diag(cov_raw), [1, 4], rtol=0.2)


@pytest.mark.parametrize("d", [3, 12])
def test_mahalanobis_explicit_inverse(rng, d):
    for _ in range(20):
        F = rng.multivariate_normal(rng.normal(size=d), spd(rng, d), size=200)
        st_ = fit_stats_from_arrays(rng.normal(size=200), F)
        q = rng.normal(size=(10, d)) * 3
        Z = (q - st_.scaler_mean) / st_.scaler_scale - st_.mu_in
        inv = np.linalg.inv(st_.sigma_in + st_.lam * np.eye(d))
        ref = np.sqrt(np.einsum("ij,jk,ik->i", Z, inv, Z))
        np.testing.assert_allclose(mahalanobis(q, st_), ref, rtol=1e-9, atol=1e-9)
        assert mahalanobis(st_.scaler_mean + st_.scaler_scale * st_.mu_in, st_) == 0.0


def test_mahalanobis_rejects_nonfinite(small_stats):
    f = np.zeros(12)
    f[3] = np.nan
    with pytest.raises(ValueError):
        mahalanobis(f, small_stats)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 11), st.floats(1e-3, 1e3), st.floats(-1e3, 1e3), st.integers(0, 2**32 - 1))
def test_mahalanobis_affine_invariance(j, a, b, seed):
    r = np.random.default_rng(seed)
    F = r.multivariate_normal(np.zeros(12), spd(r, 12), size=100)
    q = r.normal(size=(5, 12)) * 2
    s1 = fit_stats_from_arrays(r.normal(size=100), F)
    F2, q2 = F.copy(), q.copy()
    F2[:, j] = a * F2[:, j] + b
    q2[:, j] = a * q2[:, j] + b
    s2 = fit_stats_from_arrays(r.normal(size=100), F2)
    np.testing.assert_allclose(mahalanobis(q, s1), mahalanobis(q2, s2), rtol=1e-6, atol=1e-6)


def test_stats_json_round_trip(tmp_path, small_stats):
    p = tmp_path / "stats.json"
    small_stats.save(p)
    back = NormalizationStats.load(p)
    np.testing.assert_allclose(back.sigma_in, small_stats.sigma_in)
    assert back.mu_rho == small_stats.mu_rho and back.lam == small_stats.lam
    assert back.features == small_stats.features


def test_fit_needs_enough_rows(small_bundle):
    short = [s.subset(np.arange(105)) for s in small_bundle.splits["in_cal"][:1]]
    with pytest.raises(StatsError):
        fit_normalization(short)


def test_sim_id_spread(small_stats):
    assert small_stats.mu_delta > 0 and small_stats.sigma_delta > 0
    assert small_stats.sigma_rho > 0
    assert small_stats.alpha == 2.0 and small_stats.m_w == 100


# ---------------------------------------------------------------------------
# sequence scoring


def test_score_frame_matches_sequence(small_bundle, small_stats):
    seq = small_bundle.splits["in_test"][0]
    sc = score_sequence(seq, small_stats)
    assert sc.n_skipped == 99
    for i in (99, 150, len(seq) - 1):
        fr = score_frame(seq.recon_error[i - 99:i + 1], seq.steering[i - 99:i + 1], seq.latent_std[i], small_stats)
        j = i - 99
        assert fr.rho == pytest.approx(sc.rho[j], abs=1e-12)
        assert fr.delta == pytest.approx(sc.delta[j], abs=1e-12)


def test_scores_in_unit_interval(small_bundle, small_stats):
    for seqs in small_bundle.splits.values():
        for s in seqs:
            out, skipped = attach_scores(s, small_stats)
            assert skipped == 99 and len(out) == len(s) - 99
            assert ((0 <= out.rho) & (out.rho <= 1)).all()
            assert ((0 <= out.delta) & (out.delta <= 1)).all()


def test_id_frame_below_mean_has_zero_rho(small_bundle, small_stats):
    seq = small_bundle.splits["in_cal"][0]
    sc = score_sequence(seq, small_stats)
    raw = np.convolve(seq.recon_error, np.ones(100) / 100, mode="valid")
    below = raw < small_stats.mu_rho
    assert below.any()
    assert np.all(sc.rho[below] == 0.0)


def test_dark_severity5_saturates(small_cfg, small_stats):
    seq, _ = simulate(small_cfg, AnomalySpec("dark", 5), "d5", seed=11)
    sc = score_sequence(seq, small_stats)
    assert np.all(sc.rho == 1.0)


def test_bias_raises_delta_over_matched_id(small_cfg, small_stats):
    # same seed: identical noise streams, only the injected fault differs
    d_bias, d_id = [], []
    for s in range(4):
        a, _ = simulate(small_cfg, AnomalySpec("bias", 3), seed=100 + s)
        b, _ = simulate(small_cfg, None, seed=100 + s)
        d_bias.append(score_sequence(a, small_stats).maha.mean())
        d_id.append(score_sequence(b, small_stats).maha.mean())
    assert np.all(np.array(d_bias) > np.array(d_id))


@settings(max_examples=25, deadline=None)
@given(st.integers(99, 299), st.integers(0, 2**32 - 1))
def test_causality(small_bundle, small_stats, i, seed):
    seq = small_bundle.splits["in_test"][0]
    r = np.random.default_rng(seed)
    mut = seq.subset(np.arange(len(seq)))
    tail = slice(i + 1, None)
    n_tail = len(seq) - i - 1
    mut.steering[tail] = r.uniform(-1, 1, n_tail)
    mut.recon_error[tail] = r.exponential(1.0, n_tail)
    mut.latent_std[tail] = r.exponential(1.0, mut.latent_std[tail].shape)
    a, b = score_sequence(seq, small_stats), score_sequence(mut, small_stats)
    k = i - 99 + 1
    np.testing.assert_array_equal(a.rho[:k], b.rho[:k])
    np.testing.assert_array_equal(a.delta[:k], b.delta[:k])


def test_sequence_features_short(small_bundle):
    s = small_bundle.splits["in_cal"][0].subset(np.arange(50))
    assert sequence_features(s).shape == (0, 12)
