import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, logit
from sklearn.isotonic import IsotonicRegression

from aical.baselines import (
    BASELINES,
    DACParams,
    apply_baseline,
    apply_isotonic,
    baseline_from_json,
    baseline_to_json,
    dac_normalized_distance,
    fit_baseline,
    fit_histbin,
    fit_isotonic,
    fit_platt,
    pava,
)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=60),
       st.integers(0, 2**32 - 1))
def test_pava_matches_sklearn(ys, seed):
    y = np.array(ys)
    w = np.random.default_rng(seed).uniform(0.1, 3.0, y.size)
    ref = IsotonicRegression().fit_transform(np.arange(y.size), y, sample_weight=w)
    np.testing.assert_allclose(pava(y, w), ref, rtol=1e-9, atol=1e-9)


def test_pava_fixed_point():
    y = np.array([0.1, 0.2, 0.2, 0.5, 0.9])
    np.testing.assert_array_equal(pava(y), y)


def test_isotonic_monotone_data_near_identity():
    k = np.arange(1, 20)
    p = k / 20
    y = np.concatenate([[1.0] * j + [0.0] * (20 - j) for j in k])
    xs, ys = fit_isotonic(np.repeat(p, 20), y)
    np.testing.assert_allclose(apply_isotonic(xs, ys, p), np.clip(p, 0.01, 0.99), atol=1e-12)


def test_isotonic_clip_and_errors(rng):
    p = rng.uniform(size=200)
    y = (p > 0.5).astype(float)
    params = fit_baseline("isotonic", p[:, None], y[:, None], [5])
    out = apply_baseline(params, np.array([[0.0], [0.2], [0.8], [1.0]]), [5])
    assert out.min() == 0.01 and out.max() == 0.99
    assert np.all(np.diff(out[:, 0]) >= 0)
    with pytest.raises(ValueError):
        fit_isotonic(np.full(5, 0.3), np.ones(5))


def test_platt_on_calibrated_data(rng):
    p = rng.uniform(0.02, 0.98, 5000)
    y = (rng.random(5000) < p).astype(float)
    a, b = fit_platt(p, y)
    assert abs(a - 1) < 0.1 and abs(b) < 0.1


def test_platt_recovers_known_map(rng):
    p = rng.uniform(0.02, 0.98, 20000)
    y = (rng.random(20000) < expit(0.5 * logit(p) + 0.3)).astype(float)
    a, b = fit_platt(p, y)
    assert a == pytest.approx(0.5, abs=0.05) and b == pytest.approx(0.3, abs=0.05)


def test_histbin_empty_bin_uses_global_rate():
    p = np.array([0.05, 0.06, 0.95, 0.97])
    y = np.array([0.0, 1.0, 1.0, 1.0])
    vals = fit_histbin(p, y)
    assert vals[0] == 0.5 and vals[14] == 1.0
    assert vals[7] == pytest.approx(0.75)
    params = fit_baseline("histbin", p[:, None], y[:, None], [1])
    np.testing.assert_allclose(apply_baseline(params, np.array([[0.5], [1.0]]), [1])[:, 0], [0.75, 1.0])


def test_dac_center_query_is_plain_ts(rng):
    centers = rng.normal(size=(5, 4)) * 10
    emb = np.repeat(centers, 40, axis=0) + 0.01 * rng.normal(size=(200, 4))
    p = rng.uniform(0.05, 0.95, (200, 2))
    y = (rng.random((200, 2)) < p).astype(float)
    params = fit_baseline("dac", p, y, [5, 10], embedding=emb)
    assert params.knn_k == 10
    d = dac_normalized_distance(params, centers)
    assert np.all(d < 0.6)
    far = dac_normalized_distance(params, centers + 100)
    np.testing.assert_array_equal(far, 1.0)
    q = np.full((5, 2), 0.8)
    out = apply_baseline(params, q, [5, 10], embedding=centers)
    ts = expit(logit(0.8) / (np.array([params.T[5], params.T[10]]) * np.exp(2 * d)[:, None]))
    np.testing.assert_allclose(out, ts, rtol=1e-12)


def test_dac_requires_embeddings(rng):
    p = rng.uniform(size=(20, 1))
    with pytest.raises(ValueError, match="embedding"):
        fit_baseline("dac", p, p > 0.5, [5])
    with pytest.raises(ValueError):
        DACParams({5: 1.0}, np.empty((0, 3)))


@pytest.mark.parametrize("kind", BASELINES)
def test_json_round_trip(kind, rng):
    n = 120
    p = rng.uniform(0.05, 0.95, (n, 2))
    y = (rng.random((n, 2)) < p).astype(float)
    emb = rng.normal(size=(n, 3))
    params = fit_baseline(kind, p, y, [5, 10], embedding=emb)
    back = baseline_from_json(baseline_to_json(params))
    q = rng.uniform(size=(30, 2))
    e = rng.normal(size=(30, 3))
    np.testing.assert_allclose(apply_baseline(back, q, [5, 10], e), apply_baseline(params, q, [5, 10], e))


@pytest.mark.parametrize("kind", ["ts", "platt", "isotonic", "histbin"])
def test_outputs_are_probabilities(kind, rng):
    p = rng.uniform(size=(300, 1))
    y = (rng.random((300, 1)) < p).astype(float)
    out = apply_baseline(fit_baseline(kind, p, y, [1]), rng.uniform(size=(100, 1)), [1])
    assert np.all((out >= 0) & (out <= 1))


def test_unknown_kind():
    with pytest.raises(ValueError):
        fit_baseline("beta", np.ones((2, 1)), np.ones((2, 1)), [1])
