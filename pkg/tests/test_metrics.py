import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from aical.metrics import (
    EVAL_HORIZONS,
    ace,
    all_metrics,
    auroc,
    bin_index,
    brier,
    ece,
    horizon_averaged_ece,
    nll,
    reliability_bins,
    sce,
    wilcoxon_exact,
    wilcoxon_normal,
    wilcoxon_signed_rank,
)


def instances(seed, n_inst=100, size=100):
    r = np.random.default_rng(seed)
    for _ in range(n_inst):
        p = r.uniform(size=size)
        # include edge values and ties
        p[:3] = [0.0, 1.0, 1 / 15]
        p[3:6] = p[6]
        y = (r.random(size) < p).astype(float)
        y[0], y[1] = 0, 1
        yield p, y


@pytest.mark.parametrize("fn, ref", [(ece, oracles.ece), (ace, oracles.ace), (sce, oracles.sce),
                                     (auroc, oracles.auroc), (nll, oracles.nll), (brier, oracles.brier)],
                         ids=["ece", "ace", "sce", "auroc", "nll", "brier"])
def test_against_brute_force(fn, ref):
    for p, y in instances(7, n_inst=30):
        assert fn(p, y) == pytest.approx(ref(p, y), abs=1e-12)


# ---------------------------------------------------------------------------
# examples


def test_ece_examples():
    assert ece([0.0, 1.0, 1.0], [0, 1, 1]) == 0.0
    assert ece([0.9, 0.9], [1, 0]) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        ece([], [])
    with pytest.raises(ValueError):
        ece([0.5], [1, 0])


def test_ece_bernoulli_stream(rng):
    p = rng.uniform(size=10000)
    y = rng.random(10000) < p
    assert ece(p, y) <= 0.03


def test_ace_examples():
    assert ace([0.0, 1.0, 0.0, 1.0], [0, 1, 0, 1]) == 0.0
    p = np.full(10, 0.7)
    y = np.r_[np.ones(7), np.zeros(3)]
    assert ace(p, y) == pytest.approx(0.0, abs=1e-15)


def test_ace_fewer_points_than_bins():
    p, y = [0.2, 0.6, 0.9], [0, 1, 1]
    assert ace(p, y) == pytest.approx(oracles.ace(p, y), abs=1e-12)


def test_sce_examples():
    assert sce([0.0, 1.0], [0, 1]) == 0.0
    assert sce([0.9, 0.9], [1, 0]) == pytest.approx(0.4)
    p = np.array([0.95, 0.97, 1.0])
    y = np.ones(3)
    assert sce(p, y) == pytest.approx(ece(p, y))


def test_auroc_examples(rng):
    assert auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert auroc([1, 2, 3, 4], [0, 1, 0, 1]) == 0.75
    assert auroc([0.5, 0.5], [0, 1]) == 0.5
    s = rng.uniform(size=20000)
    assert auroc(s, rng.integers(0, 2, 20000)) == pytest.approx(0.5, abs=0.02)
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])


def test_nll_brier_examples():
    assert nll(np.ones(5), np.ones(5)) <= 1e-5
    assert brier(np.ones(5), np.ones(5)) == 0.0
    assert nll(np.full(4, 0.5), [0, 1, 0, 1]) == pytest.approx(math.log(2))
    assert brier([0.9, 0.9], [1, 0]) == pytest.approx(0.41)


def test_all_metrics_single_class():
    m = all_metrics([0.2, 0.9], [1, 1])
    assert m["auroc"] is None and m["n"] == 2


# ---------------------------------------------------------------------------
# bins


def test_bin_edges_and_last_bin_inclusive():
    idx = bin_index(np.array([0.0, 1 / 15, 0.999999, 1.0]))
    np.testing.assert_array_equal(idx, [0, 1, 14, 14])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=200))
def test_reliability_bins_properties(rows):
    p = np.array([a for a, _ in rows])
    y = np.array([b for _, b in rows])
    rb = reliability_bins(p, y)
    assert len(rb.edges) == 16 and rb.n == len(p)
    assert rb.ece == pytest.approx(ece(p, y), abs=1e-12)
    assert 0.0 <= ece(p, y) <= 1.0 and 0.0 <= ace(p, y) <= 1.0 and 0.0 <= sce(p, y) <= 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.integers(0, 1)), min_size=2, max_size=80))
def test_auroc_invariant_to_monotone_maps(rows):
    s = np.array([a for a, _ in rows])
    y = np.array([b for _, b in rows])
    if y.min() == y.max():
        return
    a = auroc(s, y)
    assert a == pytest.approx(auroc(np.arctan(s), y), abs=1e-12)
    assert a == pytest.approx(1 - auroc(-s, y), abs=1e-12)


# ---------------------------------------------------------------------------
# horizon aggregation


def test_horizon_average_examples():
    assert horizon_averaged_ece([0.07] * 10) == pytest.approx(0.07)
    lin = np.linspace(0.1, 0.2, 10)
    assert horizon_averaged_ece(lin) == pytest.approx(0.15)
    vals = [0.1, 0.3, 0.2, 0.2, 0.5, 0.1, 0.0, 0.4, 0.3, 0.2]
    hand = sum(5 * (a + b) / 2 for a, b in zip(vals, vals[1:])) / 45
    assert horizon_averaged_ece(vals) == pytest.approx(hand)
    assert horizon_averaged_ece(dict(zip(EVAL_HORIZONS, vals)) | {1: 99.0}) == pytest.approx(hand)


def test_horizon_average_uneven_spacing():
    hs = (5, 10, 30, 50)
    v = [0.2, 0.1, 0.3, 0.1]
    hand = (5 * 0.15 + 20 * 0.2 + 20 * 0.2) / 45
    assert horizon_averaged_ece(v, hs) == pytest.approx(hand)


# ---------------------------------------------------------------------------
# Wilcoxon


def test_wilcoxon_all_zero():
    a = np.arange(8.0)
    for m in ("auto", "exact", "normal"):
        assert wilcoxon_signed_rank(a, a, m).p_value == 1.0


def test_wilcoxon_all_greater():
    r = np.random.default_rng(0)
    b = r.normal(size=20)
    res = wilcoxon_signed_rank(b + r.uniform(0.1, 1, 20), b)
    assert res.statistic == 0 and res.method == "normal"
    assert res.p_value < 0.001
    assert wilcoxon_exact(b + 1, b).p_value == pytest.approx(2 * 2.0**-20)


def test_wilcoxon_textbook_n10():
    # ranks 1..10 with negatives on {1, 7}: W- = 8
    d = np.arange(1.0, 11.0)
    d[[0, 6]] *= -1
    ex = wilcoxon_exact(d, np.zeros(10))
    assert ex.statistic == 8
    assert ex.p_value == pytest.approx(oracles.wilcoxon_exact_p(d))
    assert 0.02 < ex.p_value < 0.07
    assert abs(wilcoxon_normal(d, np.zeros(10)).p_value - ex.p_value) < 0.02


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(-6, 6), min_size=1, max_size=10))
def test_wilcoxon_exact_matches_enumeration(diffs):
    d = np.array(diffs, dtype=float)
    assert wilcoxon_exact(d, np.zeros_like(d)).p_value == pytest.approx(oracles.wilcoxon_exact_p(d), abs=1e-12)


def test_auto_switches_at_twelve():
    r = np.random.default_rng(1)
    assert wilcoxon_signed_rank(r.normal(size=12), np.zeros(12)).method == "exact"
    assert wilcoxon_signed_rank(r.normal(size=13), np.zeros(13)).method == "normal"
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1.0], [1.0, 2.0])


def test_normal_matches_scipy():
    from scipy.stats import wilcoxon

    r = np.random.default_rng(2)
    for n in (6, 13, 20, 40):
        d = np.round(r.normal(size=n), 1)
        d[d == 0] = 0.1
        ref = wilcoxon(d, method="approx", correction=True).pvalue
        assert wilcoxon_normal(d, np.zeros(n)).p_value == pytest.approx(ref, rel=1e-9)
